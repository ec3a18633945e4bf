// Central-difference gradient checker. The project-wide numerical oracle:
// every differentiable path is expected to agree with it to 1e-6 relative
// error at step 1e-5.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "rebo/param_set.hpp"
#include "rebo/tape.hpp"

namespace rebo::ad {

// Builds a scalar loss on the given tape from named parameter leaves.
using LossBuilder = std::function<Var(Tape&, const VarMap&)>;

inline double eval_loss(const LossBuilder& loss, const ParamSet& params) {
  Tape tape;
  VarMap vars = tape.leaves(params);
  return loss(tape, vars).scalar();
}

inline ParamSet analytic_gradient(const LossBuilder& loss,
                                  const ParamSet& params) {
  Tape tape;
  VarMap vars = tape.leaves(params);
  Var l = loss(tape, vars);
  tape.backward(l);
  return tape.leaf_gradients();
}

// Max over all parameter scalars of
//   |analytic - central| / max(|analytic|, |central|, 1e-12).
inline double grad_check(const LossBuilder& loss, const ParamSet& params,
                         double step) {
  if (!(step > 0.0)) {
    throw std::invalid_argument("grad_check: step must be positive");
  }
  ParamSet analytic = analytic_gradient(loss, params);
  ParamSet probe = params;
  double worst = 0.0;
  probe.for_each_scalar([&](const std::string& name, std::size_t i,
                            double& v) {
    const double saved = v;
    v = saved + step;
    const double up = eval_loss(loss, probe);
    v = saved - step;
    const double down = eval_loss(loss, probe);
    v = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::runtime_error("grad_check: non-finite loss when perturbing '" +
                               name + "'[" + std::to_string(i) + "]");
    }
    const double central = (up - down) / (2.0 * step);
    const double a = analytic.at(name)[i];
    const double denom = std::max({std::abs(a), std::abs(central), 1e-12});
    worst = std::max(worst, std::abs(a - central) / denom);
  });
  return worst;
}

}  // namespace rebo::ad
