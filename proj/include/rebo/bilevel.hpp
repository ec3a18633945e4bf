// The meta-gradient engine.
//
// The outer objective is a validation loss evaluated at the one-step
// virtual update
//
//   theta* = theta - alpha * grad_theta L_tr(theta, phi),
//
// whose chain rule gives
//
//   grad_phi L_val = -alpha * d2L_tr/dphi dtheta * grad_theta* L_val.
//
// The Hessian-vector product is approximated by differencing the analytic
// phi-gradient of the training loss at theta +- eps*v, with v the
// validation gradient at theta* and eps = 1e-2 / ||v||. The central form
// is the default; the forward form exists behind a flag so its larger
// error is demonstrable. A per-coordinate differencing oracle for the
// whole one-step map keeps the fast path honest.
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebo/counters.hpp"
#include "rebo/param_set.hpp"
#include "rebo/regularizers.hpp"
#include "rebo/sample.hpp"
#include "rebo/ssl_losses.hpp"
#include "rebo/tape.hpp"

namespace rebo {

enum class TemporalReg { none, dtr, matr };

inline TemporalReg temporal_reg_from_string(const std::string& s) {
  if (s == "none") return TemporalReg::none;
  if (s == "dtr") return TemporalReg::dtr;
  if (s == "matr") return TemporalReg::matr;
  throw std::invalid_argument("temporal_reg: expected none|dtr|matr, got '" +
                              s + "'");
}

struct BilevelProblem {
  std::function<ad::Var(ad::Tape&, const ad::VarMap& theta,
                        const ad::VarMap& phi)>
      train_loss;
  // L_val is a function of theta* only; Eq-structure has no direct phi
  // path, so none is modeled.
  std::function<ad::Var(ad::Tape&, const ad::VarMap& theta)> val_loss;
};

enum class FiniteDiff { central, forward };

struct DegenerateMetaStep : std::runtime_error {
  DegenerateMetaStep()
      : std::runtime_error(
            "epsilon_of: zero validation gradient; meta step degenerate") {}
};

// theta - alpha * grad, element-wise; theta untouched.
inline ParamSet virtual_step(const ParamSet& theta, const ParamSet& grads,
                             double alpha) {
  ParamSet out = theta;
  for (auto& [name, t] : out) {
    if (!grads.contains(name)) {
      throw std::invalid_argument("virtual_step: missing gradient for '" +
                                  name + "'");
    }
    const Tensor& g = grads.at(name);
    if (!g.same_shape(t)) {
      throw std::invalid_argument("virtual_step: gradient shape " +
                                  shape_to_string(g.shape()) +
                                  " mismatches parameter '" + name + "' " +
                                  shape_to_string(t.shape()));
    }
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] -= alpha * g[i];
  }
  return out;
}

// eps = 1e-2 / ||v||_2 over the flattened gradient map.
inline double epsilon_of(const ParamSet& v) {
  const double norm = v.l2_norm();
  if (norm == 0.0) throw DegenerateMetaStep{};
  return 1e-2 / norm;
}

namespace detail {

inline void require_finite(const ParamSet& p, const char* stage) {
  if (!p.all_finite()) {
    throw std::runtime_error(std::string("hvp_meta_gradient: non-finite "
                                         "values at stage ") +
                             stage);
  }
}

struct LossGrads {
  double value = 0.0;
  ParamSet theta_grads;
  ParamSet phi_grads;
};

inline LossGrads train_grads(const BilevelProblem& problem,
                             const ParamSet& theta, const ParamSet& phi) {
  ad::Tape tape;
  ad::VarMap tv = tape.leaves(theta);
  ad::VarMap pv = tape.leaves(phi);
  ad::Var loss = problem.train_loss(tape, tv, pv);
  tape.backward(loss);
  ParamSet all = tape.leaf_gradients();
  LossGrads out;
  out.value = loss.scalar();
  out.theta_grads = theta.zeros_like();
  out.phi_grads = phi.zeros_like();
  for (auto& [name, t] : out.theta_grads) t = all.at(name);
  for (auto& [name, t] : out.phi_grads) t = all.at(name);
  return out;
}

inline LossGrads val_grads(const BilevelProblem& problem,
                           const ParamSet& theta) {
  ad::Tape tape;
  ad::VarMap tv = tape.leaves(theta);
  ad::Var loss = problem.val_loss(tape, tv);
  tape.backward(loss);
  LossGrads out;
  out.value = loss.scalar();
  out.theta_grads = tape.leaf_gradients();
  return out;
}

}  // namespace detail

struct HvpResult {
  bool skipped = false;    // degenerate eps: HVP term contributes zero
  ParamSet grad;           // approx grad_phi L_val; zeros when skipped
  double epsilon = 0.0;
  double val_loss = 0.0;   // L_val(theta*)
  double val_grad_norm = 0.0;
};

inline HvpResult hvp_meta_gradient(const BilevelProblem& problem,
                                   const ParamSet& theta, const ParamSet& phi,
                                   double alpha,
                                   FiniteDiff kind = FiniteDiff::central,
                                   Counters* counters = nullptr) {
  if (!(alpha > 0.0)) {
    throw std::invalid_argument("hvp_meta_gradient: alpha must be positive");
  }
  if (counters) ++counters->hvp_evals;

  detail::LossGrads base = detail::train_grads(problem, theta, phi);
  detail::require_finite(base.theta_grads, "train-grad(theta)");

  ParamSet theta_star = virtual_step(theta, base.theta_grads, alpha);
  detail::LossGrads val = detail::val_grads(problem, theta_star);
  detail::require_finite(val.theta_grads, "val-grad(theta*)");

  HvpResult out;
  out.val_loss = val.value;
  out.val_grad_norm = val.theta_grads.l2_norm();
  if (out.val_grad_norm == 0.0) {
    out.skipped = true;
    out.grad = phi.zeros_like();
    return out;
  }
  out.epsilon = epsilon_of(val.theta_grads);

  ParamSet theta_plus = theta.axpy(+out.epsilon, val.theta_grads);
  detail::LossGrads plus = detail::train_grads(problem, theta_plus, phi);
  detail::require_finite(plus.phi_grads, "train-grad(theta+)");

  ParamSet minus_phi_grads;
  double denom = 0.0;
  if (kind == FiniteDiff::central) {
    ParamSet theta_minus = theta.axpy(-out.epsilon, val.theta_grads);
    detail::LossGrads minus = detail::train_grads(problem, theta_minus, phi);
    detail::require_finite(minus.phi_grads, "train-grad(theta-)");
    minus_phi_grads = minus.phi_grads;
    denom = 2.0 * out.epsilon;
  } else {
    minus_phi_grads = base.phi_grads;  // forward difference from theta itself
    denom = out.epsilon;
  }
  out.grad = plus.phi_grads.axpy(-1.0, minus_phi_grads)
                 .scaled(-alpha / denom);
  detail::require_finite(out.grad, "hypergradient");
  return out;
}

// Exact (to O(h^2)) meta-gradient through the one-step map, probed one phi
// coordinate at a time:
//   dF/dphi_i,  F(phi) = L_val(theta - alpha * grad_theta L_tr(theta, phi)).
// The reference the fast finite-difference HVP is judged against.
inline ParamSet oracle_meta_gradient(const BilevelProblem& problem,
                                     const ParamSet& theta,
                                     const ParamSet& phi, double alpha,
                                     double h = 1e-5) {
  if (phi.scalar_count() > 500) {
    throw std::invalid_argument(
        "oracle_meta_gradient: phi too large for per-coordinate probing");
  }
  auto one_step_val = [&](const ParamSet& phi_probe) {
    detail::LossGrads g = detail::train_grads(problem, theta, phi_probe);
    ParamSet theta_star = virtual_step(theta, g.theta_grads, alpha);
    ad::Tape tape;
    ad::VarMap tv = tape.leaves(theta_star);
    return problem.val_loss(tape, tv).scalar();
  };
  ParamSet grad = phi.zeros_like();
  ParamSet probe = phi;
  std::vector<std::pair<std::string, std::size_t>> coords;
  probe.for_each_scalar([&](const std::string& name, std::size_t i, double&) {
    coords.emplace_back(name, i);
  });
  for (const auto& [name, i] : coords) {
    double& slot = probe.at(name).vec()[i];
    const double saved = slot;
    slot = saved + h;
    const double up = one_step_val(probe);
    slot = saved - h;
    const double down = one_step_val(probe);
    slot = saved;
    grad.at(name).vec()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// ---- SSL instantiation ----

struct MetaStepInputs {
  const ParamSet* theta = nullptr;
  const ParamSet* phi = nullptr;
  std::vector<LabeledView> labeled;           // current labeled training batch
  std::vector<UnlabeledTerm> unlabeled;       // pre-augmented, with features
  std::vector<LabeledView> validation;        // held-out batch
  std::vector<std::int64_t> labeled_ids;      // for the disjointness invariant
  std::vector<std::int64_t> validation_ids;
  std::vector<Tensor> validation_features;    // [1,F] per validation sample
  double alpha = 0.01;
  double gamma = 0.1;    // temporal regularizer coefficient
  double xi = 0.0;       // entropy coefficient (scheduled)
  double eta = 0.01;     // outlier-detection coefficient
  double meta_rate = 1e-3;
  double threshold = 0.95;
  TemporalReg temporal = TemporalReg::matr;
  const WeightLedger* ledger = nullptr;
  ModelConfig cfg;
  FiniteDiff fd_kind = FiniteDiff::central;
};

struct HypergradientReport {
  bool hvp_skipped = false;
  double epsilon = 0.0;
  double val_loss = 0.0;
  double val_grad_norm = 0.0;
  double hvp_norm = 0.0;
  double temporal_norm = 0.0;  // norm of gamma * grad L_reg
  double entropy_norm = 0.0;   // norm of xi * grad L_ent
  double od_norm = 0.0;        // norm of eta * grad L_OD

  bool all_finite() const {
    for (double v : {epsilon, val_loss, val_grad_norm, hvp_norm, temporal_norm,
                     entropy_norm, od_norm}) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline BilevelProblem make_ssl_problem(const MetaStepInputs& in) {
  BilevelProblem problem;
  problem.train_loss = [&in](ad::Tape& tape, const ad::VarMap& tv,
                             const ad::VarMap& pv) {
    return training_loss(tape, tv, pv, in.labeled, in.unlabeled, in.threshold,
                         in.cfg)
        .loss;
  };
  problem.val_loss = [&in](ad::Tape& tape, const ad::VarMap& tv) {
    return labeled_loss(tape, tv, in.validation, in.cfg);
  };
  return problem;
}

struct MetaStepOutcome {
  ParamSet phi;
  HypergradientReport report;
};

// One update of the weight predictor: approximate validation hypergradient
// plus the analytically differentiated regularizers, applied by plain
// gradient descent at the meta rate. On a degenerate epsilon only the
// regularizer gradients are applied.
inline MetaStepOutcome meta_step(const MetaStepInputs& in,
                                 Counters* counters = nullptr) {
  if (in.theta == nullptr || in.phi == nullptr) {
    throw std::invalid_argument("meta_step: null parameter sets");
  }
  for (std::int64_t vid : in.validation_ids) {
    for (std::int64_t lid : in.labeled_ids) {
      if (vid == lid) {
        throw std::invalid_argument(
            "meta_step: validation batch overlaps labeled training batch "
            "(sample id " + std::to_string(vid) + ")");
      }
    }
  }
  if (counters) ++counters->meta_steps;

  // Freeze each sample's confidence mask and pseudo-label at theta before
  // probing the loss at theta +- eps v: the indicator and the argmax are
  // stop-gradient constants of the training loss, and letting them flip
  // inside the difference quotient would inject O(1/eps) spikes into the
  // hypergradient.
  MetaStepInputs pinned = in;
  for (UnlabeledTerm& term : pinned.unlabeled) {
    if (!term.pinned.has_value()) {
      term.pinned =
          pin_consistency(*in.theta, term.weak_cloud, in.threshold, in.cfg);
      if (counters) ++counters->consistency_evals;
    }
  }
  BilevelProblem problem = make_ssl_problem(pinned);
  HvpResult hvp = hvp_meta_gradient(problem, *in.theta, *in.phi, in.alpha,
                                    in.fd_kind, counters);

  HypergradientReport report;
  report.hvp_skipped = hvp.skipped;
  report.epsilon = hvp.epsilon;
  report.val_loss = hvp.val_loss;
  report.val_grad_norm = hvp.val_grad_norm;
  report.hvp_norm = hvp.grad.l2_norm();

  // Each regularizer gradient comes from its own predictor-only sweep;
  // features enter as constants.
  enum class RegTerm { temporal, entropy, od };
  auto reg_gradient = [&](RegTerm which) {
    ad::Tape tape;
    ad::VarMap pv = tape.leaves(*in.phi);
    ad::Var loss = tape.constant_scalar(0.0);
    if (which == RegTerm::od) {
      std::vector<ad::Var> val_lambdas;
      for (const Tensor& f : in.validation_features) {
        val_lambdas.push_back(
            predict_weight(tape, pv, tape.constant(f), in.cfg));
      }
      if (!val_lambdas.empty()) loss = loss_od(tape, val_lambdas);
    } else {
      std::vector<ad::Var> lambdas;
      std::vector<ad::Var> tracked;  // lambdas with a ledger history
      std::vector<double> targets;
      for (const UnlabeledTerm& term : in.unlabeled) {
        ad::Var l =
            predict_weight(tape, pv, tape.constant(term.feature), in.cfg);
        lambdas.push_back(l);
        if (which == RegTerm::temporal && in.ledger != nullptr &&
            in.ledger->contains(term.sample_id)) {
          const LedgerEntry& e = in.ledger->at(term.sample_id);
          tracked.push_back(l);
          targets.push_back(in.temporal == TemporalReg::dtr ? e.weight
                                                            : e.moving_avg);
        }
      }
      if (which == RegTerm::temporal && !tracked.empty()) {
        loss = loss_weight_distance(tape, tracked, targets);
      } else if (which == RegTerm::entropy && !lambdas.empty()) {
        loss = loss_entropy(tape, lambdas);
      }
    }
    tape.backward(loss);
    ParamSet g = in.phi->zeros_like();
    ParamSet all = tape.leaf_gradients();
    for (auto& [name, t] : g) t = all.at(name);
    return g;
  };

  ParamSet total = hvp.grad;
  if (in.gamma != 0.0 && in.temporal != TemporalReg::none) {
    ParamSet g = reg_gradient(RegTerm::temporal).scaled(in.gamma);
    report.temporal_norm = g.l2_norm();
    total = total.axpy(1.0, g);
  }
  if (in.xi != 0.0) {
    ParamSet g = reg_gradient(RegTerm::entropy).scaled(in.xi);
    report.entropy_norm = g.l2_norm();
    total = total.axpy(1.0, g);
  }
  if (in.eta != 0.0) {
    ParamSet g = reg_gradient(RegTerm::od).scaled(in.eta);
    report.od_norm = g.l2_norm();
    total = total.axpy(1.0, g);
  }

  MetaStepOutcome out;
  out.phi = in.phi->axpy(-in.meta_rate, total);
  out.report = report;
  if (!out.phi.all_finite() || !report.all_finite()) {
    throw std::runtime_error("meta_step: non-finite update");
  }
  return out;
}

}  // namespace rebo
