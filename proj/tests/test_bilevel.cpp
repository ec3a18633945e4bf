#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rebo/bilevel.hpp"
#include "rebo/probes.hpp"
#include "rebo/rng.hpp"

using namespace rebo;
using ad::Tape;
using ad::Var;
using ad::VarMap;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double cosine(const ParamSet& a, const ParamSet& b) {
  std::vector<double> x = a.flatten();
  std::vector<double> y = b.flatten();
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  return dot / std::sqrt(nx * ny);
}

double rel_diff(const ParamSet& got, const ParamSet& want) {
  return got.axpy(-1.0, want).l2_norm() / want.l2_norm();
}

// Quadratic bi-level instance with a closed-form meta-gradient:
//   L_tr  = 0.5||theta||^2 + theta A phi^T + 0.5||phi||^2
//   L_val = 0.5||theta - t||^2
// mixed partial = A^T, exact meta-gradient = -alpha A^T (theta* - t).
struct QuadraticInstance {
  std::size_t n = 12, m = 8;
  Tensor A;      // [n,m]
  Tensor target; // [1,n]
  ParamSet theta, phi;
  double alpha = 0.05;

  explicit QuadraticInstance(std::uint64_t seed) {
    Rng rng(seed);
    A = random_tensor({n, m}, rng);
    target = random_tensor({1, n}, rng);
    theta.insert("theta", random_tensor({1, n}, rng));
    phi.insert("phi", random_tensor({1, m}, rng));
  }

  BilevelProblem problem() const {
    BilevelProblem p;
    p.train_loss = [this](Tape& tape, const VarMap& tv, const VarMap& pv) {
      Var th = tv.at("theta");
      Var ph = pv.at("phi");
      Var cross = ad::sum(ad::mul(ad::matmul(th, tape.constant(A)), ph));
      Var sq_t = ad::scale(ad::sum(ad::mul(th, th)), 0.5);
      Var sq_p = ad::scale(ad::sum(ad::mul(ph, ph)), 0.5);
      return ad::add(cross, ad::add(sq_t, sq_p));
    };
    p.val_loss = [this](Tape& tape, const VarMap& tv) {
      Var d = ad::sub(tv.at("theta"), tape.constant(target));
      return ad::scale(ad::sum(ad::mul(d, d)), 0.5);
    };
    return p;
  }

  // grad_theta L_tr = theta + (A phi^T)^T, theta* = theta - alpha * that.
  std::vector<double> theta_star() const {
    const Tensor& th = theta.at("theta");
    const Tensor& ph = phi.at("phi");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      double aphi = 0.0;
      for (std::size_t j = 0; j < m; ++j) aphi += A.at(i, j) * ph[j];
      out[i] = th[i] - alpha * (th[i] + aphi);
    }
    return out;
  }

  ParamSet exact_meta_gradient() const {
    std::vector<double> ts = theta_star();
    Tensor g({1, m});
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        s += A.at(i, j) * (ts[i] - target[i]);
      g[j] = -alpha * s;
    }
    ParamSet out;
    out.insert("phi", g);
    return out;
  }
};

}  // namespace

TEST_CASE("virtual_step arithmetic, fixed points, and degenerate rate") {
  ParamSet theta;
  theta.insert("w", Tensor::scalar(1.0));
  ParamSet g;
  g.insert("w", Tensor::scalar(2.0));
  CHECK(virtual_step(theta, g, 0.1).at("w")[0] ==
        doctest::Approx(0.8).epsilon(1e-15));
  ParamSet zero = g.zeros_like();
  CHECK(virtual_step(theta, zero, 0.1) == theta);
  CHECK(virtual_step(theta, g, 0.0) == theta);
  CHECK(theta.at("w")[0] == 1.0);  // untouched
}

TEST_CASE("virtual_step reports a missing gradient entry") {
  ParamSet theta;
  theta.insert("w", Tensor::scalar(1.0));
  theta.insert("b", Tensor::scalar(0.5));
  ParamSet g;
  g.insert("w", Tensor::scalar(2.0));
  CHECK_THROWS_WITH_AS(virtual_step(theta, g, 0.1),
                       "virtual_step: missing gradient for 'b'",
                       std::invalid_argument);
}

TEST_CASE("epsilon_of follows 1e-2 over the gradient norm") {
  ParamSet v;
  v.insert("a", Tensor({2}, {1.2, 1.6}));  // norm 2
  CHECK(epsilon_of(v) == doctest::Approx(0.005).epsilon(1e-15));
  ParamSet w;
  w.insert("a", Tensor::scalar(0.01));
  CHECK(epsilon_of(w) == doctest::Approx(1.0).epsilon(1e-15));
  ParamSet u;
  u.insert("a", Tensor({3}, {0.0, 1e-2, 0.0}));
  CHECK(epsilon_of(u) == doctest::Approx(1.0).epsilon(1e-15));
  ParamSet z;
  z.insert("a", Tensor::zeros({4}));
  CHECK_THROWS_AS(epsilon_of(z), DegenerateMetaStep);
}

TEST_CASE("hvp matches the closed form on the quadratic instance") {
  QuadraticInstance inst(11);
  HvpResult hvp =
      hvp_meta_gradient(inst.problem(), inst.theta, inst.phi, inst.alpha);
  REQUIRE_FALSE(hvp.skipped);
  ParamSet exact = inst.exact_meta_gradient();
  CHECK(rel_diff(hvp.grad, exact) <= 1e-3);
  // Quadratic training loss: the finite difference is exact to rounding.
  CHECK(rel_diff(hvp.grad, exact) <= 1e-9);
}

TEST_CASE("hvp matches the dense mixed-partial oracle on the quadratic") {
  // Assemble d2L_tr/dphi dtheta by central-differencing the analytic
  // phi-gradient over theta coordinates, then multiply by the validation
  // gradient at theta*. Verifies both the engine and the instance algebra.
  QuadraticInstance inst(13);
  BilevelProblem problem = inst.problem();
  const std::size_t n = inst.n, m = inst.m;
  const double h = 1e-5;

  auto phi_grad_at = [&](const ParamSet& th) {
    Tape tape;
    VarMap tv = tape.leaves(th);
    VarMap pv = tape.leaves(inst.phi);
    tape.backward(problem.train_loss(tape, tv, pv));
    return tape.leaf_gradients().at("phi");
  };

  std::vector<std::vector<double>> mixed(m, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    ParamSet up = inst.theta, down = inst.theta;
    up.at("theta")[i] += h;
    down.at("theta")[i] -= h;
    Tensor gu = phi_grad_at(up), gd = phi_grad_at(down);
    for (std::size_t j = 0; j < m; ++j)
      mixed[j][i] = (gu[j] - gd[j]) / (2.0 * h);
  }
  // The assembled matrix is A^T for this instance.
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < n; ++i)
      CHECK(mixed[j][i] == doctest::Approx(inst.A.at(i, j)).epsilon(1e-6));

  std::vector<double> ts = inst.theta_star();
  ParamSet via_oracle;
  Tensor g({1, m});
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      s += mixed[j][i] * (ts[i] - inst.target[i]);
    g[j] = -inst.alpha * s;
  }
  via_oracle.insert("phi", g);
  HvpResult hvp =
      hvp_meta_gradient(problem, inst.theta, inst.phi, inst.alpha);
  CHECK(rel_diff(hvp.grad, via_oracle) <= 1e-3);
}

TEST_CASE("empty unlabeled batch zeroes the HVP term bitwise") {
  // Without unlabeled terms the training loss has no phi dependence, so
  // the phi-gradients at theta+ and theta- are explicit zeros.
  ModelConfig cfg;
  cfg.encoder_widths = {3, 4, 6, 6};
  cfg.classifier_widths = {6, 4, 2};
  cfg.predictor_widths = {6, 4, 2, 1};
  ParamSet theta = init_task_params(3, cfg);
  ParamSet phi = init_predictor_params(4, cfg);
  Rng rng(5);
  Tensor c0 = random_tensor({8, 3}, rng);
  Tensor c1 = random_tensor({8, 3}, rng);
  std::vector<LabeledView> train_batch{{&c0, 0}};
  std::vector<LabeledView> val_batch{{&c1, 1}};
  BilevelProblem problem;
  problem.train_loss = [&](Tape& tape, const VarMap& tv, const VarMap& pv) {
    (void)pv;
    return training_loss(tape, tv, {}, train_batch, {}, 0.95, cfg).loss;
  };
  problem.val_loss = [&](Tape& tape, const VarMap& tv) {
    return labeled_loss(tape, tv, val_batch, cfg);
  };
  HvpResult hvp = hvp_meta_gradient(problem, theta, phi, 0.01);
  REQUIRE_FALSE(hvp.skipped);
  CHECK(hvp.grad == phi.zeros_like());
}

TEST_CASE("oracle is a zero vector when weights are detached from phi") {
  QuadraticInstance inst(17);
  BilevelProblem constant_phi;
  constant_phi.train_loss = [&](Tape& tape, const VarMap& tv,
                                const VarMap& pv) {
    (void)pv;  // phi never enters
    Var th = tv.at("theta");
    return ad::scale(ad::sum(ad::mul(th, th)), 0.5);
  };
  constant_phi.val_loss = inst.problem().val_loss;
  ParamSet g =
      oracle_meta_gradient(constant_phi, inst.theta, inst.phi, inst.alpha);
  CHECK(g == inst.phi.zeros_like());
}

TEST_CASE("oracle agrees with the exact quadratic meta-gradient") {
  QuadraticInstance inst(19);
  ParamSet g =
      oracle_meta_gradient(inst.problem(), inst.theta, inst.phi, inst.alpha);
  CHECK(rel_diff(g, inst.exact_meta_gradient()) <= 1e-6);
}

TEST_CASE("doubling alpha doubles the oracle gradient under a linear L_val") {
  // With a linear validation loss the one-step map's alpha enters the
  // meta-gradient exactly once.
  QuadraticInstance inst(23);
  Rng rng(29);
  Tensor c = random_tensor({1, inst.n}, rng);
  BilevelProblem problem = inst.problem();
  problem.val_loss = [&](Tape& tape, const VarMap& tv) {
    return ad::sum(ad::mul(tv.at("theta"), tape.constant(c)));
  };
  ParamSet g1 = oracle_meta_gradient(problem, inst.theta, inst.phi, 0.02);
  ParamSet g2 = oracle_meta_gradient(problem, inst.theta, inst.phi, 0.04);
  CHECK(rel_diff(g2, g1.scaled(2.0)) <= 1e-9);
}

TEST_CASE("oracle rejects oversized phi") {
  QuadraticInstance inst(31);
  ParamSet big;
  big.insert("phi", Tensor::zeros({600}));
  CHECK_THROWS_AS(
      oracle_meta_gradient(inst.problem(), inst.theta, big, inst.alpha),
      std::invalid_argument);
}



TEST_CASE("hvp direction matches the oracle on a 2-class 10-sample instance") {
  SmallSslInstance inst = make_small_ssl_instance(101);
  BilevelProblem problem = inst.problem();
  HvpResult hvp =
      hvp_meta_gradient(problem, inst.theta, inst.phi, inst.alpha);
  REQUIRE_FALSE(hvp.skipped);
  REQUIRE(hvp.grad.l2_norm() > 0.0);
  ParamSet oracle =
      oracle_meta_gradient(problem, inst.theta, inst.phi, inst.alpha);
  CHECK(cosine(hvp.grad, oracle) >= 0.99);
}

TEST_CASE("oracle is step-size converged: h -> h/10 changes it by < 1%") {
  SmallSslInstance inst = make_small_ssl_instance(103);
  BilevelProblem problem = inst.problem();
  ParamSet g5 =
      oracle_meta_gradient(problem, inst.theta, inst.phi, inst.alpha, 1e-5);
  ParamSet g6 =
      oracle_meta_gradient(problem, inst.theta, inst.phi, inst.alpha, 1e-6);
  CHECK(rel_diff(g6, g5) < 0.01);
}

TEST_CASE("meta_step with zero coefficients follows the HVP direction alone") {
  SmallSslInstance inst = make_small_ssl_instance(107);
  MetaStepInputs in;
  in.theta = &inst.theta;
  in.phi = &inst.phi;
  in.labeled = inst.labeled;
  in.unlabeled = inst.unlabeled;
  in.validation = inst.validation;
  in.labeled_ids = {1000, 1001};
  in.validation_ids = {2000, 2001, 2002, 2003};
  for (const Tensor& c : inst.val_clouds)
    in.validation_features.push_back(encode_global_value(inst.theta, c, inst.cfg));
  in.alpha = inst.alpha;
  in.gamma = 0.0;
  in.xi = 0.0;
  in.eta = 0.0;
  in.meta_rate = 0.5;
  in.threshold = inst.threshold;
  in.cfg = inst.cfg;
  WeightLedger ledger(0.5);
  in.ledger = &ledger;
  Counters counters;
  MetaStepOutcome out = meta_step(in, &counters);
  CHECK(counters.meta_steps == 1);
  CHECK(counters.hvp_evals == 1);
  // The reference computation pins masks and pseudo-labels at theta, the
  // way meta_step itself probes the loss.
  SmallSslInstance pinned_inst = inst;
  for (UnlabeledTerm& term : pinned_inst.unlabeled) {
    term.pinned = pin_consistency(inst.theta, term.weak_cloud,
                                  inst.threshold, inst.cfg);
  }
  HvpResult hvp = hvp_meta_gradient(pinned_inst.problem(), inst.theta,
                                    inst.phi, inst.alpha);
  ParamSet expected = inst.phi.axpy(-0.5, hvp.grad);
  CHECK(out.phi == expected);
  CHECK(out.report.temporal_norm == 0.0);
  CHECK(out.report.entropy_norm == 0.0);
  CHECK(out.report.od_norm == 0.0);
}

TEST_CASE("meta_step leaves phi unchanged when all four terms are zero") {
  // No unlabeled terms (HVP identically zero) and zero coefficients.
  SmallSslInstance inst = make_small_ssl_instance(109);
  MetaStepInputs in;
  in.theta = &inst.theta;
  in.phi = &inst.phi;
  in.labeled = inst.labeled;
  in.unlabeled = {};
  in.validation = inst.validation;
  in.alpha = inst.alpha;
  in.gamma = 0.0;
  in.xi = 0.0;
  in.eta = 0.0;
  in.meta_rate = 0.5;
  in.threshold = inst.threshold;
  in.cfg = inst.cfg;
  MetaStepOutcome out = meta_step(in);
  CHECK(out.phi == inst.phi);
}

TEST_CASE("meta_step report norms are finite and non-negative") {
  SmallSslInstance inst = make_small_ssl_instance(113);
  WeightLedger ledger(0.5);
  for (int j = 0; j < 10; ++j) ledger.observe(j, 0.4 + 0.02 * j);
  MetaStepInputs in;
  in.theta = &inst.theta;
  in.phi = &inst.phi;
  in.labeled = inst.labeled;
  in.unlabeled = inst.unlabeled;
  in.validation = inst.validation;
  for (const Tensor& c : inst.val_clouds)
    in.validation_features.push_back(encode_global_value(inst.theta, c, inst.cfg));
  in.alpha = inst.alpha;
  in.gamma = 0.1;
  in.xi = 0.01;
  in.eta = 0.01;
  in.meta_rate = 1e-3;
  in.threshold = inst.threshold;
  in.temporal = TemporalReg::matr;
  in.ledger = &ledger;
  in.cfg = inst.cfg;
  MetaStepOutcome out = meta_step(in);
  CHECK(out.report.all_finite());
  CHECK(out.report.hvp_norm >= 0.0);
  CHECK(out.report.temporal_norm >= 0.0);
  CHECK(out.report.entropy_norm >= 0.0);
  CHECK(out.report.od_norm >= 0.0);
  CHECK(out.report.epsilon > 0.0);
  CHECK(out.phi.all_finite());
}

TEST_CASE("meta_step rejects validation batches overlapping the labeled batch") {
  SmallSslInstance inst = make_small_ssl_instance(127);
  MetaStepInputs in;
  in.theta = &inst.theta;
  in.phi = &inst.phi;
  in.labeled = inst.labeled;
  in.validation = inst.validation;
  in.labeled_ids = {5, 6};
  in.validation_ids = {7, 5};
  in.cfg = inst.cfg;
  CHECK_THROWS_AS(meta_step(in), std::invalid_argument);
}

TEST_CASE("forward-difference variant errs more than central on a curved loss") {
  // The sigmoid cross term has nonzero third mixed derivatives away from
  // theta=0, so the forward variant carries an O(eps) bias while the
  // central variant is O(eps^2).
  CurvedHvpInstance inst = make_curved_hvp_instance(301);
  BilevelProblem problem = inst.problem();
  ParamSet exact = inst.exact_meta_gradient();
  HvpResult central = hvp_meta_gradient(problem, inst.theta, inst.phi,
                                        inst.alpha, FiniteDiff::central);
  HvpResult forward = hvp_meta_gradient(problem, inst.theta, inst.phi,
                                        inst.alpha, FiniteDiff::forward);
  const double err_central = rel_diff(central.grad, exact);
  const double err_forward = rel_diff(forward.grad, exact);
  CHECK(err_central <= 1e-3);
  CHECK(err_forward > err_central);
}

TEST_CASE("trivial-solution invariant: shared validation kills the signal") {
  TrivialSolutionProbe probe = make_trivial_solution_probe(7);
  CHECK(probe.labeled_grad_norm <= 1e-8);

  BilevelProblem shared = trivial_probe_problem(probe, true);
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    ParamSet phi = init_predictor_params(500 + trial, probe.cfg);
    // Vary the predictor scale too: the bound must hold for any phi.
    const double s = rng.uniform(0.3, 3.0);
    for (auto& [name, t] : phi)
      for (double& v : t.vec()) v *= s;
    HvpResult hvp = hvp_meta_gradient(shared, probe.theta, phi, probe.alpha);
    CHECK(hvp.grad.l2_norm() <= 1e-6);
  }

  BilevelProblem heldout = trivial_probe_problem(probe, false);
  ParamSet phi = init_predictor_params(77, probe.cfg);
  HvpResult hvp = hvp_meta_gradient(heldout, probe.theta, phi, probe.alpha);
  CHECK(hvp.grad.l2_norm() >= 1e-3);
}
