// The acceptance suite: thirteen go/no-go checks covering the numeric
// engine (gradient oracles, hypergradient fidelity, the degenerate
// shared-validation regime), the published constants (entropy schedule,
// box perturbation law), and the end-to-end behavior of weighted training
// at desk scale (accuracy orderings, weight separation, warm-up targets,
// entropy bimodality, temporal smoothing, the transfer strategy, and the
// baseline equivalence).
//
// Every tolerance is pinned here. The desk-scale protocol uses the pinned
// profile below; runs are independent and execute on a small thread pool.
#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rebo/config.hpp"
#include "rebo/datagen.hpp"
#include "rebo/grad_check.hpp"
#include "rebo/probes.hpp"
#include "rebo/training.hpp"

namespace rebo {

struct AcceptanceOptions {
  std::string out_dir = "acceptance_out";
  bool sabotage_uniform_weights = false;  // negative control
  std::vector<int> only;                  // empty: all criteria
  long scale_epochs = 0;  // diagnostics: override the main epoch budget
  unsigned threads = 2;
};

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

namespace acceptance {

// ---- desk-scale protocol ----

constexpr std::uint64_t kSeeds[3] = {1, 2, 3};
constexpr std::uint64_t kEvalDataSeed = 999;
constexpr long kWarmupEpochs = 30;
constexpr long kMainEpochs = 150;
// The temporal-smoothing comparison runs on an 80-main-epoch budget: the
// unregularized run's instability is in full flight there, while by the
// end of the 150-epoch budget it has already collapsed onto the weight
// poles, where a trailing window reads deceptively flat. Deterministic
// per-epoch streams make an 80-epoch run the bitwise prefix of the
// 150-epoch run, so the pair shares the long runs' trajectories.
constexpr long kStdPairMainEpochs = 80;
constexpr long kStdWindowEpochs = 50;

inline RunConfig desk_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.classes = 8;
  cfg.points = 256;
  cfg.count_labeled = 40;
  cfg.count_unlabeled = 400;
  cfg.count_weak = 200;
  cfg.count_strong = 200;
  cfg.data_seed = 100 + seed;
  cfg.encoder_widths = {3, 16, 32, 32};
  cfg.classifier_hidden = {16};
  cfg.predictor_hidden = {64, 32};
  cfg.alpha = 0.02;
  cfg.meta_rate = 0.05;
  cfg.beta = 0.5;
  cfg.gamma = 0.1;
  cfg.eta = 0.02;
  cfg.delta = 0.01;
  cfg.fixmatch_threshold = 0.95;
  cfg.warmup_epochs = kWarmupEpochs;
  cfg.epochs = kMainEpochs;
  cfg.batch_labeled = 6;
  cfg.batch_unlabeled = 12;
  cfg.batch_validation = 6;
  cfg.iters_per_epoch = 8;
  cfg.eval_interval = 0;
  cfg.seed = seed;
  return cfg;
}

inline DatasetSpec eval_spec() {
  DatasetSpec spec;
  spec.classes = 8;
  spec.points = 256;
  spec.count_labeled = 800;
  spec.count_unlabeled = 0;
  spec.count_weak = 0;
  spec.count_strong = 0;
  spec.seed = kEvalDataSeed;
  return spec;
}

struct RunOutput {
  double accuracy = 0.0;
  double post_warmup_unlabeled_mean = 1.0;
  double post_warmup_validation_mean = 0.0;
  std::map<std::int64_t, double> final_weights;  // over the unlabeled pool
  std::map<Cohort, double> cohort_means;
  double trailing_weight_std = 0.0;
  long hvp_evals = 0;
  long meta_steps = 0;
};

enum class RunKind {
  baseline_clean,
  baseline_contaminated,
  rebo_full,
  rebo_no_entropy,
  rebo_no_temporal,
  transfer,
};

inline const char* run_kind_name(RunKind kind) {
  switch (kind) {
    case RunKind::baseline_clean: return "baseline_clean";
    case RunKind::baseline_contaminated: return "baseline_contaminated";
    case RunKind::rebo_full: return "rebo_full";
    case RunKind::rebo_no_entropy: return "rebo_no_entropy";
    case RunKind::rebo_no_temporal: return "rebo_no_temporal";
    case RunKind::transfer: return "transfer";
  }
  return "?";
}

// One protocol run. `transfer_weights` must be set for RunKind::transfer.
inline RunOutput execute_run(
    RunKind kind, std::uint64_t seed, const Dataset& data,
    const Dataset& eval_data, long epochs_override, bool sabotage,
    const std::map<std::int64_t, double>* transfer_weights = nullptr) {
  RunConfig rc = desk_config(seed);
  if (epochs_override > 0) rc.epochs = epochs_override;
  TrainConfig tc = rc.train_config();
  switch (kind) {
    case RunKind::baseline_clean:
      tc.unlabeled_cohorts = "U";
      tc.meta_enabled = false;
      tc.frozen_weight = 1.0;
      break;
    case RunKind::baseline_contaminated:
      tc.meta_enabled = false;
      tc.frozen_weight = 1.0;
      break;
    case RunKind::rebo_full:
      break;
    case RunKind::rebo_no_entropy:
      tc.delta = 0.0;
      break;
    case RunKind::rebo_no_temporal:
      tc.gamma = 0.0;
      break;
    case RunKind::transfer:
      tc.meta_enabled = false;
      break;
  }
  if (sabotage && kind != RunKind::baseline_clean &&
      kind != RunKind::baseline_contaminated) {
    tc.meta_enabled = false;
    tc.frozen_weight = 1.0;  // forced uniform weights: the negative control
  }

  Trainer trainer(tc, data, &eval_data);
  if (kind == RunKind::transfer) {
    trainer.set_fixed_weights(*transfer_weights);
  }
  trainer.warmup();

  RunOutput out;
  const bool predictor_live = tc.meta_enabled && tc.frozen_weight < 0.0;
  if (predictor_live) {
    out.post_warmup_unlabeled_mean =
        trainer.mean_weight_over(trainer.unlabeled_pool());
    out.post_warmup_validation_mean =
        trainer.mean_weight_over(trainer.last_validation_half());
  }
  trainer.run_main(tc.epochs);

  out.accuracy = trainer.evaluate_accuracy();
  for (const Sample* s : trainer.unlabeled_pool()) {
    out.final_weights[s->id] = trainer.infer_weight(*s);
  }
  out.cohort_means = trainer.cohort_weight_means();
  // Last kStdWindowEpochs of a kStdPairMainEpochs-budget run; epochs are
  // stream-keyed, so the short run is a prefix of this one.
  out.trailing_weight_std = trainer.trajectories().mean_std_in_window(
      tc.warmup_epochs + kStdPairMainEpochs - kStdWindowEpochs,
      tc.warmup_epochs + kStdPairMainEpochs);
  out.hvp_evals = trainer.state().counters.hvp_evals;
  out.meta_steps = trainer.state().counters.meta_steps;
  return out;
}

// The full run matrix for criteria 5-9 and 12, executed once and shared.
struct RunMatrix {
  std::map<std::pair<int, int>, RunOutput> runs;  // (seed idx, kind) -> output
  double seconds = 0.0;

  const RunOutput& at(int seed_idx, RunKind kind) const {
    return runs.at({seed_idx, static_cast<int>(kind)});
  }

  double mean_accuracy(RunKind kind) const {
    double sum = 0.0;
    for (int s = 0; s < 3; ++s) sum += at(s, kind).accuracy;
    return sum / 3.0;
  }
};

inline RunMatrix execute_matrix(long epochs_override, bool sabotage,
                                unsigned threads) {
  const auto start = std::chrono::steady_clock::now();
  RunMatrix matrix;

  Dataset eval_data;
  eval_data.classes = 8;
  eval_data.points = 256;
  eval_data.samples = generate_dataset(eval_spec(), threads);

  std::vector<Dataset> datasets(3);
  for (int s = 0; s < 3; ++s) {
    DatasetSpec spec = desk_config(kSeeds[s]).dataset_spec();
    datasets[s].classes = spec.classes;
    datasets[s].points = spec.points;
    datasets[s].samples = generate_dataset(spec, threads);
  }

  // Stage 1: everything except transfer (which needs rebo_full's weights).
  struct Job {
    int seed_idx;
    RunKind kind;
  };
  std::vector<Job> jobs;
  for (int s = 0; s < 3; ++s) {
    for (RunKind kind :
         {RunKind::baseline_clean, RunKind::baseline_contaminated,
          RunKind::rebo_full, RunKind::rebo_no_entropy,
          RunKind::rebo_no_temporal}) {
      jobs.push_back({s, kind});
    }
  }
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    while (true) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      try {
        RunOutput out = execute_run(jobs[j].kind, kSeeds[jobs[j].seed_idx],
                                    datasets[jobs[j].seed_idx], eval_data,
                                    epochs_override, sabotage);
        std::lock_guard<std::mutex> lock(mu);
        matrix.runs[{jobs[j].seed_idx, static_cast<int>(jobs[j].kind)}] =
            std::move(out);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, 4));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  // Stage 2: transfer retraining from the estimated weights.
  std::vector<Job> transfer_jobs;
  for (int s = 0; s < 3; ++s) transfer_jobs.push_back({s, RunKind::transfer});
  std::atomic<std::size_t> tnext{0};
  auto transfer_worker = [&] {
    while (true) {
      const std::size_t j = tnext.fetch_add(1);
      if (j >= transfer_jobs.size()) break;
      const int s = transfer_jobs[j].seed_idx;
      try {
        const auto& weights = matrix.at(s, RunKind::rebo_full).final_weights;
        RunOutput out =
            execute_run(RunKind::transfer, kSeeds[s], datasets[s], eval_data,
                        epochs_override, sabotage, &weights);
        std::lock_guard<std::mutex> lock(mu);
        matrix.runs[{s, static_cast<int>(RunKind::transfer)}] = std::move(out);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, 3));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(transfer_worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  matrix.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return matrix;
}

// ---- criteria ----

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// 1: the gradient checker certifies 50 random MLP instances at 1e-6.
inline CriterionResult criterion_autodiff() {
  CriterionResult r{1, "autodiff gradient oracle", false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst = 0.0;
  int instances = 0, attempts = 0;
  while (instances < 50 && attempts < 500) {
    ++attempts;
    const std::size_t in = 4 + rng.index(4);
    const std::size_t h1 = 8 + rng.index(8);
    const std::size_t h2 = 6 + rng.index(6);
    const std::size_t out = 3 + rng.index(4);
    ParamSet p;
    auto rand_tensor = [&](Shape shape, double bound) {
      Tensor t(std::move(shape));
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = rng.uniform(-bound, bound);
      return t;
    };
    p.insert("w1", rand_tensor({in, h1}, 0.8));
    p.insert("b1", rand_tensor({h1}, 0.3));
    p.insert("w2", rand_tensor({h1, h2}, 0.8));
    p.insert("b2", rand_tensor({h2}, 0.3));
    p.insert("w3", rand_tensor({h2, out}, 0.8));
    p.insert("b3", rand_tensor({out}, 0.3));
    if (p.scalar_count() > 500) continue;
    Tensor input = rand_tensor({5, in}, 1.5);
    const std::size_t target = rng.index(out);
    ad::LossBuilder loss = [input, target](ad::Tape& tape,
                                           const ad::VarMap& v) {
      ad::Var h = tape.constant(input);
      h = ad::relu(ad::add_bias(ad::matmul(h, v.at("w1")), v.at("b1")));
      h = ad::relu(ad::add_bias(ad::matmul(h, v.at("w2")), v.at("b2")));
      h = ad::add_bias(ad::matmul(h, v.at("w3")), v.at("b3"));
      ad::Var pooled = ad::max_axis(h, 0);
      return ad::add(ad::softmax_cross_entropy(pooled, target),
                     ad::mean(ad::sigmoid(h)));
    };
    // Central differences at step 1e-5 on an O(1) loss resolve relative
    // error 1e-6 only away from relu/max kinks and for gradient entries
    // above the rounding floor; instances violating that are redrawn.
    bool valid = true;
    {
      ad::Tape tape;
      ad::VarMap vars = tape.leaves(p);
      ad::Var h = tape.constant(input);
      for (int layer = 0; layer < 2 && valid; ++layer) {
        const std::string w = layer == 0 ? "w1" : "w2";
        const std::string b = layer == 0 ? "b1" : "b2";
        h = ad::add_bias(ad::matmul(h, vars.at(w)), vars.at(b));
        for (double v : h.value().vec()) {
          if (std::abs(v) < 1e-3) valid = false;
        }
        h = ad::relu(h);
      }
      if (valid) {
        h = ad::add_bias(ad::matmul(h, vars.at("w3")), vars.at("b3"));
        const Tensor& hv = h.value();
        for (std::size_t j = 0; j < hv.dim(1) && valid; ++j) {
          double best = -1e300, second = -1e300;
          for (std::size_t i = 0; i < hv.dim(0); ++i) {
            const double v = hv.at(i, j);
            if (v > best) {
              second = best;
              best = v;
            } else if (v > second) {
              second = v;
            }
          }
          if (best - second < 1e-3) valid = false;
        }
      }
    }
    if (!valid) continue;
    ParamSet grads = ad::analytic_gradient(loss, p);
    bool resolvable = true;
    for (const auto& [name, t] : grads) {
      for (double g : t.vec()) {
        if (g != 0.0 && std::abs(g) < 5e-5) resolvable = false;
      }
    }
    if (!resolvable) continue;
    worst = std::max(worst, ad::grad_check(loss, p, 1e-5));
    ++instances;
  }
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = instances == 50 && worst <= 1e-6 && r.seconds < 10.0;
  r.detail = "max rel err " + fmt(worst) + " over " +
             std::to_string(instances) + " instances";
  return r;
}

// 2: finite-difference HVP against closed-form mixed partials; the
// forward variant must err strictly more than the central one.
inline CriterionResult criterion_hvp_fidelity() {
  CriterionResult r{2, "hypergradient finite-difference fidelity", false, "",
                    0.0};
  const auto start = std::chrono::steady_clock::now();
  CurvedHvpInstance inst = make_curved_hvp_instance(301);
  BilevelProblem problem = inst.problem();
  ParamSet exact = inst.exact_meta_gradient();
  HvpResult central = hvp_meta_gradient(problem, inst.theta, inst.phi,
                                        inst.alpha, FiniteDiff::central);
  HvpResult forward = hvp_meta_gradient(problem, inst.theta, inst.phi,
                                        inst.alpha, FiniteDiff::forward);
  const double err_central =
      central.grad.axpy(-1.0, exact).l2_norm() / exact.l2_norm();
  const double err_forward =
      forward.grad.axpy(-1.0, exact).l2_norm() / exact.l2_norm();
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = err_central <= 1e-3 && err_forward > err_central &&
           r.seconds < 10.0;
  r.detail = "central err " + fmt(err_central) + ", forward err " +
             fmt(err_forward);
  return r;
}

// 3: one-step meta-gradient direction against the per-coordinate oracle.
inline CriterionResult criterion_meta_gradient_direction() {
  CriterionResult r{3, "one-step meta-gradient vs oracle", false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  SmallSslInstance inst = make_small_ssl_instance(101);
  // Masks and pseudo-labels pinned at theta, matching the meta step; the
  // oracle probes phi only and never re-derives them either way.
  for (UnlabeledTerm& term : inst.unlabeled) {
    term.pinned =
        pin_consistency(inst.theta, term.weak_cloud, inst.threshold, inst.cfg);
  }
  BilevelProblem problem = inst.problem();
  HvpResult hvp =
      hvp_meta_gradient(problem, inst.theta, inst.phi, inst.alpha);
  ParamSet oracle =
      oracle_meta_gradient(problem, inst.theta, inst.phi, inst.alpha);
  std::vector<double> a = hvp.grad.flatten();
  std::vector<double> b = oracle.flatten();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double cosine = dot / std::sqrt(na * nb);
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = !hvp.skipped && cosine >= 0.99 && r.seconds < 60.0;
  r.detail = "cosine " + fmt(cosine) + " over " +
             std::to_string(inst.phi.scalar_count()) + " phi scalars";
  return r;
}

// 4: shared-validation constructions kill the hypergradient; held-out
// validation restores it at the same task parameters.
inline CriterionResult criterion_trivial_solution() {
  CriterionResult r{4, "trivial-solution invariant", false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  TrivialSolutionProbe probe = make_trivial_solution_probe(7);
  BilevelProblem shared = trivial_probe_problem(probe, true);
  BilevelProblem heldout = trivial_probe_problem(probe, false);
  double worst_shared = 0.0;
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    ParamSet phi = init_predictor_params(500 + trial, probe.cfg);
    const double s = rng.uniform(0.3, 3.0);
    for (auto& [name, t] : phi)
      for (double& v : t.vec()) v *= s;
    HvpResult hvp = hvp_meta_gradient(shared, probe.theta, phi, probe.alpha);
    worst_shared = std::max(worst_shared, hvp.grad.l2_norm());
  }
  ParamSet phi = init_predictor_params(77, probe.cfg);
  HvpResult heldout_hvp =
      hvp_meta_gradient(heldout, probe.theta, phi, probe.alpha);
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = probe.labeled_grad_norm <= 1e-8 && worst_shared <= 1e-6 &&
           heldout_hvp.grad.l2_norm() >= 1e-3 && r.seconds < 60.0;
  r.detail = "labeled grad " + fmt(probe.labeled_grad_norm) +
             ", shared hvp " + fmt(worst_shared) + ", held-out hvp " +
             fmt(heldout_hvp.grad.l2_norm());
  return r;
}

// 5: accuracy ordering at desk scale over 3-seed means.
inline CriterionResult criterion_accuracy_ordering(const RunMatrix& matrix) {
  CriterionResult r{5, "desk-scale accuracy ordering", false, "", 0.0};
  const double clean = matrix.mean_accuracy(RunKind::baseline_clean);
  const double contaminated =
      matrix.mean_accuracy(RunKind::baseline_contaminated);
  const double rebo = matrix.mean_accuracy(RunKind::rebo_full);
  r.seconds = matrix.seconds;
  r.pass = clean > contaminated && rebo > contaminated &&
           matrix.seconds <= 1800.0;
  r.detail = "clean " + fmt(clean) + " vs contaminated " + fmt(contaminated) +
             " vs rebo " + fmt(rebo) + "; matrix " + fmt(matrix.seconds) +
             " s";
  return r;
}

// 6: in-distribution unlabeled weights exceed strong-OOD weights by 0.2
// on every seed.
inline CriterionResult criterion_weight_separation(const RunMatrix& matrix) {
  CriterionResult r{6, "weight separation U over S", false, "", 0.0};
  bool pass = true;
  std::string detail;
  for (int s = 0; s < 3; ++s) {
    const auto& means = matrix.at(s, RunKind::rebo_full).cohort_means;
    const double gap = means.at(Cohort::U) - means.at(Cohort::S);
    pass = pass && gap >= 0.2;
    if (s) detail += ", ";
    detail += "seed" + std::to_string(s + 1) + " gap " + fmt(gap);
  }
  r.pass = pass;
  r.detail = detail;
  return r;
}

// 7: post-warm-up weight targets.
inline CriterionResult criterion_warmup_contract(const RunMatrix& matrix) {
  CriterionResult r{7, "warm-up weight targets", false, "", 0.0};
  bool pass = true;
  std::string detail;
  for (int s = 0; s < 3; ++s) {
    const auto& run = matrix.at(s, RunKind::rebo_full);
    pass = pass && run.post_warmup_unlabeled_mean <= 0.1 &&
           run.post_warmup_validation_mean >= 0.9;
    if (s) detail += ", ";
    detail += "seed" + std::to_string(s + 1) + " u " +
              fmt(run.post_warmup_unlabeled_mean) + "/v " +
              fmt(run.post_warmup_validation_mean);
  }
  r.pass = pass;
  r.detail = detail;
  return r;
}

// 8: entropy regularization empties the mid-range weight band.
inline CriterionResult criterion_entropy_bimodality(const RunMatrix& matrix) {
  CriterionResult r{8, "entropy bimodality", false, "", 0.0};
  auto mid_fraction = [](const RunOutput& run) {
    std::size_t mid = 0;
    for (const auto& [id, w] : run.final_weights) {
      if (w >= 0.2 && w <= 0.8) ++mid;
    }
    return static_cast<double>(mid) /
           static_cast<double>(run.final_weights.size());
  };
  double with_entropy = 0.0, without_entropy = 0.0;
  for (int s = 0; s < 3; ++s) {
    with_entropy += mid_fraction(matrix.at(s, RunKind::rebo_full)) / 3.0;
    without_entropy +=
        mid_fraction(matrix.at(s, RunKind::rebo_no_entropy)) / 3.0;
  }
  r.pass = with_entropy < without_entropy;
  r.detail = "mid-band fraction " + fmt(with_entropy) + " with entropy vs " +
             fmt(without_entropy) + " without";
  return r;
}

// 9: the temporal regularizer smooths per-sample weight trajectories.
inline CriterionResult criterion_matr_smoothing(const RunMatrix& matrix) {
  CriterionResult r{9, "temporal smoothing of weights", false, "", 0.0};
  double with_matr = 0.0, without_matr = 0.0;
  for (int s = 0; s < 3; ++s) {
    with_matr += matrix.at(s, RunKind::rebo_full).trailing_weight_std / 3.0;
    without_matr +=
        matrix.at(s, RunKind::rebo_no_temporal).trailing_weight_std / 3.0;
  }
  r.pass = with_matr < without_matr;
  r.detail = "last-" + std::to_string(kStdWindowEpochs) + "-epoch std of a " +
             std::to_string(kStdPairMainEpochs) + "-epoch budget: " +
             fmt(with_matr) + " with temporal reg vs " + fmt(without_matr) +
             " without";
  return r;
}

// 10: the entropy-weight schedule matches its printed piecewise form.
inline CriterionResult criterion_schedule_exactness() {
  CriterionResult r{10, "entropy schedule exactness", false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  const double delta = 0.01;
  const bool ok = entropy_weight(25, delta) == 0.0 &&
                  entropy_weight(75, delta) == 0.0025 &&
                  entropy_weight(100, delta) == 0.005 &&
                  entropy_weight(101, delta) == 0.01;
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = ok;
  r.detail = "xi(25)=" + fmt(entropy_weight(25, delta)) +
             " xi(75)=" + fmt(entropy_weight(75, delta)) +
             " xi(100)=" + fmt(entropy_weight(100, delta)) +
             " xi(101)=" + fmt(entropy_weight(101, delta));
  return r;
}

// 11: the box perturbation law over 10^4 draws.
inline CriterionResult criterion_box_law() {
  CriterionResult r{11, "box perturbation law", false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  Box box{0.4, -0.7, 1.1, 1.3, 0.9, 2.0};
  Rng rng(4242);
  int violations = 0;
  double sum = 0.0, sumsq = 0.0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    Box out = perturb_box(box, rng);
    const double shift[3] = {std::abs(out.cx - box.cx),
                             std::abs(out.cy - box.cy),
                             std::abs(out.cz - box.cz)};
    const double size[3] = {box.lx, box.ly, box.lz};
    for (int d = 0; d < 3; ++d) {
      if (shift[d] < 0.5 * size[d] - 1e-12 ||
          shift[d] > 1.0 * size[d] + 1e-12) {
        ++violations;
      }
    }
    const double ratio = out.lx / box.lx;
    sum += ratio;
    sumsq += ratio * ratio;
  }
  const double mean = sum / draws;
  const double stdev = std::sqrt(sumsq / draws - mean * mean);
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = violations == 0 && std::abs(stdev - 0.2) / 0.2 <= 0.10;
  r.detail = std::to_string(violations) + " shift violations, size std " +
             fmt(stdev);
  return r;
}

// 12: transfer retraining with estimated weights beats the contaminated
// uniform baseline without a single meta-gradient computation.
inline CriterionResult criterion_transfer(const RunMatrix& matrix) {
  CriterionResult r{12, "transfer strategy", false, "", 0.0};
  const double transfer = matrix.mean_accuracy(RunKind::transfer);
  const double contaminated =
      matrix.mean_accuracy(RunKind::baseline_contaminated);
  long hvp = 0;
  for (int s = 0; s < 3; ++s) hvp += matrix.at(s, RunKind::transfer).hvp_evals;
  r.pass = transfer >= contaminated && hvp == 0;
  r.detail = "transfer " + fmt(transfer) + " vs contaminated " +
             fmt(contaminated) + ", hvp evals " + std::to_string(hvp);
  return r;
}

// 13: rebo with meta rate 0 and frozen unit weights is bitwise the
// uniform baseline.
inline CriterionResult criterion_baseline_equivalence() {
  CriterionResult r{13, "baseline equivalence", false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  RunConfig rc = desk_config(1);
  rc.warmup_epochs = 3;
  rc.epochs = 5;

  Dataset data;
  DatasetSpec spec = rc.dataset_spec();
  data.classes = spec.classes;
  data.points = spec.points;
  data.samples = generate_dataset(spec);

  TrainConfig baseline_cfg = rc.train_config();
  baseline_cfg.meta_enabled = false;
  baseline_cfg.frozen_weight = 1.0;
  Trainer baseline(baseline_cfg, data);
  baseline.warmup();
  baseline.run_main(baseline_cfg.epochs);

  TrainConfig frozen_cfg = rc.train_config();
  frozen_cfg.meta_enabled = true;
  frozen_cfg.meta_rate = 0.0;
  frozen_cfg.frozen_weight = 1.0;
  Trainer frozen(frozen_cfg, data);
  frozen.warmup();
  frozen.run_main(frozen_cfg.epochs);

  std::ostringstream a, b;
  save_params(a, baseline.state().theta);
  save_params(b, frozen.state().theta);
  const bool theta_equal = a.str() == b.str();
  const bool phi_equal = baseline.state().phi == frozen.state().phi;
  r.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  r.pass = theta_equal && phi_equal &&
           frozen.state().counters.meta_steps > 0;
  r.detail = std::string("theta ") + (theta_equal ? "equal" : "DIFFERS") +
             ", phi " + (phi_equal ? "equal" : "DIFFERS") + " after 5 epochs";
  return r;
}

}  // namespace acceptance

inline std::vector<CriterionResult> acceptance_results(
    const AcceptanceOptions& opts) {
  using namespace acceptance;
  auto wanted = [&](int id) {
    if (opts.only.empty()) return true;
    for (int v : opts.only)
      if (v == id) return true;
    return false;
  };

  std::optional<RunMatrix> matrix;
  auto ensure_matrix = [&]() -> RunMatrix& {
    if (!matrix.has_value()) {
      matrix = execute_matrix(opts.scale_epochs,
                              opts.sabotage_uniform_weights, opts.threads);
    }
    return *matrix;
  };

  std::vector<CriterionResult> results;
  if (wanted(1)) results.push_back(criterion_autodiff());
  if (wanted(2)) results.push_back(criterion_hvp_fidelity());
  if (wanted(3)) results.push_back(criterion_meta_gradient_direction());
  if (wanted(4)) results.push_back(criterion_trivial_solution());
  if (wanted(5)) results.push_back(criterion_accuracy_ordering(ensure_matrix()));
  if (wanted(6)) results.push_back(criterion_weight_separation(ensure_matrix()));
  if (wanted(7)) results.push_back(criterion_warmup_contract(ensure_matrix()));
  if (wanted(8)) results.push_back(criterion_entropy_bimodality(ensure_matrix()));
  if (wanted(9)) results.push_back(criterion_matr_smoothing(ensure_matrix()));
  if (wanted(10)) results.push_back(criterion_schedule_exactness());
  if (wanted(11)) results.push_back(criterion_box_law());
  if (wanted(12)) results.push_back(criterion_transfer(ensure_matrix()));
  if (wanted(13)) results.push_back(criterion_baseline_equivalence());
  return results;
}

// Prints one pass/fail line per criterion, writes the JSON verdict, and
// returns the process exit code (0 all pass, 1 any failure).
inline int run_acceptance(const AcceptanceOptions& opts) {
  std::vector<CriterionResult> results = acceptance_results(opts);
  nlohmann::ordered_json verdict = nlohmann::ordered_json::array();
  bool all_pass = true;
  for (const CriterionResult& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.id << ' ' << r.name
              << ": " << r.detail;
    if (r.seconds > 0.0) {
      std::cout << " (" << acceptance::fmt(r.seconds) << " s)";
    }
    std::cout << '\n';
    all_pass = all_pass && r.pass;
    verdict.push_back({{"id", r.id},
                       {"name", r.name},
                       {"pass", r.pass},
                       {"detail", r.detail},
                       {"seconds", r.seconds}});
  }
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    std::ofstream os(std::filesystem::path(opts.out_dir) / "acceptance.json");
    os << verdict.dump(2) << '\n';
  }
  std::cout << (all_pass ? "acceptance: all criteria passed"
                         : "acceptance: FAILURES present")
            << '\n';
  return all_pass ? 0 : 1;
}

}  // namespace rebo
