// Orchestration: warm-up, the alternating bi-level loop, the Transfer and
// Fine-tune strategies, continual training on unseen data, and evaluation.
//
// Determinism contract: every random draw comes from a stream keyed by
// (seed, purpose, global epoch, iteration, sample), so disabling the meta
// loop, freezing weights, or resuming from a checkpoint never shifts any
// other consumer's draws. Baseline mode is the same loop with the meta
// step disabled and weights frozen at 1.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebo/bilevel.hpp"
#include "rebo/counters.hpp"
#include "rebo/datagen.hpp"
#include "rebo/metrics.hpp"
#include "rebo/models.hpp"
#include "rebo/regularizers.hpp"
#include "rebo/rng.hpp"
#include "rebo/ssl_losses.hpp"

namespace rebo {

struct TrainConfig {
  double alpha = 0.01;        // task rate; also the virtual-step rate
  double meta_rate = 1e-3;
  double beta = 0.5;          // ledger moving-average rate
  double gamma = 0.1;         // temporal regularizer coefficient
  double eta = 0.01;          // outlier-detection coefficient
  double delta = 0.01;        // entropy schedule ceiling
  double fixmatch_threshold = 0.95;
  long warmup_epochs = 30;
  long epochs = 150;          // main-loop epochs
  std::size_t batch_labeled = 8;
  std::size_t batch_unlabeled = 16;
  std::size_t batch_validation = 8;
  long iters_per_epoch = 0;   // 0: ceil(unlabeled pool / batch)
  std::uint64_t seed = 1;
  TemporalReg temporal = TemporalReg::matr;
  long entropy_break1 = 50;
  long entropy_break2 = 100;
  bool entropy_continuous = false;
  long eval_interval = 10;        // epochs between accuracy evaluations
  long snapshot_interval = 10;    // epochs between ledger snapshots
  long checkpoint_interval = 0;   // main epochs between checkpoints; 0: final
  AugmentSpec weak_augment = default_weak_augment();
  AugmentSpec strong_augment = default_strong_augment();
  double warmup_predictor_rate = 0.01;   // Adam rate for the warm-up target
  long warmup_predictor_steps = 60;      // mini-batch steps per warm-up epoch
  long warmup_consolidation_steps = 6000;  // final fit; 40% at rate/5
  std::size_t warmup_predictor_batch = 60; // unlabeled samples per step
  std::size_t warmup_unlabeled_cap = 0;  // 0: whole pool each warm-up epoch
  // Soft warm-up targets: unlabeled weights are pulled toward the floor,
  // validation weights toward the ceiling, by cross-entropy against these
  // smoothed labels. Hard 0/1 targets would drive the sigmoid into deep
  // saturation, where every later meta signal vanishes and the all-zero
  // weights could never recover.
  double warmup_weight_floor = 0.05;
  double warmup_weight_ceiling = 0.95;
  bool meta_enabled = true;
  double frozen_weight = -1.0;    // >= 0: bypass the predictor with this value
  std::string unlabeled_cohorts = "UWS";
  double unlabeled_fraction = 1.0;  // pilot-training subset of the pool
  ModelConfig model;

  void validate() const {
    if (!(alpha > 0.0) || !(meta_rate >= 0.0)) {
      throw std::invalid_argument("TrainConfig: rates must be positive");
    }
    if (beta < 0.0 || beta >= 1.0) {
      throw std::invalid_argument("TrainConfig: beta must be in [0,1)");
    }
    if (gamma < 0.0 || eta < 0.0 || delta < 0.0) {
      throw std::invalid_argument("TrainConfig: coefficients must be >= 0");
    }
    if (!(fixmatch_threshold > 0.0) || fixmatch_threshold > 1.0) {
      throw std::invalid_argument("TrainConfig: threshold must be in (0,1]");
    }
    if (batch_labeled == 0 || batch_unlabeled == 0 || batch_validation == 0) {
      throw std::invalid_argument("TrainConfig: batch sizes must be positive");
    }
    if (!(unlabeled_fraction > 0.0) || unlabeled_fraction > 1.0) {
      throw std::invalid_argument(
          "TrainConfig: unlabeled_fraction must be in (0,1]");
    }
    weak_augment.validate();
    strong_augment.validate();
  }
};

// Per-sample weight observations, kept per epoch for the stability
// analyses (per-sample standard deviation over an epoch window).
class WeightTrajectories {
 public:
  void record(std::int64_t id, long epoch, double w) {
    by_sample_[id].push_back({epoch, w});
  }

  // Mean over samples of the per-sample std of observed w_t within
  // [first_epoch, last_epoch]; samples with fewer than 2 observations in
  // the window are skipped.
  double mean_std_in_window(long first_epoch, long last_epoch) const {
    double total = 0.0;
    std::size_t counted = 0;
    for (const auto& [id, obs] : by_sample_) {
      double sum = 0.0, sumsq = 0.0;
      std::size_t n = 0;
      for (const auto& [epoch, w] : obs) {
        if (epoch < first_epoch || epoch > last_epoch) continue;
        sum += w;
        sumsq += w * w;
        ++n;
      }
      if (n < 2) continue;
      const double mean = sum / static_cast<double>(n);
      const double var = std::max(0.0, sumsq / static_cast<double>(n) -
                                           mean * mean);
      total += std::sqrt(var);
      ++counted;
    }
    return counted == 0 ? 0.0 : total / static_cast<double>(counted);
  }

 private:
  std::map<std::int64_t, std::vector<std::pair<long, double>>> by_sample_;
};

struct TrainState {
  ParamSet theta;
  ParamSet phi;
  WeightLedger ledger{0.5};
  long epoch = 0;  // global epochs completed (warm-up included)
  Counters counters;
};

// Adam, used only for the warm-up target on the predictor: the per-sample
// standardized layers are poorly conditioned for plain descent, and the
// warm-up must actually reach its zero/one targets. Meta steps stay plain
// gradient descent.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParamSet& params, double rate)
      : m_(params.zeros_like()), v_(params.zeros_like()), rate_(rate) {}

  void step(ParamSet& params, const ParamSet& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, t_);
    const double bc2 = 1.0 - std::pow(0.999, t_);
    auto mi = m_.begin();
    auto vi = v_.begin();
    auto gi = grads.begin();
    for (auto pi = params.begin(); pi != params.end(); ++pi, ++mi, ++vi, ++gi) {
      for (std::size_t i = 0; i < pi->second.numel(); ++i) {
        const double g = gi->second[i];
        mi->second[i] = 0.9 * mi->second[i] + 0.1 * g;
        vi->second[i] = 0.999 * vi->second[i] + 0.001 * g * g;
        pi->second[i] -= rate_ * (mi->second[i] / bc1) /
                         (std::sqrt(vi->second[i] / bc2) + 1e-8);
      }
    }
  }

 private:
  ParamSet m_, v_;
  double rate_;
  long t_ = 0;
};

inline double evaluate(const ParamSet& theta, const ModelConfig& cfg,
                       const std::vector<Sample>& test_samples) {
  if (test_samples.empty()) {
    throw std::invalid_argument("evaluate: empty test set");
  }
  std::size_t correct = 0;
  for (const Sample& s : test_samples) {
    if (!s.labeled() || s.cohort != Cohort::L) {
      throw std::invalid_argument(
          "evaluate: test samples must be labeled and in-distribution");
    }
    Tensor logits = classify_value(
        theta, encode_global_value(theta, s.points, cfg), cfg);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < logits.numel(); ++i) {
      if (logits[i] > logits[arg]) arg = i;
    }
    if (static_cast<int>(arg) == s.label) ++correct;
  }
  return static_cast<double>(correct) /
         static_cast<double>(test_samples.size());
}

class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& data,
          const Dataset* eval_data = nullptr)
      : cfg_(std::move(cfg)), data_(data), eval_data_(eval_data) {
    cfg_.validate();
    state_.ledger = WeightLedger(cfg_.beta);
    state_.theta = init_task_params(cfg_.seed, cfg_.model);
    state_.phi = init_predictor_params(cfg_.seed + 1, cfg_.model);
    index_pools();
  }

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<MetricsRecord>& metrics() const { return metrics_; }
  const WeightTrajectories& trajectories() const { return trajectories_; }
  const std::vector<double>& accuracy_history() const { return accuracy_; }

  long iters_per_epoch() const {
    if (cfg_.iters_per_epoch > 0) return cfg_.iters_per_epoch;
    const std::size_t pool = std::max<std::size_t>(unlabeled_pool_.size(), 1);
    return static_cast<long>((pool + cfg_.batch_unlabeled - 1) /
                             cfg_.batch_unlabeled);
  }

  // Fixed per-sample weights (transfer mode). Every unlabeled id must be
  // covered.
  void set_fixed_weights(std::map<std::int64_t, double> weights) {
    for (const Sample* s : unlabeled_pool_) {
      if (!weights.count(s->id)) {
        throw std::invalid_argument("transfer weights: missing weight for "
                                    "sample " + std::to_string(s->id));
      }
    }
    fixed_weights_ = std::move(weights);
  }

  // Replace the trained state (resume, finetune, continual). The config
  // and dataset stay as constructed.
  void restore_state(TrainState state) { state_ = std::move(state); }

  // Pre-train the backbone on labeled data only while steering the
  // predictor toward zero weights on unlabeled samples and one weights on
  // the epoch's validation half. No consistency loss is evaluated; runs
  // with externally fixed weights skip the predictor entirely.
  void warmup() {
    const bool predictor_live =
        cfg_.frozen_weight < 0.0 && !fixed_weights_.has_value();
    warmup_adam_.emplace(state_.phi, cfg_.warmup_predictor_rate);
    for (long we = 0; we < cfg_.warmup_epochs; ++we) {
      const long epoch = state_.epoch;
      EpochSplit split = draw_split(epoch);
      const long iters = iters_per_epoch();
      for (long it = 0; it < iters; ++it) {
        std::vector<const Sample*> batch =
            draw_batch(labeled_by_id(split.train_ids), cfg_.batch_labeled,
                       "batch_l", epoch, it);
        task_step_labeled_only(batch);
        append_metrics_row(epoch, it, last_train_loss_, eval_val_loss(split),
                           nullptr, 0.0);
      }
      if (predictor_live) {
        predictor_warmup_epoch(split, epoch, we + 1 == cfg_.warmup_epochs);
      }
      end_of_epoch(epoch);
      ++state_.epoch;
    }
  }

  // The alternating bi-level loop for `additional_epochs` more main-loop
  // epochs. The entropy schedule runs on the main-loop epoch counter
  // (global epoch minus warm-up), so resumed and continued runs pick up
  // where the schedule left off.
  void run_main(long additional_epochs) {
    for (long k = 0; k < additional_epochs; ++k) {
      const long epoch = state_.epoch;
      const long main_epoch = epoch - cfg_.warmup_epochs;
      EpochSplit split = draw_split(epoch);
      const double xi = entropy_weight_scheduled(
          main_epoch < 0 ? 0 : main_epoch, cfg_.delta, cfg_.entropy_break1,
          cfg_.entropy_break2, cfg_.entropy_continuous);
      const long iters = iters_per_epoch();
      for (long it = 0; it < iters; ++it) {
        run_iteration(split, epoch, it, xi);
      }
      end_of_epoch(epoch);
      ++state_.epoch;
    }
  }

  double evaluate_accuracy() const {
    if (eval_data_ == nullptr) {
      throw std::logic_error("Trainer: no evaluation dataset attached");
    }
    return evaluate(state_.theta, cfg_.model, eval_data_->samples);
  }

  // Mean predictor output per cohort over the whole unlabeled pool at the
  // current parameters (pure inference).
  std::map<Cohort, double> cohort_weight_means() const {
    std::map<Cohort, double> sums;
    std::map<Cohort, std::size_t> counts;
    for (const Sample* s : unlabeled_pool_) {
      const double w = infer_weight(*s);
      sums[s->cohort] += w;
      counts[s->cohort] += 1;
    }
    std::map<Cohort, double> out;
    for (const auto& [cohort, sum] : sums) {
      out[cohort] = sum / static_cast<double>(counts[cohort]);
    }
    return out;
  }

  double infer_weight(const Sample& s) const {
    if (cfg_.frozen_weight >= 0.0) return cfg_.frozen_weight;
    if (fixed_weights_.has_value()) return fixed_weights_->at(s.id);
    Tensor feature = encode_global_value(state_.theta, s.points, cfg_.model);
    return predict_weight_value(state_.phi, feature, cfg_.model);
  }

  // Mean predictor output over a set of samples (purely from features).
  double mean_weight_over(const std::vector<const Sample*>& samples) const {
    double sum = 0.0;
    for (const Sample* s : samples) sum += infer_weight(*s);
    return samples.empty() ? 0.0 : sum / static_cast<double>(samples.size());
  }

  const std::vector<const Sample*>& unlabeled_pool() const {
    return unlabeled_pool_;
  }
  const std::vector<const Sample*>& labeled_pool() const {
    return labeled_pool_;
  }

  // Validation half of the epoch that just finished (for the warm-up
  // contract checks).
  std::vector<const Sample*> last_validation_half() const {
    std::vector<const Sample*> out;
    for (std::int64_t id : last_split_.validation_ids)
      out.push_back(by_id_.at(id));
    return out;
  }

  void snapshot_ledger(std::ostream& os) const;

 private:
  void index_pools() {
    for (const Sample& s : data_.samples) {
      by_id_[s.id] = &s;
      if (s.cohort == Cohort::L) {
        if (!s.labeled()) {
          throw std::invalid_argument("Trainer: cohort-L sample " +
                                      std::to_string(s.id) + " lacks a label");
        }
        labeled_pool_.push_back(&s);
      } else if (cfg_.unlabeled_cohorts.find(cohort_letter(s.cohort)) !=
                 std::string::npos) {
        unlabeled_pool_.push_back(&s);
      }
    }
    if (labeled_pool_.size() < 2) {
      throw std::invalid_argument("Trainer: need at least 2 labeled samples");
    }
    if (cfg_.unlabeled_fraction < 1.0) {
      const std::size_t keep = static_cast<std::size_t>(
          cfg_.unlabeled_fraction *
          static_cast<double>(unlabeled_pool_.size()));
      Rng rng = Rng(cfg_.seed).derive("unlabeled_subset");
      rng.shuffle(unlabeled_pool_);
      unlabeled_pool_.resize(std::max<std::size_t>(keep, 1));
      std::sort(unlabeled_pool_.begin(), unlabeled_pool_.end(),
                [](const Sample* a, const Sample* b) { return a->id < b->id; });
    }
  }

  Rng stream(std::string_view tag, long a, long b = 0,
             std::uint64_t c = 0) const {
    return Rng(cfg_.seed).derive(tag, static_cast<std::uint64_t>(a),
                                 static_cast<std::uint64_t>(b), c);
  }

  EpochSplit draw_split(long epoch) {
    std::vector<std::int64_t> ids;
    ids.reserve(labeled_pool_.size());
    for (const Sample* s : labeled_pool_) ids.push_back(s->id);
    Rng rng = stream("split", epoch);
    last_split_ = epoch_split(ids, rng);
    return last_split_;
  }

  std::vector<const Sample*> labeled_by_id(
      const std::vector<std::int64_t>& ids) const {
    std::vector<const Sample*> out;
    out.reserve(ids.size());
    for (std::int64_t id : ids) out.push_back(by_id_.at(id));
    return out;
  }

  std::vector<const Sample*> draw_batch(const std::vector<const Sample*>& pool,
                                        std::size_t want, std::string_view tag,
                                        long epoch, long it) const {
    std::vector<const Sample*> copy = pool;
    Rng rng = stream(tag, epoch, it);
    const std::size_t take = std::min(want, copy.size());
    // Partial Fisher-Yates: the first `take` entries are the batch.
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.index(copy.size() - i);
      std::swap(copy[i], copy[j]);
    }
    copy.resize(take);
    return copy;
  }

  void task_step_labeled_only(const std::vector<const Sample*>& batch) {
    ad::Tape tape;
    ad::VarMap tv = tape.leaves(state_.theta);
    std::vector<LabeledView> views;
    for (const Sample* s : batch) views.push_back({&s->points, s->label});
    ad::Var loss = labeled_loss(tape, tv, views, cfg_.model);
    last_train_loss_ = loss.scalar();
    require_finite_loss(last_train_loss_);
    tape.backward(loss);
    ParamSet grads = tape.leaf_gradients();
    state_.theta = virtual_step(state_.theta, grads, cfg_.alpha);
    ++state_.counters.task_steps;
  }

  // Binary cross-entropy target on the predictor: unlabeled -> 0, the
  // epoch's validation half -> 1, balanced per-term. Mini-batch Adam over
  // features cached once per epoch; the final warm-up epoch adds a long
  // consolidation fit whose tail runs at a fifth of the rate so the
  // memorized solution settles instead of bouncing.
  void predictor_warmup_epoch(const EpochSplit& split, long epoch,
                              bool final_epoch) {
    std::vector<const Sample*> unlabeled = unlabeled_pool_;
    if (cfg_.warmup_unlabeled_cap > 0 &&
        unlabeled.size() > cfg_.warmup_unlabeled_cap) {
      unlabeled = draw_batch(unlabeled_pool_, cfg_.warmup_unlabeled_cap,
                             "warmup_cap", epoch, 0);
    }
    std::vector<Tensor> unlabeled_features;
    unlabeled_features.reserve(unlabeled.size());
    for (const Sample* s : unlabeled) {
      unlabeled_features.push_back(
          encode_global_value(state_.theta, s->points, cfg_.model));
    }
    std::vector<Tensor> validation_features;
    for (std::int64_t id : split.validation_ids) {
      validation_features.push_back(encode_global_value(
          state_.theta, by_id_.at(id)->points, cfg_.model));
    }
    if (unlabeled_features.empty() || validation_features.empty()) return;

    Rng batch_rng = stream("warmup_pred", epoch);
    // Cross-entropy against a smoothed target t: -t log l - (1-t) log(1-l).
    auto toward = [](ad::Tape& tape, ad::Var lam, double target) {
      ad::Var one = tape.constant_scalar(1.0);
      ad::Var pos = ad::scale(ad::log_clamped(lam), -target);
      ad::Var neg =
          ad::scale(ad::log_clamped(ad::sub(one, lam)), -(1.0 - target));
      return ad::add(pos, neg);
    };
    auto run_steps = [&](long steps, AdamOptimizer& adam) {
      const std::size_t ubatch =
          std::min(cfg_.warmup_predictor_batch, unlabeled_features.size());
      for (long step = 0; step < steps; ++step) {
        ad::Tape tape;
        ad::VarMap pv = tape.leaves(state_.phi);
        ad::Var u_sum = tape.constant_scalar(0.0);
        for (std::size_t b = 0; b < ubatch; ++b) {
          const Tensor& f =
              unlabeled_features[batch_rng.index(unlabeled_features.size())];
          ad::Var lam = predict_weight(tape, pv, tape.constant(f), cfg_.model);
          u_sum = ad::add(u_sum, toward(tape, lam, cfg_.warmup_weight_floor));
        }
        ad::Var v_sum = tape.constant_scalar(0.0);
        for (const Tensor& f : validation_features) {
          ad::Var lam = predict_weight(tape, pv, tape.constant(f), cfg_.model);
          v_sum =
              ad::add(v_sum, toward(tape, lam, cfg_.warmup_weight_ceiling));
        }
        ad::Var loss = ad::add(
            ad::scale(u_sum, 1.0 / static_cast<double>(ubatch)),
            ad::scale(v_sum,
                      1.0 / static_cast<double>(validation_features.size())));
        tape.backward(loss);
        ParamSet grads = state_.phi.zeros_like();
        ParamSet all = tape.leaf_gradients();
        for (auto& [name, t] : grads) t = all.at(name);
        adam.step(state_.phi, grads);
      }
    };
    run_steps(cfg_.warmup_predictor_steps, *warmup_adam_);
    if (final_epoch && cfg_.warmup_consolidation_steps > 0) {
      const long coarse = cfg_.warmup_consolidation_steps * 6 / 10;
      run_steps(coarse, *warmup_adam_);
      AdamOptimizer fine(state_.phi, cfg_.warmup_predictor_rate / 5.0);
      run_steps(cfg_.warmup_consolidation_steps - coarse, fine);
    }
  }

  struct IterationBatches {
    std::vector<const Sample*> labeled;
    std::vector<const Sample*> unlabeled;
    std::vector<const Sample*> validation;
    std::vector<LabeledView> labeled_views;
    std::vector<LabeledView> validation_views;
    std::vector<UnlabeledTerm> terms;  // weights unresolved (no fixed value)
    std::vector<Tensor> validation_features;
  };

  IterationBatches assemble_batches(const EpochSplit& split, long epoch,
                                    long it) const {
    IterationBatches out;
    out.labeled = draw_batch(labeled_by_id(split.train_ids),
                             cfg_.batch_labeled, "batch_l", epoch, it);
    out.unlabeled =
        draw_batch(unlabeled_pool_, cfg_.batch_unlabeled, "batch_u", epoch, it);
    out.validation = draw_batch(labeled_by_id(split.validation_ids),
                                cfg_.batch_validation, "batch_v", epoch, it);
    for (const Sample* s : out.labeled)
      out.labeled_views.push_back({&s->points, s->label});
    for (const Sample* s : out.validation)
      out.validation_views.push_back({&s->points, s->label});
    for (const Sample* s : out.unlabeled) {
      UnlabeledTerm term;
      term.sample_id = s->id;
      Rng wrng = stream("aug_w", epoch, it, static_cast<std::uint64_t>(s->id));
      Rng srng = stream("aug_s", epoch, it, static_cast<std::uint64_t>(s->id));
      term.weak_cloud = augment(s->points, cfg_.weak_augment, wrng);
      term.strong_cloud = augment(s->points, cfg_.strong_augment, srng);
      term.feature = encode_global_value(state_.theta, s->points, cfg_.model);
      out.terms.push_back(std::move(term));
    }
    for (const Sample* s : out.validation) {
      out.validation_features.push_back(
          encode_global_value(state_.theta, s->points, cfg_.model));
    }
    return out;
  }

  void run_iteration(const EpochSplit& split, long epoch, long it,
                     double xi) {
    IterationBatches batches = assemble_batches(split, epoch, it);

    HypergradientReport report;
    const bool run_meta = cfg_.meta_enabled && !fixed_weights_.has_value();
    if (run_meta) {
      MetaStepInputs in;
      in.theta = &state_.theta;
      in.phi = &state_.phi;
      in.labeled = batches.labeled_views;
      in.unlabeled = batches.terms;
      if (cfg_.frozen_weight >= 0.0) {
        for (UnlabeledTerm& t : in.unlabeled)
          t.fixed_weight = cfg_.frozen_weight;
      }
      in.validation = batches.validation_views;
      for (const Sample* s : batches.labeled)
        in.labeled_ids.push_back(s->id);
      for (const Sample* s : batches.validation)
        in.validation_ids.push_back(s->id);
      in.validation_features = batches.validation_features;
      in.alpha = cfg_.alpha;
      in.gamma = cfg_.gamma;
      in.xi = xi;
      in.eta = cfg_.eta;
      in.meta_rate = cfg_.meta_rate;
      in.threshold = cfg_.fixmatch_threshold;
      in.temporal = cfg_.temporal;
      in.ledger = &state_.ledger;
      in.cfg = cfg_.model;
      MetaStepOutcome outcome = meta_step(in, &state_.counters);
      state_.phi = std::move(outcome.phi);
      report = outcome.report;
    }

    // Resolve the weights the task step will see (post-meta predictor).
    for (UnlabeledTerm& term : batches.terms) {
      if (cfg_.frozen_weight >= 0.0) {
        term.fixed_weight = cfg_.frozen_weight;
      } else if (fixed_weights_.has_value()) {
        term.fixed_weight = fixed_weights_->at(term.sample_id);
      } else {
        term.fixed_weight =
            predict_weight_value(state_.phi, term.feature, cfg_.model);
      }
    }

    // Task step on the weighted loss; lambdas enter as constants.
    {
      ad::Tape tape;
      ad::VarMap tv = tape.leaves(state_.theta);
      TrainingLossResult r = training_loss(
          tape, tv, {}, batches.labeled_views, batches.terms,
          cfg_.fixmatch_threshold, cfg_.model, &state_.counters);
      last_train_loss_ = r.loss_value;
      require_finite_loss(last_train_loss_);
      tape.backward(r.loss);
      ParamSet all = tape.leaf_gradients();
      ParamSet grads = state_.theta.zeros_like();
      for (auto& [name, t] : grads) t = all.at(name);
      state_.theta = virtual_step(state_.theta, grads, cfg_.alpha);
      ++state_.counters.task_steps;
    }

    // Ledger update: w_t first, then the moving average, after the step.
    for (const UnlabeledTerm& term : batches.terms) {
      const double w = *term.fixed_weight;
      state_.ledger.observe(term.sample_id, w,
                            by_id_.at(term.sample_id)->cohort);
      trajectories_.record(term.sample_id, state_.epoch, w);
    }

    append_metrics_row(epoch, it, last_train_loss_, eval_val_loss(split),
                       run_meta ? &report : nullptr, xi);
  }

  double eval_val_loss(const EpochSplit& split) {
    // Forward-only validation loss on a fixed-size probe batch drawn from
    // the epoch's validation half; measured after the step.
    std::vector<const Sample*> probe = labeled_by_id(split.validation_ids);
    if (probe.size() > cfg_.batch_validation) probe.resize(cfg_.batch_validation);
    ad::Tape tape;
    ad::VarMap tv = tape.leaves(state_.theta);
    std::vector<LabeledView> views;
    for (const Sample* s : probe) views.push_back({&s->points, s->label});
    return labeled_loss(tape, tv, views, cfg_.model).scalar();
  }

  void append_metrics_row(long epoch, long it, double train_loss,
                          double val_loss, const HypergradientReport* report,
                          double xi) {
    MetricsRecord row;
    row.epoch = epoch;
    row.iteration = it;
    row.train_loss = train_loss;
    row.val_loss = val_loss;
    row.xi = xi;
    double sums[5] = {0, 0, 0, 0, 0};
    std::size_t counts[5] = {0, 0, 0, 0, 0};
    for (const auto& [id, entry] : state_.ledger.entries()) {
      sums[static_cast<int>(entry.cohort)] += entry.weight;
      counts[static_cast<int>(entry.cohort)] += 1;
    }
    auto mean_of = [&](Cohort c) {
      const int i = static_cast<int>(c);
      return counts[i] == 0 ? std::nan("") : sums[i] / counts[i];
    };
    row.mean_w_u = mean_of(Cohort::U);
    row.mean_w_w = mean_of(Cohort::W);
    row.mean_w_s = mean_of(Cohort::S);
    row.mean_w_o = mean_of(Cohort::O);
    if (report != nullptr) {
      row.hvp_norm = report->hvp_norm;
      row.temporal_norm = report->temporal_norm;
      row.entropy_norm = report->entropy_norm;
      row.od_norm = report->od_norm;
      row.epsilon = report->epsilon;
    }
    metrics_.push_back(row);
  }

  void end_of_epoch(long epoch) {
    if (eval_data_ != nullptr && cfg_.eval_interval > 0 &&
        (epoch + 1) % cfg_.eval_interval == 0) {
      const double acc = evaluate_accuracy();
      accuracy_.push_back(acc);
      if (!metrics_.empty()) metrics_.back().accuracy = acc;
    }
  }

  void require_finite_loss(double loss) const {
    if (!std::isfinite(loss)) {
      throw std::runtime_error(
          "train: non-finite training loss at global epoch " +
          std::to_string(state_.epoch));
    }
  }

  TrainConfig cfg_;
  const Dataset& data_;
  const Dataset* eval_data_;
  TrainState state_;
  std::vector<const Sample*> labeled_pool_;
  std::vector<const Sample*> unlabeled_pool_;
  std::map<std::int64_t, const Sample*> by_id_;
  std::optional<std::map<std::int64_t, double>> fixed_weights_;
  std::vector<MetricsRecord> metrics_;
  std::vector<double> accuracy_;
  WeightTrajectories trajectories_;
  EpochSplit last_split_;
  double last_train_loss_ = 0.0;
  std::optional<AdamOptimizer> warmup_adam_;
};

// ---- state persistence ----
//
// A checkpoint directory holds theta.bin and phi.bin (parameter format),
// ledger.csv, and state.txt with the global epoch counter. Together with
// the config and seed this is everything a resumed run needs.

inline void write_ledger_csv(std::ostream& os, const WeightLedger& ledger) {
  os << "sample_id,cohort,w,w_avg\n";
  for (const auto& [id, entry] : ledger.entries()) {
    os << id << ',' << cohort_letter(entry.cohort) << ','
       << format_double(entry.weight) << ','
       << format_double(entry.moving_avg) << '\n';
  }
}

inline void Trainer::snapshot_ledger(std::ostream& os) const {
  write_ledger_csv(os, state_.ledger);
}

inline void save_ledger_csv(const std::string& path,
                            const WeightLedger& ledger) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_ledger_csv: cannot open " + path);
  write_ledger_csv(os, ledger);
}

inline WeightLedger load_ledger_csv(const std::string& path, double beta) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_ledger_csv: cannot open " + path);
  WeightLedger ledger(beta);
  std::string line;
  if (!std::getline(is, line) || line != "sample_id,cohort,w,w_avg") {
    throw std::runtime_error("load_ledger_csv: bad header in " + path);
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id_s, cohort_s, w_s, avg_s;
    if (!std::getline(row, id_s, ',') || !std::getline(row, cohort_s, ',') ||
        !std::getline(row, w_s, ',') || !std::getline(row, avg_s)) {
      throw std::runtime_error("load_ledger_csv: bad row '" + line + "'");
    }
    LedgerEntry entry;
    entry.weight = std::stod(w_s);
    entry.moving_avg = std::stod(avg_s);
    entry.cohort = cohort_from_letter(cohort_s.at(0));
    ledger.set_entry(std::stoll(id_s), entry);
  }
  return ledger;
}

inline void save_train_state(const std::string& dir, const TrainState& state) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_params(dir + "/theta.bin", state.theta);
  save_params(dir + "/phi.bin", state.phi);
  save_ledger_csv(dir + "/ledger.csv", state.ledger);
  std::ofstream os(dir + "/state.txt");
  if (!os) throw std::runtime_error("save_train_state: cannot open state.txt");
  os << "epoch " << state.epoch << "\n"
     << "task_steps " << state.counters.task_steps << "\n"
     << "meta_steps " << state.counters.meta_steps << "\n"
     << "hvp_evals " << state.counters.hvp_evals << "\n"
     << "consistency_evals " << state.counters.consistency_evals << "\n";
}

inline TrainState load_train_state(const std::string& dir, double beta) {
  TrainState state;
  state.theta = load_params(dir + "/theta.bin");
  state.phi = load_params(dir + "/phi.bin");
  state.ledger = load_ledger_csv(dir + "/ledger.csv", beta);
  std::ifstream is(dir + "/state.txt");
  std::string key;
  if (!is || !(is >> key >> state.epoch) || key != "epoch") {
    throw std::runtime_error("load_train_state: bad state.txt in " + dir);
  }
  long* slots[4] = {&state.counters.task_steps, &state.counters.meta_steps,
                    &state.counters.hvp_evals,
                    &state.counters.consistency_evals};
  for (long* slot : slots) {
    long value = 0;
    if (is >> key >> value) *slot = value;
  }
  return state;
}

// ---- strategies ----

// Retrain a fresh backbone from scratch with the unlabeled weights fixed
// to an externally estimated map. No predictor, no meta computations.
inline Trainer transfer_retrain(const std::map<std::int64_t, double>& weights,
                                const Dataset& data, TrainConfig cfg,
                                const Dataset* eval_data = nullptr) {
  cfg.meta_enabled = false;
  cfg.frozen_weight = -1.0;
  Trainer trainer(cfg, data, eval_data);
  trainer.set_fixed_weights(weights);
  trainer.warmup();  // labeled-only backbone pre-training, predictor idle
  trainer.run_main(cfg.epochs);
  return trainer;
}

// Continue bi-level training of an existing state on (typically) the full
// dataset for a few epochs.
inline void finetune(Trainer& trainer, long epochs) {
  if (epochs <= 0) return;
  trainer.run_main(epochs);
}

enum class ContinualMode { estimate_fix, finetune };

// Continual training when new unlabeled data arrives. estimate_fix infers
// weights for every unlabeled sample once with the current predictor,
// freezes them, and trains the backbone only; finetune keeps the full
// bi-level loop running on the extended pool.
inline void continual_unseen(Trainer& trainer, ContinualMode mode,
                             long epochs) {
  if (mode == ContinualMode::estimate_fix) {
    std::map<std::int64_t, double> weights;
    for (const Sample* s : trainer.unlabeled_pool()) {
      weights[s->id] = trainer.infer_weight(*s);
    }
    trainer.set_fixed_weights(weights);
  }
  trainer.run_main(epochs);
}

}  // namespace rebo
