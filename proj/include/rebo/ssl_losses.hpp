// Losses for open-set semi-supervised training: labeled cross-entropy,
// point-cloud augmentations, the FixMatch-style consistency loss, and the
// per-sample weighted training objective
//
//   (1/N_l) sum_i CE(X_i, y_i)  +  (1/N_u) sum_j lambda(X_j; phi) Lu(X_j).
//
// Pseudo-labels come from a gradient-free pass over the weakly augmented
// cloud; the unrolled meta step differentiates the training loss twice,
// so a leaky pseudo-label would silently corrupt the hypergradient. The
// stop-gradient is therefore structural (plain evaluation, not a tape op)
// and tested.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "rebo/counters.hpp"
#include "rebo/models.hpp"
#include "rebo/rng.hpp"
#include "rebo/sample.hpp"
#include "rebo/tape.hpp"

namespace rebo {

struct AugmentSpec {
  double rotation = 0.0;       // max |angle| about the vertical axis, radians
  double jitter_sigma = 0.0;   // per-coordinate Gaussian noise
  double dropout = 0.0;        // fraction of points replaced by survivors

  void validate() const {
    if (rotation < 0.0 || jitter_sigma < 0.0 || dropout < 0.0 ||
        dropout >= 1.0) {
      throw std::invalid_argument("AugmentSpec: need rotation >= 0, jitter >= 0, dropout in [0,1)");
    }
  }
};

inline AugmentSpec default_weak_augment() {
  return AugmentSpec{std::numbers::pi / 18.0, 0.005, 0.0};
}

inline AugmentSpec default_strong_augment() {
  return AugmentSpec{std::numbers::pi / 2.0, 0.02, 0.2};
}

// Rotation about z, additive jitter, then point dropout with replacement
// by duplicated survivors so N is preserved.
inline Tensor augment(const Tensor& cloud, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t n = cloud.dim(0);
  Tensor out = cloud;
  const double angle = rng.uniform(-spec.rotation, spec.rotation);
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = out.at(i, 0), y = out.at(i, 1);
    out.at(i, 0) = c * x - s * y;
    out.at(i, 1) = s * x + c * y;
  }
  if (spec.jitter_sigma > 0.0) {
    for (std::size_t i = 0; i < n * 3; ++i)
      out[i] += rng.normal(0.0, spec.jitter_sigma);
  }
  const std::size_t drop = static_cast<std::size_t>(spec.dropout *
                                                    static_cast<double>(n));
  if (drop > 0 && drop < n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    // order[0..drop) are dropped; refill from the surviving tail.
    for (std::size_t k = 0; k < drop; ++k) {
      const std::size_t victim = order[k];
      const std::size_t donor = order[drop + rng.index(n - drop)];
      for (std::size_t d = 0; d < 3; ++d)
        out.at(victim, d) = out.at(donor, d);
    }
  }
  return out;
}

// ---- labeled loss ----

struct LabeledView {
  const Tensor* cloud = nullptr;
  int label = kNoLabel;
};

inline std::vector<LabeledView> labeled_views(std::span<const Sample> batch) {
  std::vector<LabeledView> out;
  out.reserve(batch.size());
  for (const Sample& s : batch) out.push_back({&s.points, s.label});
  return out;
}

// Mean softmax cross-entropy over the batch.
inline ad::Var labeled_loss(ad::Tape& tape, const ad::VarMap& theta,
                            std::span<const LabeledView> batch,
                            const ModelConfig& cfg) {
  if (batch.empty()) {
    throw std::invalid_argument("labeled_loss: empty batch");
  }
  ad::Var total = tape.constant_scalar(0.0);
  for (const LabeledView& v : batch) {
    if (v.label == kNoLabel) {
      throw std::invalid_argument("labeled_loss: sample without label");
    }
    ad::Var logits = classify(tape, theta, encode_global(tape, theta, *v.cloud, cfg), cfg);
    total = ad::add(total, ad::softmax_cross_entropy(
                               logits, static_cast<std::size_t>(v.label)));
  }
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

// ---- consistency loss ----

namespace detail {

inline ParamSet values_of(const ad::VarMap& vars) {
  ParamSet out;
  for (const auto& [name, v] : vars) out.insert(name, v.value());
  return out;
}

}  // namespace detail

struct ConsistencyOutcome {
  bool active = false;          // false: masked by the confidence threshold
  std::size_t pseudo_label = 0;
  double confidence = 0.0;
  ad::Var loss;                 // zero constant when masked
};

// Core with pre-drawn augmented clouds, so one iteration's meta and task
// passes see identical views. The weak pass is evaluated without a tape:
// the pseudo-label is a constant by construction.
inline ConsistencyOutcome consistency_loss_preaug(
    ad::Tape& tape, const ad::VarMap& theta, const Tensor& weak_cloud,
    const Tensor& strong_cloud, double threshold, const ModelConfig& cfg,
    Counters* counters = nullptr) {
  if (!(threshold > 0.0) || threshold > 1.0) {
    throw std::invalid_argument("consistency_loss: threshold must be in (0,1]");
  }
  if (counters) ++counters->consistency_evals;
  const ParamSet theta_values = detail::values_of(theta);
  const Tensor logits =
      classify_value(theta_values,
                     encode_global_value(theta_values, weak_cloud, cfg), cfg);
  double m = logits[0];
  std::size_t arg = 0;
  for (std::size_t i = 1; i < logits.numel(); ++i) {
    if (logits[i] > m) {
      m = logits[i];
      arg = i;
    }
  }
  double z = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i)
    z += std::exp(logits[i] - m);
  const double confidence = 1.0 / z;  // softmax at the argmax
  ConsistencyOutcome out;
  out.pseudo_label = arg;
  out.confidence = confidence;
  if (confidence < threshold) {
    out.active = false;
    out.loss = tape.constant_scalar(0.0);
    return out;
  }
  out.active = true;
  ad::Var strong_logits =
      classify(tape, theta, encode_global(tape, theta, strong_cloud, cfg), cfg);
  out.loss = ad::softmax_cross_entropy(strong_logits, arg);
  return out;
}

// Convenience form that draws the weak/strong augmentations itself.
inline ConsistencyOutcome consistency_loss(
    ad::Tape& tape, const ad::VarMap& theta, const Tensor& cloud,
    double threshold, const AugmentSpec& weak, const AugmentSpec& strong,
    Rng& rng, const ModelConfig& cfg, Counters* counters = nullptr) {
  Rng weak_rng = rng.derive("weak");
  Rng strong_rng = rng.derive("strong");
  return consistency_loss_preaug(tape, theta, augment(cloud, weak, weak_rng),
                                 augment(cloud, strong, strong_rng), threshold,
                                 cfg, counters);
}

// ---- weighted open-set training loss ----

struct PinnedConsistency {
  bool active = false;
  std::size_t pseudo_label = 0;
};

struct UnlabeledTerm {
  std::int64_t sample_id = 0;
  Tensor weak_cloud;
  Tensor strong_cloud;
  Tensor feature;  // [1,F] snapshot fed to the predictor, detached from theta
  std::optional<double> fixed_weight;  // bypass the predictor when set
  // The confidence mask and pseudo-label are stop-gradient constants of
  // the training loss; pinning them freezes the discrete structure while
  // the loss is probed at displaced task parameters, which is what the
  // hypergradient's finite difference actually differentiates.
  std::optional<PinnedConsistency> pinned;
};

// Gradient-free weak pass: confidence and argmax at the given parameters.
inline PinnedConsistency pin_consistency(const ParamSet& theta_values,
                                         const Tensor& weak_cloud,
                                         double threshold,
                                         const ModelConfig& cfg) {
  const Tensor logits = classify_value(
      theta_values, encode_global_value(theta_values, weak_cloud, cfg), cfg);
  double m = logits[0];
  std::size_t arg = 0;
  for (std::size_t i = 1; i < logits.numel(); ++i) {
    if (logits[i] > m) {
      m = logits[i];
      arg = i;
    }
  }
  double z = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i)
    z += std::exp(logits[i] - m);
  PinnedConsistency out;
  out.pseudo_label = arg;
  out.active = 1.0 / z >= threshold;
  return out;
}

struct TrainingLossResult {
  ad::Var loss;        // valid while the tape that built it is alive
  double loss_value = 0.0;
  std::vector<double> weights;           // resolved lambda per term
  std::vector<ad::Var> weight_vars;      // predictor outputs; invalid when fixed
  std::vector<bool> active;              // consistency mask per term
  std::vector<double> consistency_values;
};

// Eq-for-eq weighted objective at batch granularity. phi may be empty when
// every term carries a fixed weight (baseline, transfer, frozen runs).
inline TrainingLossResult training_loss(
    ad::Tape& tape, const ad::VarMap& theta, const ad::VarMap& phi,
    std::span<const LabeledView> labeled, std::span<const UnlabeledTerm> unlabeled,
    double threshold, const ModelConfig& cfg, Counters* counters = nullptr) {
  TrainingLossResult out;
  ad::Var loss = labeled_loss(tape, theta, labeled, cfg);
  if (!unlabeled.empty()) {
    ad::Var usum = tape.constant_scalar(0.0);
    for (const UnlabeledTerm& term : unlabeled) {
      ConsistencyOutcome c;
      if (term.pinned.has_value()) {
        c.active = term.pinned->active;
        c.pseudo_label = term.pinned->pseudo_label;
        if (c.active) {
          ad::Var strong_logits = classify(
              tape, theta, encode_global(tape, theta, term.strong_cloud, cfg),
              cfg);
          c.loss = ad::softmax_cross_entropy(strong_logits, c.pseudo_label);
        } else {
          c.loss = tape.constant_scalar(0.0);
        }
      } else {
        c = consistency_loss_preaug(tape, theta, term.weak_cloud,
                                    term.strong_cloud, threshold, cfg,
                                    counters);
      }
      ad::Var weight_var;
      double weight_value;
      if (term.fixed_weight.has_value()) {
        weight_value = *term.fixed_weight;
        weight_var = tape.constant_scalar(weight_value);
      } else {
        weight_var = predict_weight(tape, phi, tape.constant(term.feature), cfg);
        weight_value = weight_var.scalar();
      }
      usum = ad::add(usum, ad::mul(weight_var, c.loss));
      out.weights.push_back(weight_value);
      out.weight_vars.push_back(weight_var);
      out.active.push_back(c.active);
      out.consistency_values.push_back(c.loss.scalar());
    }
    loss = ad::add(loss, ad::scale(usum, 1.0 / static_cast<double>(
                                             unlabeled.size())));
  }
  out.loss = loss;
  out.loss_value = loss.scalar();
  return out;
}

}  // namespace rebo
