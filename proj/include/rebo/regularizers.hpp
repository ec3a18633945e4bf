// Meta-objective regularizers and the ledger of per-sample weights.
//
// Four terms stabilize the weight predictor against hypergradient noise:
//   - outlier-detection loss: sum over validation samples of -log lambda,
//     pulling clean in-distribution weights toward 1;
//   - DTR: squared distance of the current weights to the previous
//     iteration's weights;
//   - MATR: squared distance to an exponential moving average of past
//     weights (beta-rated), a stronger temporal smoother;
//   - binary-entropy loss pushing weights toward {0,1}, phased in by a
//     piecewise schedule so early training is unconstrained.
// Ledger targets are stored plain doubles: only the live lambda carries
// gradient, the history is a constant target.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "rebo/sample.hpp"
#include "rebo/tape.hpp"

namespace rebo {

struct LedgerEntry {
  double weight = 0.0;       // w_t: latest observed weight
  double moving_avg = 0.0;   // w~_t
  Cohort cohort = Cohort::U;
};

class WeightLedger {
 public:
  explicit WeightLedger(double beta = 0.5) : beta_(beta) {
    if (beta < 0.0 || beta >= 1.0) {
      throw std::invalid_argument("WeightLedger: beta must be in [0,1)");
    }
  }

  double beta() const { return beta_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(std::int64_t id) const { return entries_.count(id) != 0; }

  const LedgerEntry& at(std::int64_t id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) {
      throw std::out_of_range("WeightLedger: unknown sample id " +
                              std::to_string(id));
    }
    return it->second;
  }

  // Records w_t and folds it into the moving average:
  //   w~_t = beta * w~_{t-1} + (1 - beta) * w_t,
  // with w~ initialized to the first observed weight (no pull toward an
  // arbitrary constant). Unknown ids initialize rather than error.
  void observe(std::int64_t id, double weight, Cohort cohort = Cohort::U) {
    auto it = entries_.find(id);
    if (it == entries_.end()) {
      entries_.emplace(id, LedgerEntry{weight, weight, cohort});
      return;
    }
    it->second.weight = weight;
    it->second.moving_avg = beta_ * it->second.moving_avg +
                            (1.0 - beta_) * weight;
    it->second.cohort = cohort;
  }

  const std::map<std::int64_t, LedgerEntry>& entries() const {
    return entries_;
  }

  // Direct restore from a persisted snapshot; bypasses the mixing rule.
  void set_entry(std::int64_t id, const LedgerEntry& entry) {
    entries_[id] = entry;
  }

 private:
  double beta_;
  std::map<std::int64_t, LedgerEntry> entries_;
};

// ---- tape-level losses (analytic gradients w.r.t. the lambda vars) ----

// Sum over the validation batch of -log lambda. A one-class pull: the
// held-out set is in-distribution by construction, so its weights belong
// at 1.
inline ad::Var loss_od(ad::Tape& tape, const std::vector<ad::Var>& lambdas) {
  ad::Var total = tape.constant_scalar(0.0);
  for (ad::Var l : lambdas) {
    total = ad::sub(total, ad::log_clamped(l));
  }
  return total;
}

// || lambda_t - target ||^2 with the target held constant. Serves both
// DTR (target = previous weight) and MATR (target = moving average).
inline ad::Var loss_weight_distance(ad::Tape& tape,
                                    const std::vector<ad::Var>& lambdas,
                                    const std::vector<double>& targets) {
  if (lambdas.size() != targets.size()) {
    throw std::invalid_argument(
        "loss_weight_distance: length mismatch, " +
        std::to_string(lambdas.size()) + " weights vs " +
        std::to_string(targets.size()) + " targets");
  }
  ad::Var total = tape.constant_scalar(0.0);
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    ad::Var d = ad::sub(lambdas[i], tape.constant_scalar(targets[i]));
    total = ad::add(total, ad::mul(d, d));
  }
  return total;
}

inline ad::Var loss_dtr(ad::Tape& tape, const std::vector<ad::Var>& lambdas,
                        const std::vector<double>& previous_weights) {
  return loss_weight_distance(tape, lambdas, previous_weights);
}

inline ad::Var loss_matr(ad::Tape& tape, const std::vector<ad::Var>& lambdas,
                         const std::vector<double>& moving_averages) {
  return loss_weight_distance(tape, lambdas, moving_averages);
}

// Mean binary entropy -[l log l + (1-l) log(1-l)] over the batch. The
// printed form of the second term reads (1-l) log l, which is not an
// entropy and is unbounded below; the intent of forcing near-binary
// outputs requires the standard form, which is what this computes.
inline ad::Var loss_entropy(ad::Tape& tape,
                            const std::vector<ad::Var>& lambdas) {
  if (lambdas.empty()) return tape.constant_scalar(0.0);
  ad::Var total = tape.constant_scalar(0.0);
  ad::Var one = tape.constant_scalar(1.0);
  for (ad::Var l : lambdas) {
    ad::Var lc = ad::sub(one, l);
    ad::Var h = ad::add(ad::mul(l, ad::log_clamped(l)),
                        ad::mul(lc, ad::log_clamped(lc)));
    total = ad::sub(total, h);
  }
  return ad::scale(total, 1.0 / static_cast<double>(lambdas.size()));
}

// ---- value-level twins for exact arithmetic checks ----

inline double loss_dtr_value(const std::vector<double>& w,
                             const std::vector<double>& prev) {
  if (w.size() != prev.size()) {
    throw std::invalid_argument("loss_dtr: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i)
    s += (w[i] - prev[i]) * (w[i] - prev[i]);
  return s;
}

inline double loss_entropy_value(const std::vector<double>& w) {
  if (w.empty()) return 0.0;
  double s = 0.0;
  for (double l : w) {
    const double a = std::log(std::max(l, ad::kLogFloor));
    const double b = std::log(std::max(1.0 - l, ad::kLogFloor));
    s -= l * a + (1.0 - l) * b;
  }
  return s / static_cast<double>(w.size());
}

// ---- entropy-weight schedule ----

// Piecewise ramp, exactly as printed including the jump at the second
// breakpoint: 0 below 50, delta*(e-50)/100 on [50,100], delta above 100.
inline double entropy_weight(long epoch, double delta) {
  if (epoch < 0 || delta < 0.0) {
    throw std::invalid_argument("entropy_weight: epoch >= 0 and delta >= 0");
  }
  if (epoch < 50) return 0.0;
  if (epoch <= 100) return delta * static_cast<double>(epoch - 50) / 100.0;
  return delta;
}

// Config-driven variant. Default breakpoints reproduce entropy_weight; the
// continuous flag swaps the printed ramp for one that reaches delta at the
// second breakpoint with no jump.
inline double entropy_weight_scheduled(long epoch, double delta, long break1,
                                       long break2, bool continuous) {
  if (epoch < 0 || delta < 0.0 || break2 <= break1) {
    throw std::invalid_argument("entropy_weight_scheduled: bad arguments");
  }
  if (!continuous && break1 == 50 && break2 == 100) {
    return entropy_weight(epoch, delta);
  }
  if (epoch < break1) return 0.0;
  if (epoch > break2) return delta;
  const double span = static_cast<double>(break2 - break1);
  const double ramp = static_cast<double>(epoch - break1) / span;
  return continuous ? delta * ramp : delta * ramp * 0.5;
}

}  // namespace rebo
