// Run configuration: a flat key = value text file plus command-line
// overrides. Every key has a default; unknown keys are rejected so typos
// fail loudly instead of silently training with defaults.
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebo/datagen.hpp"
#include "rebo/training.hpp"

namespace rebo {

struct RunConfig {
  // Dataset
  std::size_t classes = 8;
  std::size_t points = 256;
  std::size_t count_labeled = 40;
  std::size_t count_unlabeled = 400;
  std::size_t count_weak = 200;
  std::size_t count_strong = 200;
  std::size_t count_box = 0;
  std::uint64_t data_seed = 1;

  // Training
  double alpha = 0.01;
  double meta_rate = 1e-3;
  double beta = 0.5;
  double gamma = 0.1;
  double eta = 0.01;
  double delta = 0.01;
  double fixmatch_threshold = 0.95;
  long warmup_epochs = 30;
  long epochs = 150;
  std::size_t batch_labeled = 8;
  std::size_t batch_unlabeled = 16;
  std::size_t batch_validation = 8;
  long iters_per_epoch = 0;
  std::uint64_t seed = 1;
  std::string temporal_reg = "matr";
  long entropy_break1 = 50;
  long entropy_break2 = 100;
  bool entropy_continuous = false;
  long eval_interval = 10;
  long snapshot_interval = 10;
  long checkpoint_interval = 0;  // main epochs between checkpoints; 0: final only
  double weak_rotation = std::numbers::pi / 18.0;
  double weak_jitter = 0.005;
  double weak_dropout = 0.0;
  double strong_rotation = std::numbers::pi / 2.0;
  double strong_jitter = 0.02;
  double strong_dropout = 0.2;
  double warmup_predictor_rate = 0.01;
  long warmup_predictor_steps = 60;
  long warmup_consolidation_steps = 6000;
  std::size_t warmup_predictor_batch = 60;
  std::size_t warmup_unlabeled_cap = 0;
  double warmup_weight_floor = 0.05;
  double warmup_weight_ceiling = 0.97;
  bool meta_enabled = true;
  double frozen_weight = -1.0;
  std::string unlabeled_cohorts = "UWS";
  double unlabeled_fraction = 1.0;

  // Model: full encoder widths; hidden widths for the two heads (input
  // and output widths are implied by the encoder and class count).
  std::vector<std::size_t> encoder_widths{3, 32, 64, 64};
  std::vector<std::size_t> classifier_hidden{32};
  std::vector<std::size_t> predictor_hidden{32, 16};

  // Output
  std::string output_dir = "out";

  DatasetSpec dataset_spec() const {
    DatasetSpec spec;
    spec.classes = classes;
    spec.points = points;
    spec.count_labeled = count_labeled;
    spec.count_unlabeled = count_unlabeled;
    spec.count_weak = count_weak;
    spec.count_strong = count_strong;
    spec.count_box = count_box;
    spec.seed = data_seed;
    return spec;
  }

  ModelConfig model_config() const {
    ModelConfig model;
    model.encoder_widths = encoder_widths;
    model.classifier_widths.clear();
    model.classifier_widths.push_back(encoder_widths.back());
    for (std::size_t w : classifier_hidden)
      model.classifier_widths.push_back(w);
    model.classifier_widths.push_back(classes);
    model.predictor_widths.clear();
    model.predictor_widths.push_back(encoder_widths.back());
    for (std::size_t w : predictor_hidden) model.predictor_widths.push_back(w);
    model.predictor_widths.push_back(1);
    return model;
  }

  TrainConfig train_config() const {
    TrainConfig cfg;
    cfg.alpha = alpha;
    cfg.meta_rate = meta_rate;
    cfg.beta = beta;
    cfg.gamma = gamma;
    cfg.eta = eta;
    cfg.delta = delta;
    cfg.fixmatch_threshold = fixmatch_threshold;
    cfg.warmup_epochs = warmup_epochs;
    cfg.epochs = epochs;
    cfg.batch_labeled = batch_labeled;
    cfg.batch_unlabeled = batch_unlabeled;
    cfg.batch_validation = batch_validation;
    cfg.iters_per_epoch = iters_per_epoch;
    cfg.seed = seed;
    cfg.temporal = temporal_reg_from_string(temporal_reg);
    cfg.entropy_break1 = entropy_break1;
    cfg.entropy_break2 = entropy_break2;
    cfg.entropy_continuous = entropy_continuous;
    cfg.eval_interval = eval_interval;
    cfg.snapshot_interval = snapshot_interval;
    cfg.checkpoint_interval = checkpoint_interval;
    cfg.weak_augment = AugmentSpec{weak_rotation, weak_jitter, weak_dropout};
    cfg.strong_augment =
        AugmentSpec{strong_rotation, strong_jitter, strong_dropout};
    cfg.warmup_predictor_rate = warmup_predictor_rate;
    cfg.warmup_predictor_steps = warmup_predictor_steps;
    cfg.warmup_consolidation_steps = warmup_consolidation_steps;
    cfg.warmup_predictor_batch = warmup_predictor_batch;
    cfg.warmup_unlabeled_cap = warmup_unlabeled_cap;
    cfg.warmup_weight_floor = warmup_weight_floor;
    cfg.warmup_weight_ceiling = warmup_weight_ceiling;
    cfg.meta_enabled = meta_enabled;
    cfg.frozen_weight = frozen_weight;
    cfg.unlabeled_cohorts = unlabeled_cohorts;
    cfg.unlabeled_fraction = unlabeled_fraction;
    cfg.model = model_config();
    cfg.validate();
    return cfg;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  if (out.empty()) {
    throw std::invalid_argument("config: empty width list '" + s + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("config: expected a boolean, got '" + s + "'");
}

}  // namespace detail

// Applies one `key = value` assignment; throws on unknown keys or
// malformed values.
inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& value) {
  using Setter = std::function<void(RunConfig&, const std::string&)>;
  static const std::map<std::string, Setter> setters = {
      {"classes", [](RunConfig& c, const std::string& v) { c.classes = std::stoull(v); }},
      {"points", [](RunConfig& c, const std::string& v) { c.points = std::stoull(v); }},
      {"count_labeled", [](RunConfig& c, const std::string& v) { c.count_labeled = std::stoull(v); }},
      {"count_unlabeled", [](RunConfig& c, const std::string& v) { c.count_unlabeled = std::stoull(v); }},
      {"count_weak", [](RunConfig& c, const std::string& v) { c.count_weak = std::stoull(v); }},
      {"count_strong", [](RunConfig& c, const std::string& v) { c.count_strong = std::stoull(v); }},
      {"count_box", [](RunConfig& c, const std::string& v) { c.count_box = std::stoull(v); }},
      {"data_seed", [](RunConfig& c, const std::string& v) { c.data_seed = std::stoull(v); }},
      {"alpha", [](RunConfig& c, const std::string& v) { c.alpha = std::stod(v); }},
      {"meta_rate", [](RunConfig& c, const std::string& v) { c.meta_rate = std::stod(v); }},
      {"beta", [](RunConfig& c, const std::string& v) { c.beta = std::stod(v); }},
      {"gamma", [](RunConfig& c, const std::string& v) { c.gamma = std::stod(v); }},
      {"eta", [](RunConfig& c, const std::string& v) { c.eta = std::stod(v); }},
      {"delta", [](RunConfig& c, const std::string& v) { c.delta = std::stod(v); }},
      {"fixmatch_threshold", [](RunConfig& c, const std::string& v) { c.fixmatch_threshold = std::stod(v); }},
      {"warmup_epochs", [](RunConfig& c, const std::string& v) { c.warmup_epochs = std::stol(v); }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = std::stol(v); }},
      {"batch_labeled", [](RunConfig& c, const std::string& v) { c.batch_labeled = std::stoull(v); }},
      {"batch_unlabeled", [](RunConfig& c, const std::string& v) { c.batch_unlabeled = std::stoull(v); }},
      {"batch_validation", [](RunConfig& c, const std::string& v) { c.batch_validation = std::stoull(v); }},
      {"iters_per_epoch", [](RunConfig& c, const std::string& v) { c.iters_per_epoch = std::stol(v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); }},
      {"temporal_reg", [](RunConfig& c, const std::string& v) { c.temporal_reg = v; }},
      {"entropy_break1", [](RunConfig& c, const std::string& v) { c.entropy_break1 = std::stol(v); }},
      {"entropy_break2", [](RunConfig& c, const std::string& v) { c.entropy_break2 = std::stol(v); }},
      {"entropy_continuous", [](RunConfig& c, const std::string& v) { c.entropy_continuous = detail::parse_bool(v); }},
      {"eval_interval", [](RunConfig& c, const std::string& v) { c.eval_interval = std::stol(v); }},
      {"snapshot_interval", [](RunConfig& c, const std::string& v) { c.snapshot_interval = std::stol(v); }},
      {"checkpoint_interval", [](RunConfig& c, const std::string& v) { c.checkpoint_interval = std::stol(v); }},
      {"weak_rotation", [](RunConfig& c, const std::string& v) { c.weak_rotation = std::stod(v); }},
      {"weak_jitter", [](RunConfig& c, const std::string& v) { c.weak_jitter = std::stod(v); }},
      {"weak_dropout", [](RunConfig& c, const std::string& v) { c.weak_dropout = std::stod(v); }},
      {"strong_rotation", [](RunConfig& c, const std::string& v) { c.strong_rotation = std::stod(v); }},
      {"strong_jitter", [](RunConfig& c, const std::string& v) { c.strong_jitter = std::stod(v); }},
      {"strong_dropout", [](RunConfig& c, const std::string& v) { c.strong_dropout = std::stod(v); }},
      {"warmup_predictor_rate", [](RunConfig& c, const std::string& v) { c.warmup_predictor_rate = std::stod(v); }},
      {"warmup_predictor_steps", [](RunConfig& c, const std::string& v) { c.warmup_predictor_steps = std::stol(v); }},
      {"warmup_consolidation_steps", [](RunConfig& c, const std::string& v) { c.warmup_consolidation_steps = std::stol(v); }},
      {"warmup_predictor_batch", [](RunConfig& c, const std::string& v) { c.warmup_predictor_batch = std::stoull(v); }},
      {"warmup_weight_floor", [](RunConfig& c, const std::string& v) { c.warmup_weight_floor = std::stod(v); }},
      {"warmup_weight_ceiling", [](RunConfig& c, const std::string& v) { c.warmup_weight_ceiling = std::stod(v); }},
      {"warmup_unlabeled_cap", [](RunConfig& c, const std::string& v) { c.warmup_unlabeled_cap = std::stoull(v); }},
      {"meta_enabled", [](RunConfig& c, const std::string& v) { c.meta_enabled = detail::parse_bool(v); }},
      {"frozen_weight", [](RunConfig& c, const std::string& v) { c.frozen_weight = std::stod(v); }},
      {"unlabeled_cohorts", [](RunConfig& c, const std::string& v) { c.unlabeled_cohorts = v; }},
      {"unlabeled_fraction", [](RunConfig& c, const std::string& v) { c.unlabeled_fraction = std::stod(v); }},
      {"encoder_widths", [](RunConfig& c, const std::string& v) { c.encoder_widths = detail::parse_size_list(v); }},
      {"classifier_hidden", [](RunConfig& c, const std::string& v) { c.classifier_hidden = detail::parse_size_list(v); }},
      {"predictor_hidden", [](RunConfig& c, const std::string& v) { c.predictor_hidden = detail::parse_size_list(v); }},
      {"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  try {
    it->second(cfg, value);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value '" + value + "' for key '" +
                                key + "'");
  }
}

inline void apply_config_line(RunConfig& cfg, const std::string& raw) {
  std::string line = detail::trim(raw);
  if (line.empty() || line[0] == '#') return;
  const auto eq = line.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("config: expected 'key = value', got '" +
                                line + "'");
  }
  apply_config_entry(cfg, detail::trim(line.substr(0, eq)),
                     detail::trim(line.substr(eq + 1)));
}

inline RunConfig load_config(std::istream& is) {
  RunConfig cfg;
  std::string line;
  while (std::getline(is, line)) apply_config_line(cfg, line);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open " + path);
  return load_config(is);
}

inline void apply_overrides(RunConfig& cfg,
                            const std::vector<std::string>& overrides) {
  for (const std::string& entry : overrides) apply_config_line(cfg, entry);
}

}  // namespace rebo
