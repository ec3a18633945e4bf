// Task network (shared per-point MLP encoder + classifier head) and the
// weight predictor. The encoder is PointNet-flavored: a per-point MLP
// whose outputs are max-pooled into one global feature, which is all the
// weighting machinery needs from a backbone.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebo/param_set.hpp"
#include "rebo/rng.hpp"
#include "rebo/tape.hpp"

namespace rebo {

struct ModelConfig {
  std::vector<std::size_t> encoder_widths{3, 32, 64, 64};
  std::vector<std::size_t> classifier_widths{64, 32, 8};  // feature -> C
  std::vector<std::size_t> predictor_widths{64, 32, 16, 1};
  std::size_t class_count() const { return classifier_widths.back(); }
  std::size_t feature_dim() const { return encoder_widths.back(); }
};

inline std::string layer_name(const std::string& prefix, std::size_t layer,
                              char kind) {
  return prefix + "." + kind + std::to_string(layer);
}

// Glorot-uniform weights, zero biases, deterministic in the seed.
inline ParamSet init_mlp(std::uint64_t seed,
                         const std::vector<std::size_t>& widths,
                         const std::string& prefix) {
  if (widths.size() < 2) {
    throw std::invalid_argument("init_mlp: need at least two widths");
  }
  for (std::size_t w : widths) {
    if (w == 0) throw std::invalid_argument("init_mlp: zero-width layer");
  }
  ParamSet out;
  Rng rng = Rng(seed).derive(prefix);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w({fan_in, fan_out});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-s, s);
    out.insert(layer_name(prefix, l, 'w'), std::move(w));
    out.insert(layer_name(prefix, l, 'b'), Tensor::zeros({fan_out}));
  }
  return out;
}

inline ParamSet init_task_params(std::uint64_t seed, const ModelConfig& cfg) {
  ParamSet p = init_mlp(seed, cfg.encoder_widths, "enc");
  for (auto& [name, t] : init_mlp(seed, cfg.classifier_widths, "cls")) {
    p.insert(name, t);
  }
  return p;
}

inline ParamSet init_predictor_params(std::uint64_t seed,
                                      const ModelConfig& cfg) {
  return init_mlp(seed, cfg.predictor_widths, "prd");
}

// Per-point MLP with relu after every layer, then a max-pool over points.
// Returns the [1,F] global feature. Exactly permutation-invariant: max is
// order-independent over identical values.
inline ad::Var encode_global(ad::Tape& tape, const ad::VarMap& theta,
                             const Tensor& cloud, const ModelConfig& cfg) {
  if (cloud.rank() != 2 || cloud.dim(1) != 3 || cloud.dim(0) == 0) {
    throw std::invalid_argument("encode_global: cloud must be [N,3], N>=1, got " +
                                shape_to_string(cloud.shape()));
  }
  ad::Var h = tape.constant(cloud);
  const std::size_t layers = cfg.encoder_widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::matmul(h, theta.at(layer_name("enc", l, 'w')));
    h = ad::add_bias(h, theta.at(layer_name("enc", l, 'b')));
    h = ad::relu(h);
  }
  return ad::max_axis(h, 0);
}

// Feature [1,F] -> logits [1,C]; relu between hidden layers, linear head.
inline ad::Var classify(ad::Tape& tape, const ad::VarMap& theta,
                        ad::Var feature, const ModelConfig& cfg) {
  if (feature.value().numel() != cfg.classifier_widths.front()) {
    throw std::invalid_argument(
        "classify: feature " + shape_to_string(feature.value().shape()) +
        " does not match classifier input width " +
        std::to_string(cfg.classifier_widths.front()));
  }
  (void)tape;
  ad::Var h = feature;
  const std::size_t layers = cfg.classifier_widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::matmul(h, theta.at(layer_name("cls", l, 'w')));
    h = ad::add_bias(h, theta.at(layer_name("cls", l, 'b')));
    if (l + 1 < layers) h = ad::relu(h);
  }
  return h;
}

// Weight predictor: linear -> standardize -> relu on hidden layers, final
// linear -> sigmoid. Output is a scalar strictly inside (0,1).
inline ad::Var predict_weight(ad::Tape& tape, const ad::VarMap& phi,
                              ad::Var feature, const ModelConfig& cfg) {
  if (feature.value().numel() != cfg.predictor_widths.front()) {
    throw std::invalid_argument(
        "predict_weight: feature " + shape_to_string(feature.value().shape()) +
        " does not match predictor input width " +
        std::to_string(cfg.predictor_widths.front()));
  }
  (void)tape;
  ad::Var h = feature;
  const std::size_t layers = cfg.predictor_widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::matmul(h, phi.at(layer_name("prd", l, 'w')));
    h = ad::add_bias(h, phi.at(layer_name("prd", l, 'b')));
    if (l + 1 < layers) {
      h = ad::standardize_rows(h);
      h = ad::relu(h);
    }
  }
  return ad::as_scalar(ad::sigmoid(h));
}

// ---- value-only conveniences (scratch tape, no backward) ----

inline Tensor encode_global_value(const ParamSet& theta, const Tensor& cloud,
                                  const ModelConfig& cfg) {
  ad::Tape tape;
  ad::VarMap vars = tape.leaves(theta);
  return encode_global(tape, vars, cloud, cfg).value();
}

inline Tensor classify_value(const ParamSet& theta, const Tensor& feature,
                             const ModelConfig& cfg) {
  ad::Tape tape;
  ad::VarMap vars = tape.leaves(theta);
  return classify(tape, vars, tape.constant(feature), cfg).value();
}

inline double predict_weight_value(const ParamSet& phi, const Tensor& feature,
                                   const ModelConfig& cfg) {
  ad::Tape tape;
  ad::VarMap vars = tape.leaves(phi);
  return predict_weight(tape, vars, tape.constant(feature), cfg).scalar();
}

// ---- checkpoint file: named tensors, shape header, little-endian f64 ----
//
// Layout: magic "RBPC", u32 version, u64 tensor count, then per tensor:
// u32 name length, name bytes, u32 rank, u64 dims..., f64 data (LE).

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t v;
  static_assert(sizeof(v) == sizeof(d));
  std::memcpy(&v, &d, 8);
  write_u64(os, v);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  std::uint64_t v = read_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace io

inline void save_params(std::ostream& os, const ParamSet& params) {
  os.write("RBPC", 4);
  io::write_u32(os, 1);
  io::write_u64(os, params.size());
  for (const auto& [name, t] : params) {
    io::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::write_u64(os, d);
    for (double v : t.vec()) io::write_f64(os, v);
  }
}

inline void save_params(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_params: cannot open " + path);
  save_params(os, params);
}

inline ParamSet load_params(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "RBPC") {
    throw std::runtime_error("load_params: bad magic");
  }
  const std::uint32_t version = io::read_u32(is);
  if (version != 1) {
    throw std::runtime_error("load_params: unsupported version " +
                             std::to_string(version));
  }
  const std::uint64_t count = io::read_u64(is);
  ParamSet out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint32_t len = io::read_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const std::uint32_t rank = io::read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = io::read_u64(is);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = io::read_f64(is);
    out.insert(name, Tensor::checked(std::move(shape), std::move(data)));
  }
  return out;
}

inline ParamSet load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_params: cannot open " + path);
  return load_params(is);
}

}  // namespace rebo
