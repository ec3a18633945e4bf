// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape owns the computation graph; nodes are appended in evaluation
// order, which is already a topological order, so the backward sweep is a
// single reverse pass. Gradients accumulate additively, one contribution
// per consumer. Everything is sequential and allocation-order
// deterministic: identical inputs give bit-identical values and gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebo/param_set.hpp"
#include "rebo/tensor.hpp"

namespace rebo::ad {

constexpr double kLogFloor = 1e-12;  // log(x) evaluated as log(max(x, floor))

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  double scalar() const { return value().value(); }
};

using VarMap = std::map<std::string, Var>;

class Tape {
 public:
  Var leaf(Tensor value, const std::string& name) {
    if (leaf_ids_.count(name)) {
      throw std::invalid_argument("Tape::leaf: duplicate leaf '" + name + "'");
    }
    int id = push(std::move(value));
    nodes_[id].leaf = true;
    leaf_ids_.emplace(name, id);
    return Var{this, id};
  }

  VarMap leaves(const ParamSet& params) {
    VarMap out;
    for (const auto& [name, t] : params) out.emplace(name, leaf(t, name));
    return out;
  }

  Var constant(Tensor value) { return Var{this, push(std::move(value))}; }

  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& grad(int id) const { return nodes_[id].grad; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  // Appends an interior node. `backward` receives the node's own gradient
  // and must accumulate into its parents via add_grad.
  Var emit(Tensor value, std::vector<int> parents,
           std::function<void(Tape&, int)> backward) {
    int id = push(std::move(value));
    nodes_[id].parents = std::move(parents);
    nodes_[id].backward = std::move(backward);
    return Var{this, id};
  }

  void add_grad(int id, const Tensor& g) {
    Tensor& dst = nodes_[id].grad;
    double* d = dst.data();
    const double* s = g.data();
    for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
  }

  // Reverse sweep from a scalar loss node.
  void backward(Var loss) {
    if (loss.tape != this) {
      throw std::invalid_argument("Tape::backward: node from another tape");
    }
    const Tensor& lv = nodes_[loss.id].value;
    if (lv.numel() != 1) {
      throw std::invalid_argument(
          "Tape::backward: loss must be scalar, got shape " +
          shape_to_string(lv.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = Tensor::zeros(n.value.shape());
    }
    nodes_[loss.id].grad = Tensor::full(lv.shape(), 1.0);
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (n.backward) n.backward(*this, id);
    }
    swept_ = true;
  }

  // Gradient for every leaf; leaves unreachable from the loss report
  // explicit zeros (their grad buffers were zero-initialized by backward).
  ParamSet leaf_gradients() const {
    if (!swept_) {
      throw std::logic_error("Tape::leaf_gradients: backward not run");
    }
    ParamSet out;
    for (const auto& [name, id] : leaf_ids_) out.insert(name, nodes_[id].grad);
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;
    bool leaf = false;
  };

  int push(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> leaf_ids_;
  bool swept_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) +
                                ": operands live on different tapes");
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.value().shape()) + " vs " +
                                shape_to_string(b.value().shape()));
  }
}

}  // namespace detail

// ---- element-wise binary ----

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape->emit(std::move(out), {a.id, b.id},
                      [a = a.id, b = b.id](Tape& t, int self) {
                        t.add_grad(a, t.grad(self));
                        t.add_grad(b, t.grad(self));
                      });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.tape->emit(std::move(out), {a.id, b.id},
                      [a = a.id, b = b.id](Tape& t, int self) {
                        t.add_grad(a, t.grad(self));
                        const Tensor& g = t.grad(self);
                        Tensor neg = g;
                        for (double& v : neg.vec()) v = -v;
                        t.add_grad(b, neg);
                      });
}

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape->emit(std::move(out), {a.id, b.id},
                      [a = a.id, b = b.id](Tape& t, int self) {
                        const Tensor& g = t.grad(self);
                        Tensor ga = g;
                        Tensor gb = g;
                        const double* av = t.value(a).data();
                        const double* bw = t.value(b).data();
                        for (std::size_t i = 0; i < g.numel(); ++i) {
                          ga[i] *= bw[i];
                          gb[i] *= av[i];
                        }
                        t.add_grad(a, ga);
                        t.add_grad(b, gb);
                      });
}

// ---- matrix multiply, [r,k] x [k,c] -> [r,c] ----

namespace detail {

// C += A * B, fixed kernels; kept branch-free inner loops for speed.
inline void gemm_nn(const Tensor& A, const Tensor& B, Tensor& C) {
  const std::size_t R = A.dim(0), K = A.dim(1), Cc = B.dim(1);
  for (std::size_t i = 0; i < R; ++i) {
    const double* a = A.data() + i * K;
    double* c = C.data() + i * Cc;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      const double* b = B.data() + k * Cc;
      for (std::size_t j = 0; j < Cc; ++j) c[j] += av * b[j];
    }
  }
}

// C += A^T * B with A [k,r], B [k,c] -> C [r,c]
inline void gemm_tn(const Tensor& A, const Tensor& B, Tensor& C) {
  const std::size_t K = A.dim(0), R = A.dim(1), Cc = B.dim(1);
  for (std::size_t k = 0; k < K; ++k) {
    const double* a = A.data() + k * R;
    const double* b = B.data() + k * Cc;
    for (std::size_t i = 0; i < R; ++i) {
      const double av = a[i];
      double* c = C.data() + i * Cc;
      for (std::size_t j = 0; j < Cc; ++j) c[j] += av * b[j];
    }
  }
}

// C += A * B^T with A [r,k], B [c,k] -> C [r,c]
inline void gemm_nt(const Tensor& A, const Tensor& B, Tensor& C) {
  const std::size_t R = A.dim(0), K = A.dim(1), Cc = B.dim(0);
  for (std::size_t i = 0; i < R; ++i) {
    const double* a = A.data() + i * K;
    double* c = C.data() + i * Cc;
    for (std::size_t j = 0; j < Cc; ++j) {
      const double* b = B.data() + j * K;
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_to_string(A.shape()) + " vs " +
                                shape_to_string(B.shape()));
  }
  Tensor out = Tensor::zeros({A.dim(0), B.dim(1)});
  detail::gemm_nn(A, B, out);
  return a.tape->emit(std::move(out), {a.id, b.id},
                      [a = a.id, b = b.id](Tape& t, int self) {
                        const Tensor& g = t.grad(self);
                        Tensor ga = Tensor::zeros(t.value(a).shape());
                        Tensor gb = Tensor::zeros(t.value(b).shape());
                        detail::gemm_nt(g, t.value(b), ga);  // dA = g B^T
                        detail::gemm_tn(t.value(a), g, gb);  // dB = A^T g
                        t.add_grad(a, ga);
                        t.add_grad(b, gb);
                      });
}

// [r,c] plus a length-c bias broadcast over rows.
inline Var add_bias(Var m, Var bias) {
  detail::require_same_tape(m, bias, "add_bias");
  const Tensor& M = m.value();
  const Tensor& B = bias.value();
  if (M.rank() != 2 || B.numel() != M.dim(1)) {
    throw std::invalid_argument("add_bias: shape mismatch " +
                                shape_to_string(M.shape()) + " vs " +
                                shape_to_string(B.shape()));
  }
  Tensor out = M;
  const std::size_t R = M.dim(0), C = M.dim(1);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] += B[j];
  return m.tape->emit(std::move(out), {m.id, bias.id},
                      [m = m.id, b = bias.id](Tape& t, int self) {
                        const Tensor& g = t.grad(self);
                        t.add_grad(m, g);
                        const std::size_t R = g.dim(0), C = g.dim(1);
                        Tensor gb = Tensor::zeros(t.value(b).shape());
                        for (std::size_t i = 0; i < R; ++i)
                          for (std::size_t j = 0; j < C; ++j)
                            gb[j] += g[i * C + j];
                        t.add_grad(b, gb);
                      });
}

// ---- element-wise unary ----

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return a.tape->emit(std::move(out), {a.id}, [a = a.id](Tape& t, int self) {
    Tensor g = t.grad(self);
    const Tensor& x = t.value(a);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] <= 0.0) g[i] = 0.0;
    t.add_grad(a, g);
  });
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
  return a.tape->emit(std::move(out), {a.id}, [a = a.id](Tape& t, int self) {
    Tensor g = t.grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= y[i] * (1.0 - y[i]);
    t.add_grad(a, g);
  });
}

// Natural log with the project-wide floor so weight-saturation keeps the
// regularizer losses finite. Gradient uses the clamped argument.
inline Var log_clamped(Var a) {
  Tensor out = a.value();
  for (double& v : out.vec()) v = std::log(std::max(v, kLogFloor));
  return a.tape->emit(std::move(out), {a.id}, [a = a.id](Tape& t, int self) {
    Tensor g = t.grad(self);
    const Tensor& x = t.value(a);
    for (std::size_t i = 0; i < g.numel(); ++i)
      g[i] /= std::max(x[i], kLogFloor);
    t.add_grad(a, g);
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.vec()) v = std::exp(v);
  return a.tape->emit(std::move(out), {a.id}, [a = a.id](Tape& t, int self) {
    Tensor g = t.grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= y[i];
    t.add_grad(a, g);
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.vec()) v *= c;
  return a.tape->emit(std::move(out), {a.id},
                      [a = a.id, c](Tape& t, int self) {
                        Tensor g = t.grad(self);
                        for (double& v : g.vec()) v *= c;
                        t.add_grad(a, g);
                      });
}

// Reshape a single-element tensor to canonical scalar shape [1].
inline Var as_scalar(Var a) {
  if (a.value().numel() != 1) {
    throw std::invalid_argument("as_scalar: tensor " +
                                shape_to_string(a.value().shape()) +
                                " has more than one element");
  }
  return a.tape->emit(Tensor::scalar(a.value()[0]), {a.id},
                      [a = a.id](Tape& t, int self) {
                        Tensor g(t.value(a).shape(), {t.grad(self)[0]});
                        t.add_grad(a, g);
                      });
}

// ---- reductions ----

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().vec()) s += v;
  return a.tape->emit(Tensor::scalar(s), {a.id},
                      [a = a.id](Tape& t, int self) {
                        const double g = t.grad(self)[0];
                        Tensor ga = Tensor::full(t.value(a).shape(), g);
                        t.add_grad(a, ga);
                      });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().numel();
  double s = 0.0;
  for (double v : a.value().vec()) s += v;
  return a.tape->emit(Tensor::scalar(s / static_cast<double>(n)), {a.id},
                      [a = a.id, n](Tape& t, int self) {
                        const double g =
                            t.grad(self)[0] / static_cast<double>(n);
                        t.add_grad(a, Tensor::full(t.value(a).shape(), g));
                      });
}

// Max over one axis of a 2-D tensor. axis 0 pools rows into [1,c] (the
// point-cloud global max-pool); axis 1 gives [r,1]. Ties route the
// gradient to the first maximal element, scanned in index order.
inline Var max_axis(Var a, int axis) {
  const Tensor& A = a.value();
  if (A.rank() != 2 || (axis != 0 && axis != 1)) {
    throw std::invalid_argument("max_axis: need 2-D tensor and axis 0|1, got " +
                                shape_to_string(A.shape()));
  }
  const std::size_t R = A.dim(0), C = A.dim(1);
  if (axis == 0) {
    Tensor out({1, C});
    std::vector<std::size_t> argmax(C, 0);
    for (std::size_t j = 0; j < C; ++j) {
      double best = A.at(0, j);
      std::size_t bi = 0;
      for (std::size_t i = 1; i < R; ++i) {
        if (A.at(i, j) > best) {
          best = A.at(i, j);
          bi = i;
        }
      }
      out[j] = best;
      argmax[j] = bi;
    }
    return a.tape->emit(std::move(out), {a.id},
                        [a = a.id, argmax](Tape& t, int self) {
                          const Tensor& g = t.grad(self);
                          Tensor ga = Tensor::zeros(t.value(a).shape());
                          const std::size_t C = g.numel();
                          for (std::size_t j = 0; j < C; ++j)
                            ga.at(argmax[j], j) = g[j];
                          t.add_grad(a, ga);
                        });
  }
  Tensor out({R, 1});
  std::vector<std::size_t> argmax(R, 0);
  for (std::size_t i = 0; i < R; ++i) {
    double best = A.at(i, 0);
    std::size_t bj = 0;
    for (std::size_t j = 1; j < C; ++j) {
      if (A.at(i, j) > best) {
        best = A.at(i, j);
        bj = j;
      }
    }
    out[i] = best;
    argmax[i] = bj;
  }
  return a.tape->emit(std::move(out), {a.id},
                      [a = a.id, argmax](Tape& t, int self) {
                        const Tensor& g = t.grad(self);
                        Tensor ga = Tensor::zeros(t.value(a).shape());
                        const std::size_t R = g.numel();
                        for (std::size_t i = 0; i < R; ++i)
                          ga.at(i, argmax[i]) = g[i];
                        t.add_grad(a, ga);
                      });
}

// ---- fused heads ----

// Cross-entropy of softmax(logits) against a class index; logits may be
// [C] or [1,C]. Numerically stable log-sum-exp form.
inline Var softmax_cross_entropy(Var logits, std::size_t target) {
  const Tensor& L = logits.value();
  const std::size_t C = L.numel();
  if (target >= C) {
    throw std::invalid_argument(
        "softmax_cross_entropy: target " + std::to_string(target) +
        " out of range for " + shape_to_string(L.shape()));
  }
  double m = L[0];
  for (std::size_t i = 1; i < C; ++i) m = std::max(m, L[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < C; ++i) z += std::exp(L[i] - m);
  const double lse = m + std::log(z);
  return logits.tape->emit(
      Tensor::scalar(lse - L[target]), {logits.id},
      [l = logits.id, target, m, z](Tape& t, int self) {
        const double g = t.grad(self)[0];
        const Tensor& L = t.value(l);
        Tensor gl = Tensor::zeros(L.shape());
        for (std::size_t i = 0; i < gl.numel(); ++i) {
          const double p = std::exp(L[i] - m) / z;
          gl[i] = g * (p - (i == target ? 1.0 : 0.0));
        }
        t.add_grad(l, gl);
      });
}

// Per-row standardization: each row mapped to zero mean, unit variance
// (population variance, epsilon-stabilized). The project's stand-in for
// batch normalization: desk-scale batches would couple samples, so each
// feature vector is normalized against itself. Swappable in one place.
inline Var standardize_rows(Var a, double eps = 1e-8) {
  const Tensor& A = a.value();
  if (A.rank() != 2) {
    throw std::invalid_argument("standardize_rows: need 2-D tensor, got " +
                                shape_to_string(A.shape()));
  }
  const std::size_t R = A.dim(0), C = A.dim(1);
  Tensor out(A.shape());
  std::vector<double> means(R), istds(R);
  for (std::size_t i = 0; i < R; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < C; ++j) mu += A.at(i, j);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      const double d = A.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double istd = 1.0 / std::sqrt(var + eps);
    means[i] = mu;
    istds[i] = istd;
    for (std::size_t j = 0; j < C; ++j) out.at(i, j) = (A.at(i, j) - mu) * istd;
  }
  return a.tape->emit(
      std::move(out), {a.id},
      [a = a.id, means, istds](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);  // standardized values
        const std::size_t R = g.dim(0), C = g.dim(1);
        Tensor ga = Tensor::zeros(t.value(a).shape());
        const double cn = static_cast<double>(C);
        for (std::size_t i = 0; i < R; ++i) {
          double gsum = 0.0, gysum = 0.0;
          for (std::size_t j = 0; j < C; ++j) {
            gsum += g.at(i, j);
            gysum += g.at(i, j) * y.at(i, j);
          }
          for (std::size_t j = 0; j < C; ++j) {
            ga.at(i, j) = istds[i] * (g.at(i, j) - gsum / cn -
                                      y.at(i, j) * gysum / cn);
          }
        }
        t.add_grad(a, ga);
      });
}

}  // namespace rebo::ad
