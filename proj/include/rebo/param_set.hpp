// Named parameter collections. Used both for live parameters (task
// network, weight predictor) and for gradient maps returned by backward,
// so element-wise arithmetic between two structurally equal sets is the
// bread and butter of the update rules.
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include "rebo/tensor.hpp"

namespace rebo {

class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;  // sorted: deterministic order
  using iterator = Map::iterator;
  using const_iterator = Map::const_iterator;

  ParamSet() = default;

  void insert(const std::string& name, Tensor value) {
    auto [it, fresh] = entries_.emplace(name, std::move(value));
    if (!fresh) {
      throw std::invalid_argument("ParamSet: duplicate name '" + name + "'");
    }
  }

  bool contains(const std::string& name) const {
    return entries_.count(name) != 0;
  }

  const Tensor& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw std::out_of_range("ParamSet: unknown name '" + name + "'");
    }
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw std::out_of_range("ParamSet: unknown name '" + name + "'");
    }
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  iterator begin() { return entries_.begin(); }
  iterator end() { return entries_.end(); }
  const_iterator begin() const { return entries_.begin(); }
  const_iterator end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  bool same_structure(const ParamSet& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = o.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.shape() != b->second.shape())
        return false;
    }
    return true;
  }

  // this + scale * other, element-wise over matching names/shapes.
  ParamSet axpy(double scale, const ParamSet& other) const {
    require_same_structure(other, "axpy");
    ParamSet out = *this;
    auto a = out.entries_.begin();
    auto b = other.entries_.begin();
    for (; a != out.entries_.end(); ++a, ++b) {
      double* x = a->second.data();
      const double* y = b->second.data();
      for (std::size_t i = 0; i < a->second.numel(); ++i) x[i] += scale * y[i];
    }
    return out;
  }

  ParamSet scaled(double s) const {
    ParamSet out = *this;
    for (auto& [name, t] : out.entries_)
      for (double& v : t.vec()) v *= s;
    return out;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, t] : entries_)
      out.insert(name, Tensor::zeros(t.shape()));
    return out;
  }

  double l2_norm() const {
    double s = 0.0;
    for (const auto& [name, t] : entries_)
      for (double v : t.vec()) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const auto& [name, t] : entries_)
      if (!t.all_finite()) return false;
    return true;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(scalar_count());
    for (const auto& [name, t] : entries_)
      out.insert(out.end(), t.vec().begin(), t.vec().end());
    return out;
  }

  // Visits scalars in deterministic (name, offset) order.
  void for_each_scalar(const std::function<void(const std::string&,
                                                std::size_t, double&)>& fn) {
    for (auto& [name, t] : entries_)
      for (std::size_t i = 0; i < t.numel(); ++i) fn(name, i, t.vec()[i]);
  }

  bool operator==(const ParamSet& o) const { return entries_ == o.entries_; }

 private:
  void require_same_structure(const ParamSet& o, const char* op) const {
    if (!same_structure(o)) {
      throw std::invalid_argument(std::string("ParamSet::") + op +
                                  ": mismatched names or shapes");
    }
  }

  Map entries_;
};

}  // namespace rebo
