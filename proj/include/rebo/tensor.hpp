// Dense row-major tensor of 64-bit reals. The only element type the
// project uses: hypergradient finite differences are noise-sensitive and
// need full double precision end to end.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rebo {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " +
                                  shape_to_string(shape_));
    }
  }

  // Entry point for data coming from outside the process (files, user
  // input). Rejects NaN/Inf; internal arithmetic does not re-validate.
  static Tensor checked(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    for (double v : t.data_) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("Tensor: non-finite entry " +
                                    std::to_string(v) + " in external data");
      }
    }
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors; rows*cols layout checked by the caller's op.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  bool is_scalar() const { return numel() == 1; }
  double value() const {
    if (!is_scalar()) {
      throw std::logic_error("Tensor::value: tensor " +
                             shape_to_string(shape_) + " is not scalar");
    }
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double l2_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace rebo
