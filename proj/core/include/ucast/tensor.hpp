#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ucast {

using real = double;
using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

/// Dense row-major tensor of doubles. Plain value type; ops live in
/// autograd.hpp (differentiable) or on the free functions below.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<real> data);

  static Tensor full(Shape shape, real v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(real v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2D (rows, cols) accessors
  real& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  real at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  // 4D NCHW accessors
  real& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  real at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  void fill(real v);
  /// Same data, new shape (numel must match).
  Tensor reshaped(Shape shape) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<real> data_;
};

int64_t shape_numel(const Shape& s);
bool bitwise_equal(const Tensor& a, const Tensor& b);
real max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ucast
