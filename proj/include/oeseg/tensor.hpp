#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "oeseg/error.hpp"

namespace oeseg {

// Dense row-major tensor of 64-bit floats. Shapes have positive dimension
// sizes and data must be finite; both are checked at construction so no
// NaN/Inf ever enters a computation.
class Tensor {
 public:
  Tensor() : shape_{0} {}  // empty sentinel, only produced by this ctor

  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }

  // 2-D / 3-D accessors for readability in kernels.
  double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at3(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double& at3(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool bit_equal(const Tensor& other) const;

  std::string shape_str() const;

  static std::size_t shape_product(const std::vector<std::size_t>& shape);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace oeseg
