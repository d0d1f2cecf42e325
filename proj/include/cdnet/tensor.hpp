#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdnet/error.hpp"

namespace cdnet {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. A default-constructed tensor is "unset"
/// (rank 0, no storage); every constructed tensor has positive extents.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + cdnet::to_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double value) { return Tensor({1, 1}, value); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
  }

  bool empty() const noexcept { return data_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  /// Leading extent; 1 for an unset tensor.
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_.front(); }
  /// Product of the trailing extents.
  std::size_t cols() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + cdnet::to_string(shape_));
    return data_[0];
  }

  std::span<const double> row(std::size_t r) const { return std::span(data_).subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return std::span(data_).subspan(r * cols(), cols()); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  /// Copy of the given rows, in order.
  Tensor gather_rows(std::span<const std::size_t> indices) const {
    Shape shape = shape_;
    shape.at(0) = indices.size();
    std::vector<double> out;
    out.reserve(indices.size() * cols());
    for (std::size_t idx : indices) {
      if (idx >= rows()) throw ShapeError("row index " + std::to_string(idx) + " out of range");
      auto src = row(idx);
      out.insert(out.end(), src.begin(), src.end());
    }
    return Tensor(std::move(shape), std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + cdnet::to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace cdnet
