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

#include "packptq/error.hpp"

namespace packptq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major float64 array. Values only: gradients live on the tape.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + to_string(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("tensor: item() on shape " + to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  /// Rows [first, first+count) along axis 0.
  Tensor rows(std::size_t first, std::size_t count) const {
    if (rank() == 0 || first + count > shape_[0]) {
      throw ShapeError("rows: range out of bounds for shape " + to_string(shape_));
    }
    const std::size_t stride = data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = count;
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                                                    data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride)));
  }

  /// Gathers rows along axis 0.
  Tensor take_rows(std::span<const std::size_t> index) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    Shape s = shape_;
    s[0] = index.size();
    std::vector<double> out;
    out.reserve(index.size() * stride);
    for (std::size_t r : index) {
      if (r >= shape_[0]) throw ShapeError("take_rows: row index out of range");
      out.insert(out.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * stride),
                 data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
    }
    return Tensor(std::move(s), std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace packptq
