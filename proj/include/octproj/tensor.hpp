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

#include "octproj/errors.hpp"

namespace octproj {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

// Dense row-major n-d array. Volumes are [slice, row, column]; projection
// maps are [slice, column], so one PM line is one contiguous row.
//
// A default-constructed tensor is an empty placeholder (ndim 0). Every other
// constructor enforces extents >= 1 and finite payload.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape dims, T fill = T{0}) : dims_(std::move(dims)) {
    check_dims(dims_);
    data_.assign(shape_numel(dims_), fill);
    check_finite();
  }

  BasicTensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims(dims_);
    if (shape_numel(dims_) != data_.size()) {
      throw ShapeError("tensor payload has " + std::to_string(data_.size()) + " values, dims " +
                       shape_str(dims_) + " need " + std::to_string(shape_numel(dims_)));
    }
    check_finite();
  }

  BasicTensor(std::initializer_list<std::size_t> dims, std::initializer_list<T> values)
      : BasicTensor(Shape(dims), std::vector<T>(values)) {}

  template <typename U>
  static BasicTensor cast(const BasicTensor<U>& other) {
    BasicTensor out;
    out.dims_ = other.dims();
    out.data_.resize(other.size());
    std::transform(other.data().begin(), other.data().end(), out.data_.begin(),
                   [](U v) { return static_cast<T>(v); });
    return out;
  }

  bool empty() const { return dims_.empty(); }
  const Shape& dims() const { return dims_; }
  std::size_t ndim() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  // Contiguous block for index i along axis 0.
  std::span<const T> slab(std::size_t i) const {
    const std::size_t n = data_.size() / dims_[0];
    return std::span<const T>(data_).subspan(i * n, n);
  }
  std::span<T> slab(std::size_t i) {
    const std::size_t n = data_.size() / dims_[0];
    return std::span<T>(data_).subspan(i * n, n);
  }

  // Copy of the axis-0 sub-tensor i (drops the leading axis).
  BasicTensor sub(std::size_t i) const {
    if (ndim() < 2) throw ShapeError("sub() needs ndim >= 2, got " + shape_str(dims_));
    if (i >= dims_[0]) throw ShapeError("sub() index out of range");
    auto s = slab(i);
    return BasicTensor(Shape(dims_.begin() + 1, dims_.end()), std::vector<T>(s.begin(), s.end()));
  }

  BasicTensor reshaped(Shape dims) const {
    BasicTensor out(std::move(dims), data_);
    return out;
  }

  bool operator==(const BasicTensor& o) const { return dims_ == o.dims_ && data_ == o.data_; }

 private:
  template <typename U>
  friend class BasicTensor;

  static void check_dims(const Shape& dims) {
    if (dims.empty()) throw ShapeError("tensor needs at least one dimension");
    for (auto d : dims) {
      if (d == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(dims));
    }
  }

  void check_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError("non-finite value in tensor " + shape_str(dims_));
      }
    }
  }

  Shape dims_;
  std::vector<T> data_;
};

// Storage tensor (files, volumes, projection maps).
using Tensor = BasicTensor<float>;
// Working precision of the differentiation tape and the metrics.
using Tensor64 = BasicTensor<double>;

inline Tensor64 to_f64(const Tensor& t) { return Tensor64::cast(t); }
inline Tensor to_f32(const Tensor64& t) { return Tensor::cast(t); }

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) throw ShapeError("max_abs_diff: dims " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
double mean_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) throw ShapeError("mean_abs_diff: dims " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return s / double(a.size());
}

}  // namespace octproj
