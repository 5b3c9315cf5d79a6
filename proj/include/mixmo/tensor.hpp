#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mixmo {

using Shape = std::vector<std::size_t>;

/// Thrown when operand extents disagree. The message names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a forward or backward pass produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major N-dimensional array. Image batches use N,C,H,W order.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Contiguous slice of the leading dimension (one sample of a batch).
  std::span<T> slice(std::size_t n) {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(n * stride, stride);
  }
  std::span<const T> slice(std::size_t n) const {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(n * stride, stride);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const& {
    if (shape_numel(s) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) noexcept {
    for (auto& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Tensor& o, std::string_view what) const {
    if (shape_ != o.shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_str(shape_) + " vs " +
                       shape_str(o.shape_));
    }
  }

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Throws ShapeError unless t has the given rank; `what` names the operand.
template <std::floating_point T>
void require_rank(const Tensor<T>& t, std::size_t rank, std::string_view what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

template <std::floating_point T>
void require_finite(const Tensor<T>& t, std::string_view where) {
  if (!t.all_finite()) throw NonFiniteError("non-finite value produced in " + std::string(where));
}

}  // namespace mixmo
