#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mfadapter/errors.hpp"

namespace mfa {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor (last index fastest). Extents are positive and the
/// element count always equals the product of the extents.
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  /// Rank-2 literal, mostly for tests: `Tensor::matrix({{1, 2}, {3, 4}})`.
  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({m, n}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

  T& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Contiguous view of row `i` along the leading axis.
  std::span<T> row(std::size_t i) noexcept {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * w, w);
  }
  std::span<const T> row(std::size_t i) const noexcept {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * w, w);
  }

  BasicTensor reshaped(Shape shape) const& {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }
  BasicTensor reshaped(Shape shape) && {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), std::move(data_));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensors must have rank >= 1");
    for (std::size_t e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using WideTensor = BasicTensor<double>;

template <std::floating_point To, std::floating_point From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  if constexpr (std::is_same_v<To, From>) {
    return t;
  } else {
    std::vector<To> out(t.data().begin(), t.data().end());
    return BasicTensor<To>(t.shape(), std::move(out));
  }
}

template <std::floating_point T>
void ensure_finite(const BasicTensor<T>& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + where);
}

template <std::floating_point T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " must be rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

/// Stack equally shaped tensors along a new leading axis.
template <std::floating_point T>
BasicTensor<T> stack(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) throw DimensionError("cannot stack zero tensors");
  Shape shape = parts.front().shape();
  std::vector<T> data;
  data.reserve(parts.size() * parts.front().size());
  for (const auto& p : parts) {
    if (p.shape() != shape) {
      throw DimensionError("stack operands differ: " + shape_str(shape) + " vs " + shape_str(p.shape()));
    }
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  shape.insert(shape.begin(), parts.size());
  return BasicTensor<T>(std::move(shape), std::move(data));
}

/// Rows `indices` of the leading axis, in the given order.
template <std::floating_point T>
BasicTensor<T> gather_rows(const BasicTensor<T>& t, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DimensionError("cannot gather zero rows");
  Shape shape = t.shape();
  const std::size_t w = t.size() / shape[0];
  std::vector<T> data;
  data.reserve(indices.size() * w);
  for (std::size_t i : indices) {
    if (i >= shape[0]) throw IndexError("row " + std::to_string(i) + " out of range " + shape_str(shape));
    auto r = t.row(i);
    data.insert(data.end(), r.begin(), r.end());
  }
  shape[0] = indices.size();
  return BasicTensor<T>(std::move(shape), std::move(data));
}

/// Concatenate along the leading axis.
template <std::floating_point T>
BasicTensor<T> concat_rows(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw DimensionError("concat_rows operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.shape()[0];
  std::vector<T> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return BasicTensor<T>(std::move(shape), std::move(data));
}

}  // namespace mfa
