// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dlora {

/// Thrown when tensor shapes do not line up for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for out-of-range user input (token ids, sequence lengths, configs).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Dims = std::vector<std::size_t>;

std::string dims_to_string(const Dims& dims);

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Any tensor can be viewed as a matrix whose column
/// count is the last dimension and whose row count is the product of the rest.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(dims_product(dims_), T{0}) {
    check_dims();
  }

  Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != dims_product(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_to_string(dims_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor(Dims{rows, cols}); }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return dims_.empty() ? 0 : dims_.back(); }
  std::size_t rows() const noexcept {
    if (dims_.empty()) return 0;
    return dims_.back() == 0 ? 0 : data_.size() / dims_.back();
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) noexcept { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  /// Same data, new dims; element count must be preserved.
  Tensor reshaped(Dims dims) const {
    if (dims_product(dims) != data_.size()) {
      throw ShapeError("cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const;

  /// Bitwise-meaningful equality: same dims and element-wise ==.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : dims_) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims_));
    }
  }

  Dims dims_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Throws ShapeError unless `t` has exactly the given matrix shape.
template <typename T>
void require_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols, const char* what) {
  if (t.rows() != rows || t.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "], got " + dims_to_string(t.dims()));
  }
}

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.dims() == b.dims();
}

/// Bitwise comparison of every scalar (distinguishes -0 from +0 and NaN payloads).
template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace dlora
