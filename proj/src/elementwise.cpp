// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <vector>

#include "dlora/kernels.hpp"

namespace dlora {

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size() || a.cols() != b.cols()) {
    throw ShapeError("add: shape mismatch " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void scale_inplace(Tensor<T>& a, T s) {
  for (T& x : a.data()) x *= s;
}

template <typename T>
void add_row_bias(Tensor<T>& a, const Tensor<T>& bias) {
  if (bias.size() != a.cols()) throw ShapeError("add_row_bias: bias width mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
}

template <typename T>
Tensor<T> column_sums(const Tensor<T>& a) {
  Tensor<T> out(Dims{a.cols()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) out[j] += row[j];
  }
  return out;
}

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  std::vector<std::uint8_t> mask(logits.rows(), 1);
  return kernels::cross_entropy(logits, targets, mask);
}

#define DLORA_INSTANTIATE(T)                                                           \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template void scale_inplace(Tensor<T>&, T);                                          \
  template void add_row_bias(Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> column_sums(const Tensor<T>&);                                    \
  template CrossEntropyResult<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);

DLORA_INSTANTIATE(float)
DLORA_INSTANTIATE(double)

}  // namespace dlora
