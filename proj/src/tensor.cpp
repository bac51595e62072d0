// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/tensor.hpp"

#include <cmath>
#include <cstring>

namespace dlora {

std::string dims_to_string(const Dims& dims) {
  std::string out = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(dims[i]);
  }
  return out + "]";
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) return false;
  return a.empty() || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template class Tensor<float>;
template class Tensor<double>;
template bool bit_identical(const Tensor<float>&, const Tensor<float>&);
template bool bit_identical(const Tensor<double>&, const Tensor<double>&);

}  // namespace dlora
