// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/rng.hpp"

#include <cmath>
#include <numbers>

namespace dlora {

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

template <typename T>
Tensor<T> seeded_normal(Rng& rng, const Dims& dims, double scale) {
  Tensor<T> out(dims);
  auto data = out.data();
  std::size_t i = 0;
  while (i < data.size()) {
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    data[i++] = static_cast<T>(scale * r * std::cos(theta));
    if (i < data.size()) data[i++] = static_cast<T>(scale * r * std::sin(theta));
  }
  return out;
}

template Tensor<float> seeded_normal<float>(Rng&, const Dims&, double);
template Tensor<double> seeded_normal<double>(Rng&, const Dims&, double);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  Rng r(seed ^ (salt * 0x9e3779b97f4a7c15ULL));
  return r.next_u64();
}

}  // namespace dlora
