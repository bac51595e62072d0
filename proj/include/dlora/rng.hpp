// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "dlora/tensor.hpp"

namespace dlora {

/// SplitMix64 stream. Identical seeds give identical sequences everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Uses the top bits via multiply-shift.
  std::uint64_t below(std::uint64_t n) noexcept;

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

/// Independent child seed for a named purpose (`salt`).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) noexcept;

/// Fills a tensor of the given dims with standard normal samples, row-major.
/// Samples come in Box-Muller pairs: r = sqrt(-2 ln(1 - u1)),
/// z0 = r cos(2 pi u2), z1 = r sin(2 pi u2). An odd tail drops z1.
template <typename T>
Tensor<T> seeded_normal(Rng& rng, const Dims& dims, double scale = 1.0);

}  // namespace dlora
