// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dlora/cost.hpp"
#include "dlora/tensor.hpp"

namespace dlora {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t total_steps = 1;
};

/// base * 0.5 * (1 + cos(pi * t / total)); t is clamped to [0, total].
double cosine_lr(double base, std::size_t t, std::size_t total);

template <typename T>
struct AdamWMoments {
  std::vector<Tensor<T>> m, v;

  static AdamWMoments zeros_like(std::span<Tensor<T>* const> params);
  static AdamWMoments zeros_like(std::span<const Tensor<T>* const> params);
};

/// AdamW with bias correction, decoupled weight decay and a cosine schedule.
/// One optimizer step covers every parameter group updated between two
/// `begin_step` calls; step k (1-based) uses the rate at schedule index k-1.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void begin_step();
  std::size_t step() const noexcept { return step_; }
  double current_lr() const noexcept { return lr_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

  template <typename T>
  void update(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
              AdamWMoments<T>& moments, FlopMeter meter = {}) const;

 private:
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  double lr_ = 0.0;
};

}  // namespace dlora
