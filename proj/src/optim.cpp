// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dlora {

double cosine_lr(double base, std::size_t t, std::size_t total) {
  if (total == 0) return base;
  const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
AdamWMoments<T> AdamWMoments<T>::zeros_like(std::span<Tensor<T>* const> params) {
  AdamWMoments out;
  for (const Tensor<T>* p : params) {
    out.m.emplace_back(p->dims());
    out.v.emplace_back(p->dims());
  }
  return out;
}

template <typename T>
AdamWMoments<T> AdamWMoments<T>::zeros_like(std::span<const Tensor<T>* const> params) {
  AdamWMoments out;
  for (const Tensor<T>* p : params) {
    out.m.emplace_back(p->dims());
    out.v.emplace_back(p->dims());
  }
  return out;
}

void AdamW::begin_step() {
  ++step_;
  lr_ = cosine_lr(cfg_.lr, step_ - 1, cfg_.total_steps);
}

template <typename T>
void AdamW::update(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
                   AdamWMoments<T>& moments, FlopMeter meter) const {
  if (params.size() != grads.size() || params.size() != moments.m.size()) {
    throw ShapeError("adamw: parameter, gradient and moment counts differ");
  }
  if (step_ == 0) throw std::logic_error("adamw: update before begin_step");
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  const double decay = 1.0 - lr_ * cfg_.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    Tensor<T>& m = moments.m[i];
    Tensor<T>& v = moments.v[i];
    if (!same_shape(p, g) || !same_shape(p, m)) throw ShapeError("adamw: shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
      const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      const double pj = static_cast<double>(p[j]) * decay;
      p[j] = static_cast<T>(pj - lr_ * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    meter.add(flops::adamw(p.size()));
  }
}

template struct AdamWMoments<float>;
template struct AdamWMoments<double>;
template void AdamW::update(std::span<Tensor<float>* const>, std::span<const Tensor<float>>,
                            AdamWMoments<float>&, FlopMeter) const;
template void AdamW::update(std::span<Tensor<double>* const>, std::span<const Tensor<double>>,
                            AdamWMoments<double>&, FlopMeter) const;

}  // namespace dlora
