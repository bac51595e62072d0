// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/peft.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dlora/kernels.hpp"
#include "dlora/rng.hpp"

namespace dlora {

void PeftConfig::validate() const {
  if (kind != PeftKind::Lora && kind != PeftKind::Adapter) throw InputError("peft: unknown kind");
  if (rank < 1) throw InputError("peft: LoRA rank must be >= 1");
  if (adapter_dim < 1) throw InputError("peft: adapter dim must be >= 1");
  if (!std::isfinite(alpha)) throw InputError("peft: alpha must be finite");
}

template <typename T>
std::vector<Tensor<T>*> PeftModule<T>::params() {
  if (auto* lora = std::get_if<LoraTriplet<T>>(&body)) {
    std::vector<Tensor<T>*> out;
    for (auto& p : lora->qkv) {
      out.push_back(&p.down);
      out.push_back(&p.up);
    }
    return out;
  }
  auto& a = std::get<SerialAdapter<T>>(body);
  return {&a.w_a, &a.b_a, &a.w_b, &a.b_b};
}

template <typename T>
std::vector<const Tensor<T>*> PeftModule<T>::params() const {
  auto mut = const_cast<PeftModule*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
PeftPool<T> init_pool(const PeftConfig& peft, const ModelConfig& model, std::uint64_t seed) {
  peft.validate();
  model.validate();
  const std::size_t d = model.d_model, r = peft.rank, m = peft.adapter_dim;
  Rng rng(seed);
  PeftPool<T> pool;
  for (std::size_t l = 0; l < model.n_layers; ++l) {
    PeftModule<T> mod;
    mod.layer = l;
    if (peft.kind == PeftKind::Lora) {
      LoraTriplet<T> trip;
      for (auto& p : trip.qkv) {
        p.down = seeded_normal<T>(rng, {r, d}, 0.02);
        p.up = Tensor<T>(Dims{r, d});
        p.alpha = static_cast<T>(peft.alpha);
      }
      mod.body = std::move(trip);
    } else {
      SerialAdapter<T> a;
      a.w_a = seeded_normal<T>(rng, {d, m}, 0.02);
      a.b_a = Tensor<T>(Dims{m});
      a.w_b = Tensor<T>(Dims{m, d});
      a.b_b = Tensor<T>(Dims{d});
      mod.body = std::move(a);
    }
    pool.push_back(std::move(mod));
  }
  return pool;
}

template <typename T>
Tensor<T> lora_delta(const Tensor<T>& h, const LoraProjection<T>& p, FlopMeter meter) {
  if (h.cols() != p.down.cols() || p.up.dims() != p.down.dims()) {
    throw ShapeError("lora_delta: input " + dims_to_string(h.dims()) + " incompatible with W_down " +
                     dims_to_string(p.down.dims()) + " / W_up " + dims_to_string(p.up.dims()));
  }
  const std::size_t n = h.rows(), d = h.cols(), r = p.rank();
  Tensor<T> tmp = kernels::matmul_nt(h, p.down);
  Tensor<T> delta = kernels::matmul(tmp, p.up);
  meter.add(flops::matmul(n, d, r) + flops::matmul(n, r, d));
  if (p.alpha != T{1}) {
    scale_inplace(delta, p.alpha);
    meter.add(flops::elementwise(n * d));
  }
  return delta;
}

template <typename T>
LoraGrads<T> lora_backward(const Tensor<T>& h, const Tensor<T>& d_delta, const LoraProjection<T>& p,
                           FlopMeter meter) {
  if (h.cols() != p.down.cols() || d_delta.rows() != h.rows() || d_delta.cols() != p.up.cols()) {
    throw ShapeError("lora_backward: shapes inconsistent with the projection");
  }
  const std::size_t n = h.rows(), d = h.cols(), r = p.rank();
  Tensor<T> scaled = d_delta.reshaped({n, d});
  if (p.alpha != T{1}) {
    scale_inplace(scaled, p.alpha);
    meter.add(flops::elementwise(n * d));
  }
  Tensor<T> tmp = kernels::matmul_nt(h, p.down);
  LoraGrads<T> g;
  g.up = kernels::matmul_tn(tmp, scaled);
  Tensor<T> g_tmp = kernels::matmul_nt(scaled, p.up);
  g.down = kernels::matmul_tn(g_tmp, h);
  g.dh = kernels::matmul(g_tmp, p.down);
  meter.add(5 * flops::matmul(n, r, d));
  return g;
}

template <typename T>
Tensor<T> adapter_branch(const Tensor<T>& h, const SerialAdapter<T>& m, FlopMeter meter) {
  if (h.cols() != m.w_a.rows()) throw ShapeError("adapter: input width does not match W_a");
  const std::size_t n = h.rows(), d = h.cols(), k = m.w_a.cols();
  Tensor<T> z = kernels::matmul(h, m.w_a);
  add_row_bias(z, m.b_a);
  Tensor<T> s = kernels::silu(z);
  Tensor<T> out = kernels::matmul(s, m.w_b);
  add_row_bias(out, m.b_b);
  meter.add(flops::matmul(n, d, k) + flops::elementwise(n * k) + flops::silu(n * k) +
            flops::matmul(n, k, d) + flops::elementwise(n * d));
  return out;
}

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& h, const SerialAdapter<T>& m, FlopMeter meter) {
  Tensor<T> out = h.reshaped({h.rows(), h.cols()});
  add_inplace(out, adapter_branch(h, m, meter));
  meter.add(flops::elementwise(h.size()));
  return out;
}

template <typename T>
AdapterGrads<T> adapter_branch_backward(const Tensor<T>& h, const Tensor<T>& d_out,
                                        const SerialAdapter<T>& m, FlopMeter meter) {
  if (h.cols() != m.w_a.rows() || d_out.rows() != h.rows() || d_out.cols() != m.w_b.cols()) {
    throw ShapeError("adapter_backward: shapes inconsistent with the adapter");
  }
  const std::size_t n = h.rows(), d = h.cols(), k = m.w_a.cols();
  const Tensor<T> dout = d_out.reshaped({n, d});
  Tensor<T> z = kernels::matmul(h, m.w_a);
  add_row_bias(z, m.b_a);
  Tensor<T> s = kernels::silu(z);
  AdapterGrads<T> g;
  g.w_b = kernels::matmul_tn(s, dout);
  g.b_b = column_sums(dout);
  Tensor<T> ds = kernels::matmul_nt(dout, m.w_b);
  Tensor<T> dz = kernels::silu_backward(z, ds);
  g.w_a = kernels::matmul_tn(h, dz);
  g.b_a = column_sums(dz);
  g.dh = kernels::matmul_nt(dz, m.w_a);
  meter.add(flops::matmul(n, d, k) + flops::elementwise(n * k) + flops::silu(n * k) +  // recompute
            flops::matmul(k, n, d) + flops::elementwise(n * d) + flops::matmul(n, d, k) +
            flops::silu_backward(n * k) + flops::matmul(d, n, k) + flops::elementwise(n * k) +
            flops::matmul(n, k, d));
  return g;
}

template <typename T>
AdapterGrads<T> adapter_backward(const Tensor<T>& h, const Tensor<T>& d_out, const SerialAdapter<T>& m,
                                 FlopMeter meter) {
  AdapterGrads<T> g = adapter_branch_backward(h, d_out, m, meter);
  add_inplace(g.dh, d_out);
  meter.add(flops::elementwise(h.size()));
  return g;
}

template <typename T>
double module_l2_norm(const PeftModule<T>& m, FlopMeter meter) {
  double ss = 0.0;
  std::uint64_t count = 0;
  for (const Tensor<T>* t : m.params()) {
    for (T x : t->data()) ss += static_cast<double>(x) * static_cast<double>(x);
    count += t->size();
  }
  meter.add(flops::l2_norm(count));
  return std::sqrt(ss);
}

template <typename T>
std::vector<double> pool_norms(const PeftPool<T>& pool, FlopMeter meter) {
  std::vector<double> out;
  out.reserve(pool.size());
  for (const auto& m : pool) out.push_back(module_l2_norm(m, meter));
  return out;
}

std::size_t lowest_active_layer(std::span<const ModuleStatus> status) {
  for (std::size_t l = 0; l < status.size(); ++l) {
    if (status[l] == ModuleStatus::Active) return l;
  }
  return status.size();
}

// --- PeftTrainer ------------------------------------------------------------

template <typename T>
PeftTrainer<T>::PeftTrainer(PeftPool<T> pool, AdamWConfig optim, FrozenPolicy policy)
    : pool_(std::move(pool)), policy_(policy), optim_(optim) {
  if (pool_.empty()) throw InputError("peft trainer: empty module pool");
  kind_ = pool_.front().kind();
  for (std::size_t l = 0; l < pool_.size(); ++l) {
    if (pool_[l].kind() != kind_) throw InputError("peft trainer: mixed module kinds");
    if (pool_[l].layer != l) throw InputError("peft trainer: module layer indices must be 0..L-1");
    moments_.push_back(AdamWMoments<T>::zeros_like(std::span<Tensor<T>* const>(pool_[l].params())));
  }
  inputs_.resize(pool_.size());
  last_grads_.resize(pool_.size());
}

template <typename T>
std::vector<ModuleStatus> PeftTrainer<T>::status() const {
  std::vector<ModuleStatus> out;
  for (const auto& m : pool_) out.push_back(m.status);
  return out;
}

template <typename T>
void PeftTrainer<T>::set_status(std::span<const ModuleStatus> status) {
  if (status.size() != pool_.size()) throw ShapeError("peft trainer: status length mismatch");
  for (std::size_t l = 0; l < pool_.size(); ++l) pool_[l].status = status[l];
}

template <typename T>
std::size_t PeftTrainer<T>::active_count() const {
  std::size_t n = 0;
  for (const auto& m : pool_) n += m.active() ? 1 : 0;
  return n;
}

template <typename T>
bool PeftTrainer<T>::in_forward(std::size_t layer) const {
  return layer < pool_.size() &&
         (pool_[layer].active() || policy_ == FrozenPolicy::ComputeFrozenOnEdge);
}

template <typename T>
bool PeftTrainer<T>::trains(std::size_t layer) const {
  return layer < pool_.size() && pool_[layer].active();
}

template <typename T>
void PeftTrainer<T>::begin_step() {
  optim_.begin_step();
  for (auto& in : inputs_) in.reset();
}

template <typename T>
void PeftTrainer<T>::end_step() {
  for (auto& in : inputs_) in.reset();
}

template <typename T>
PeftModule<T>& PeftTrainer<T>::module(std::size_t layer) {
  if (layer >= pool_.size()) throw std::out_of_range("peft trainer: layer " + std::to_string(layer));
  return pool_[layer];
}

template <typename T>
QkvDelta<T> PeftTrainer<T>::forward_qkv(std::size_t layer, const Tensor<T>& input, FlopMeter meter) {
  auto& lora = std::get<LoraTriplet<T>>(module(layer).body);
  if (!in_forward(layer)) throw std::logic_error("peft trainer: forward on a skipped module");
  QkvDelta<T> out{lora_delta(input, lora.qkv[0], meter), lora_delta(input, lora.qkv[1], meter),
                  lora_delta(input, lora.qkv[2], meter)};
  if (trains(layer)) inputs_[layer] = input;
  return out;
}

template <typename T>
Tensor<T> PeftTrainer<T>::forward_mlp(std::size_t layer, const Tensor<T>& input, FlopMeter meter) {
  auto& ad = std::get<SerialAdapter<T>>(module(layer).body);
  if (!in_forward(layer)) throw std::logic_error("peft trainer: forward on a skipped module");
  Tensor<T> out = adapter_branch(input, ad, meter);
  if (trains(layer)) inputs_[layer] = input;
  return out;
}

template <typename T>
Tensor<T> PeftTrainer<T>::backward_qkv(std::size_t layer, const Tensor<T>& dq, const Tensor<T>& dk,
                                       const Tensor<T>& dv, FlopMeter meter) {
  auto& lora = std::get<LoraTriplet<T>>(module(layer).body);
  if (!trains(layer) || !inputs_[layer]) {
    throw std::logic_error("peft trainer: backward for layer " + std::to_string(layer) +
                           " without a cached forward input");
  }
  const Tensor<T>& h = *inputs_[layer];
  auto gq = lora_backward(h, dq, lora.qkv[0], meter);
  auto gk = lora_backward(h, dk, lora.qkv[1], meter);
  auto gv = lora_backward(h, dv, lora.qkv[2], meter);
  Tensor<T> dh = std::move(gq.dh);
  add_inplace(dh, gk.dh);
  add_inplace(dh, gv.dh);
  meter.add(2 * flops::elementwise(dh.size()));
  std::vector<Tensor<T>> grads;
  grads.push_back(std::move(gq.down));
  grads.push_back(std::move(gq.up));
  grads.push_back(std::move(gk.down));
  grads.push_back(std::move(gk.up));
  grads.push_back(std::move(gv.down));
  grads.push_back(std::move(gv.up));
  apply(layer, std::move(grads), meter);
  inputs_[layer].reset();
  return dh;
}

template <typename T>
Tensor<T> PeftTrainer<T>::backward_mlp(std::size_t layer, const Tensor<T>& dout, FlopMeter meter) {
  auto& ad = std::get<SerialAdapter<T>>(module(layer).body);
  if (!trains(layer) || !inputs_[layer]) {
    throw std::logic_error("peft trainer: backward for layer " + std::to_string(layer) +
                           " without a cached forward input");
  }
  auto g = adapter_branch_backward(*inputs_[layer], dout, ad, meter);
  std::vector<Tensor<T>> grads;
  grads.push_back(std::move(g.w_a));
  grads.push_back(std::move(g.b_a));
  grads.push_back(std::move(g.w_b));
  grads.push_back(std::move(g.b_b));
  apply(layer, std::move(grads), meter);
  inputs_[layer].reset();
  return std::move(g.dh);
}

template <typename T>
void PeftTrainer<T>::apply(std::size_t layer, std::vector<Tensor<T>> grads, FlopMeter meter) {
  if (!apply_updates_) {
    last_grads_[layer] = std::move(grads);
    return;
  }
  auto params = pool_[layer].params();
  optim_.update(std::span<Tensor<T>* const>(params), std::span<const Tensor<T>>(grads), moments_[layer], meter);
}

// --- LocalPeftHook ----------------------------------------------------------

template <typename T>
std::optional<QkvDelta<T>> LocalPeftHook<T>::qkv_delta(std::size_t layer, const Tensor<T>& input) {
  if (trainer_.kind() != PeftKind::Lora || !trainer_.in_forward(layer)) return std::nullopt;
  return trainer_.forward_qkv(layer, input, meter_);
}

template <typename T>
std::optional<Tensor<T>> LocalPeftHook<T>::mlp_delta(std::size_t layer, const Tensor<T>& input) {
  if (trainer_.kind() != PeftKind::Adapter || !trainer_.in_forward(layer)) return std::nullopt;
  return trainer_.forward_mlp(layer, input, meter_);
}

template <typename T>
std::optional<Tensor<T>> LocalPeftHook<T>::qkv_backward(std::size_t layer, const Tensor<T>& dq,
                                                        const Tensor<T>& dk, const Tensor<T>& dv) {
  if (!trainer_.trains(layer)) return std::nullopt;
  return trainer_.backward_qkv(layer, dq, dk, dv, meter_);
}

template <typename T>
std::optional<Tensor<T>> LocalPeftHook<T>::mlp_backward(std::size_t layer, const Tensor<T>& dout) {
  if (!trainer_.trains(layer)) return std::nullopt;
  return trainer_.backward_mlp(layer, dout, meter_);
}

template <typename T>
std::size_t LocalPeftHook<T>::lowest_backward_layer(std::size_t n_layers) const {
  auto st = trainer_.status();
  const std::size_t low = lowest_active_layer(st);
  return low < st.size() ? low : n_layers;
}

#define DLORA_INSTANTIATE(T)                                                                          \
  template struct PeftModule<T>;                                                                      \
  template PeftPool<T> init_pool<T>(const PeftConfig&, const ModelConfig&, std::uint64_t);             \
  template Tensor<T> lora_delta(const Tensor<T>&, const LoraProjection<T>&, FlopMeter);                \
  template LoraGrads<T> lora_backward(const Tensor<T>&, const Tensor<T>&, const LoraProjection<T>&,    \
                                      FlopMeter);                                                     \
  template Tensor<T> adapter_branch(const Tensor<T>&, const SerialAdapter<T>&, FlopMeter);             \
  template Tensor<T> adapter_forward(const Tensor<T>&, const SerialAdapter<T>&, FlopMeter);            \
  template AdapterGrads<T> adapter_branch_backward(const Tensor<T>&, const Tensor<T>&,                 \
                                                   const SerialAdapter<T>&, FlopMeter);               \
  template AdapterGrads<T> adapter_backward(const Tensor<T>&, const Tensor<T>&,                        \
                                            const SerialAdapter<T>&, FlopMeter);                      \
  template double module_l2_norm(const PeftModule<T>&, FlopMeter);                                    \
  template std::vector<double> pool_norms(const PeftPool<T>&, FlopMeter);                             \
  template class PeftTrainer<T>;                                                                      \
  template class LocalPeftHook<T>;

DLORA_INSTANTIATE(float)
DLORA_INSTANTIATE(double)

}  // namespace dlora
