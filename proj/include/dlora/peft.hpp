// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "dlora/cost.hpp"
#include "dlora/model.hpp"
#include "dlora/optim.hpp"
#include "dlora/tensor.hpp"

namespace dlora {

enum class PeftKind : std::uint8_t { Lora = 0, Adapter = 1 };
enum class ModuleStatus : std::uint8_t { Killed = 0, Active = 1 };

/// Whether a killed module's delta branch still runs during forward.
enum class FrozenPolicy : std::uint8_t { SkipFrozen = 0, ComputeFrozenOnEdge = 1 };

struct PeftConfig {
  PeftKind kind = PeftKind::Lora;
  std::uint32_t rank = 4;
  std::uint32_t adapter_dim = 16;
  double alpha = 1.0;

  void validate() const;
  bool operator==(const PeftConfig&) const = default;
};

/// delta = alpha * (h W_down^T) W_up with W_down, W_up both [r x d].
template <typename T>
struct LoraProjection {
  Tensor<T> down;
  Tensor<T> up;
  T alpha = T{1};

  std::size_t rank() const { return down.rows(); }
};

template <typename T>
struct LoraTriplet {
  std::array<LoraProjection<T>, 3> qkv;  // Q, K, V in that order
};

/// out = h + SiLU(h W_a + b_a) W_b + b_b
template <typename T>
struct SerialAdapter {
  Tensor<T> w_a;  // [d x m]
  Tensor<T> b_a;  // [m]
  Tensor<T> w_b;  // [m x d]
  Tensor<T> b_b;  // [d]
};

template <typename T>
struct PeftModule {
  std::variant<LoraTriplet<T>, SerialAdapter<T>> body;
  std::size_t layer = 0;
  ModuleStatus status = ModuleStatus::Active;

  PeftKind kind() const { return body.index() == 0 ? PeftKind::Lora : PeftKind::Adapter; }
  bool active() const { return status == ModuleStatus::Active; }

  /// Learnable tensors in fixed order (LoRA: q.down, q.up, k.down, ...;
  /// adapter: w_a, b_a, w_b, b_b).
  std::vector<Tensor<T>*> params();
  std::vector<const Tensor<T>*> params() const;
};

template <typename T>
using PeftPool = std::vector<PeftModule<T>>;

/// One module per decoder block. LoRA: W_down ~ 0.02 N(0,1), W_up = 0.
/// Adapter: W_a ~ 0.02 N(0,1), everything else zero. Both start as exact no-ops.
template <typename T>
PeftPool<T> init_pool(const PeftConfig& peft, const ModelConfig& model, std::uint64_t seed);

template <typename T>
Tensor<T> lora_delta(const Tensor<T>& h, const LoraProjection<T>& p, FlopMeter meter = {});

template <typename T>
struct LoraGrads {
  Tensor<T> up, down, dh;
};

/// Gradients of delta = alpha (h W_down^T) W_up. `dh` is the branch's part only.
template <typename T>
LoraGrads<T> lora_backward(const Tensor<T>& h, const Tensor<T>& d_delta, const LoraProjection<T>& p,
                           FlopMeter meter = {});

/// SiLU(h W_a + b_a) W_b + b_b, i.e. the adapter output minus its residual.
template <typename T>
Tensor<T> adapter_branch(const Tensor<T>& h, const SerialAdapter<T>& m, FlopMeter meter = {});

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& h, const SerialAdapter<T>& m, FlopMeter meter = {});

template <typename T>
struct AdapterGrads {
  Tensor<T> w_a, b_a, w_b, b_b;
  Tensor<T> dh;  // branch-only input gradient
};

template <typename T>
AdapterGrads<T> adapter_branch_backward(const Tensor<T>& h, const Tensor<T>& d_out,
                                        const SerialAdapter<T>& m, FlopMeter meter = {});

/// Full input gradient of adapter_forward: d_out plus the branch gradient.
template <typename T>
AdapterGrads<T> adapter_backward(const Tensor<T>& h, const Tensor<T>& d_out, const SerialAdapter<T>& m,
                                 FlopMeter meter = {});

/// sqrt of the sum of squares over every learnable scalar of the module,
/// accumulated in double in parameter order.
template <typename T>
double module_l2_norm(const PeftModule<T>& m, FlopMeter meter = {});

template <typename T>
std::vector<double> pool_norms(const PeftPool<T>& pool, FlopMeter meter = {});

/// Edge-side compute engine for the module pool: produces deltas, caches
/// their inputs, turns upstream gradients into parameter updates.
template <typename T>
class PeftTrainer {
 public:
  PeftTrainer(PeftPool<T> pool, AdamWConfig optim, FrozenPolicy policy);

  PeftKind kind() const { return kind_; }
  FrozenPolicy policy() const { return policy_; }
  std::size_t size() const { return pool_.size(); }
  const PeftPool<T>& pool() const { return pool_; }
  PeftPool<T>& mutable_pool() { return pool_; }
  const AdamW& optimizer() const { return optim_; }

  std::vector<ModuleStatus> status() const;
  void set_status(std::span<const ModuleStatus> status);
  std::size_t active_count() const;

  /// Module at `layer` takes part in forward (active, or frozen but computed).
  bool in_forward(std::size_t layer) const;
  bool trains(std::size_t layer) const;

  /// When false, backward stores gradients instead of applying AdamW.
  void set_apply_updates(bool apply) { apply_updates_ = apply; }
  const std::vector<std::vector<Tensor<T>>>& last_grads() const { return last_grads_; }

  void begin_step();
  void end_step();

  QkvDelta<T> forward_qkv(std::size_t layer, const Tensor<T>& input, FlopMeter meter = {});
  Tensor<T> forward_mlp(std::size_t layer, const Tensor<T>& input, FlopMeter meter = {});
  Tensor<T> backward_qkv(std::size_t layer, const Tensor<T>& dq, const Tensor<T>& dk, const Tensor<T>& dv,
                         FlopMeter meter = {});
  Tensor<T> backward_mlp(std::size_t layer, const Tensor<T>& dout, FlopMeter meter = {});

  std::vector<double> norms(FlopMeter meter = {}) const { return pool_norms(pool_, meter); }

 private:
  void apply(std::size_t layer, std::vector<Tensor<T>> grads, FlopMeter meter);
  PeftModule<T>& module(std::size_t layer);

  PeftPool<T> pool_;
  PeftKind kind_;
  FrozenPolicy policy_;
  AdamW optim_;
  std::vector<AdamWMoments<T>> moments_;
  std::vector<std::optional<Tensor<T>>> inputs_;
  std::vector<std::vector<Tensor<T>>> last_grads_;
  bool apply_updates_ = true;
};

/// In-process hook that drives a PeftTrainer directly (no protocol).
template <typename T>
class LocalPeftHook : public PeftHook<T> {
 public:
  explicit LocalPeftHook(PeftTrainer<T>& trainer, FlopMeter meter = {}) : trainer_(trainer), meter_(meter) {}

  std::optional<QkvDelta<T>> qkv_delta(std::size_t layer, const Tensor<T>& input) override;
  std::optional<Tensor<T>> mlp_delta(std::size_t layer, const Tensor<T>& input) override;
  std::optional<Tensor<T>> qkv_backward(std::size_t layer, const Tensor<T>& dq, const Tensor<T>& dk,
                                        const Tensor<T>& dv) override;
  std::optional<Tensor<T>> mlp_backward(std::size_t layer, const Tensor<T>& dout) override;
  std::size_t lowest_backward_layer(std::size_t n_layers) const override;

 private:
  PeftTrainer<T>& trainer_;
  FlopMeter meter_;
};

/// Lowest layer whose module trains under `status`, or `status.size()`.
std::size_t lowest_active_layer(std::span<const ModuleStatus> status);

}  // namespace dlora
