// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dlora/cost.hpp"
#include "dlora/kernels.hpp"
#include "dlora/tensor.hpp"

namespace dlora {

enum class Precision : std::uint8_t { F32 = 32, F64 = 64 };

struct ModelConfig {
  std::uint32_t vocab = 64;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 128;
  std::uint32_t n_layers = 8;
  std::uint32_t max_seq = 32;
  Precision precision = Precision::F32;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kRmsNormEps = 1e-5;

/// Rows of every activation are `batch * seq` tokens.
struct SeqShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t tokens() const { return batch * seq; }
};

template <typename T>
struct DecoderBlock {
  Tensor<T> w_q, w_k, w_v, w_o;  // [d x d]
  Tensor<T> w1;                  // [d x d_ff]
  Tensor<T> w2;                  // [d_ff x d]
  Tensor<T> attn_gain, mlp_gain; // [d]

  std::vector<Tensor<T>*> tensors();
  std::vector<const Tensor<T>*> tensors() const;
};

/// Edge-resident part of the backbone.
template <typename T>
struct Embedding {
  Tensor<T> table;      // [V x d]
  Tensor<T> positions;  // [max_seq x d], sinusoidal
};

/// Cloud-resident part of the backbone.
template <typename T>
struct Trunk {
  std::vector<DecoderBlock<T>> blocks;
  Tensor<T> final_gain;  // [d]
  Tensor<T> lm_head;     // [d x V]
};

template <typename T>
struct Backbone {
  ModelConfig config;
  Embedding<T> embedding;
  Trunk<T> trunk;

  /// Seeded initialization from `config.seed`.
  static Backbone init(const ModelConfig& config);

  /// All tensors in declaration order: table, blocks, final gain, head, positions.
  std::vector<Tensor<T>*> tensors();
  std::vector<const Tensor<T>*> tensors() const;
};

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t max_seq, std::size_t d);

template <typename T>
struct QkvDelta {
  Tensor<T> q, k, v;
};

/// Injection points for PEFT deltas. The default implementation injects
/// nothing, which is the pure frozen backbone.
template <typename T>
class PeftHook {
 public:
  virtual ~PeftHook() = default;

  /// `qkv_input` is the normalized block input that feeds W_Q, W_K and W_V.
  virtual std::optional<QkvDelta<T>> qkv_delta(std::size_t /*layer*/, const Tensor<T>& /*qkv_input*/) {
    return std::nullopt;
  }
  /// `mlp_output` is the output of the block MLP; the delta is added next to it.
  virtual std::optional<Tensor<T>> mlp_delta(std::size_t /*layer*/, const Tensor<T>& /*mlp_output*/) {
    return std::nullopt;
  }

  // Backward is only invoked for sites whose forward returned a delta. The
  // return value is the delta branch's contribution to the site input gradient.
  virtual std::optional<Tensor<T>> qkv_backward(std::size_t /*layer*/, const Tensor<T>& /*dq*/,
                                                const Tensor<T>& /*dk*/, const Tensor<T>& /*dv*/) {
    return std::nullopt;
  }
  virtual std::optional<Tensor<T>> mlp_backward(std::size_t /*layer*/, const Tensor<T>& /*dout*/) {
    return std::nullopt;
  }

  /// Backward through the trunk stops once this layer has been processed.
  /// Returning `n_layers` means no block needs a backward pass.
  virtual std::size_t lowest_backward_layer(std::size_t n_layers) const { return n_layers; }
};

template <typename T>
struct BlockCache {
  Tensor<T> h_in;
  RmsNormResult<T> attn_norm;
  Tensor<T> q, k, v;
  Tensor<T> probs;
  Tensor<T> attn_out;
  Tensor<T> h1;
  RmsNormResult<T> mlp_norm;
  Tensor<T> pre_act;
  Tensor<T> act;
  Tensor<T> mlp_out;
  bool qkv_hooked = false;
  bool mlp_hooked = false;
};

template <typename T>
struct TrunkCache {
  std::vector<BlockCache<T>> blocks;
  Tensor<T> final_in;
  RmsNormResult<T> final_norm;
};

/// Gradient buffers with the same layout as the frozen weights; only used
/// when the backbone itself is trained (pretraining, gradient checks).
template <typename T>
struct TrunkGrads {
  std::vector<DecoderBlock<T>> blocks;
  Tensor<T> final_gain;
  Tensor<T> lm_head;

  static TrunkGrads zeros_like(const Trunk<T>& trunk);
};

/// Token embeddings plus positions, shaped [batch x seq x d].
template <typename T>
Tensor<T> embed(std::span<const std::int32_t> tokens, const SeqShape& shape, const Embedding<T>& emb,
                const ModelConfig& cfg, FlopMeter meter = {});

template <typename T>
Tensor<T> forward_block(const Tensor<T>& h, const DecoderBlock<T>& block, const ModelConfig& cfg,
                        const SeqShape& shape, std::size_t layer, PeftHook<T>* hook,
                        BlockCache<T>* cache, FlopMeter meter = {});

/// Returns dh. Weight gradients are accumulated into `grads` when non-null.
template <typename T>
Tensor<T> backward_block(const BlockCache<T>& cache, const Tensor<T>& dout, const DecoderBlock<T>& block,
                         const ModelConfig& cfg, const SeqShape& shape, std::size_t layer,
                         PeftHook<T>* hook, DecoderBlock<T>* grads, FlopMeter meter = {});

/// Blocks, final norm and LM head. Returns logits [batch x seq x V].
template <typename T>
Tensor<T> forward_trunk(const Tensor<T>& h0, const Trunk<T>& trunk, const ModelConfig& cfg,
                        const SeqShape& shape, PeftHook<T>* hook, TrunkCache<T>* cache,
                        FlopMeter meter = {});

/// Backpropagates dlogits. Stops after `hook->lowest_backward_layer()` unless
/// `grads` is given, in which case it runs to the embedding and returns dh0.
template <typename T>
std::optional<Tensor<T>> backward_trunk(const TrunkCache<T>& cache, const Tensor<T>& dlogits,
                                        const Trunk<T>& trunk, const ModelConfig& cfg,
                                        const SeqShape& shape, PeftHook<T>* hook, TrunkGrads<T>* grads,
                                        FlopMeter meter = {});

template <typename T>
Tensor<T> forward_backbone(std::span<const std::int32_t> tokens, const SeqShape& shape,
                           const Backbone<T>& backbone, PeftHook<T>* hook);

/// Greedy decoding; ties go to the lowest token id.
template <typename T>
std::vector<std::int32_t> generate(std::span<const std::int32_t> prompt, std::size_t n_new,
                                   const Backbone<T>& backbone, PeftHook<T>* hook);

/// Index of the largest entry, lowest index on ties.
template <typename T>
std::size_t argmax(std::span<const T> row);

}  // namespace dlora
