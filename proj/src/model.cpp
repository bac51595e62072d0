// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/model.hpp"

#include <cmath>
#include <string>

#include "dlora/rng.hpp"

namespace dlora {

void ModelConfig::validate() const {
  if (vocab < 2) throw InputError("model: vocab must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw InputError("model: d_model must be a positive multiple of n_heads");
  }
  if (n_layers < 1) throw InputError("model: n_layers must be >= 1");
  if (n_layers > 255) throw InputError("model: n_layers must fit in a byte");
  if (d_ff == 0 || max_seq == 0) throw InputError("model: d_ff and max_seq must be positive");
  if (precision != Precision::F32 && precision != Precision::F64) {
    throw InputError("model: precision must be 32 or 64");
  }
}

template <typename T>
std::vector<Tensor<T>*> DecoderBlock<T>::tensors() {
  return {&w_q, &w_k, &w_v, &w_o, &w1, &w2, &attn_gain, &mlp_gain};
}

template <typename T>
std::vector<const Tensor<T>*> DecoderBlock<T>::tensors() const {
  return {&w_q, &w_k, &w_v, &w_o, &w1, &w2, &attn_gain, &mlp_gain};
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t max_seq, std::size_t d) {
  Tensor<T> pos = Tensor<T>::matrix(max_seq, d);
  for (std::size_t t = 0; t < max_seq; ++t) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pos(t, i) = static_cast<T>(std::sin(static_cast<double>(t) * freq));
      if (i + 1 < d) pos(t, i + 1) = static_cast<T>(std::cos(static_cast<double>(t) * freq));
    }
  }
  return pos;
}

template <typename T>
Backbone<T> Backbone<T>::init(const ModelConfig& config) {
  config.validate();
  const std::size_t v = config.vocab, d = config.d_model, ff = config.d_ff;
  const double depth_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_scale = 1.0 / std::sqrt(static_cast<double>(ff));
  Rng rng(config.seed);
  Backbone b;
  b.config = config;
  b.embedding.table = seeded_normal<T>(rng, {v, d}, 1.0);
  for (std::uint32_t l = 0; l < config.n_layers; ++l) {
    DecoderBlock<T> blk;
    blk.w_q = seeded_normal<T>(rng, {d, d}, in_scale);
    blk.w_k = seeded_normal<T>(rng, {d, d}, in_scale);
    blk.w_v = seeded_normal<T>(rng, {d, d}, in_scale);
    blk.w_o = seeded_normal<T>(rng, {d, d}, in_scale * depth_scale);
    blk.w1 = seeded_normal<T>(rng, {d, ff}, in_scale);
    blk.w2 = seeded_normal<T>(rng, {ff, d}, ff_scale * depth_scale);
    blk.attn_gain = Tensor<T>(Dims{d});
    blk.attn_gain.fill(T{1});
    blk.mlp_gain = Tensor<T>(Dims{d});
    blk.mlp_gain.fill(T{1});
    b.trunk.blocks.push_back(std::move(blk));
  }
  b.trunk.final_gain = Tensor<T>(Dims{d});
  b.trunk.final_gain.fill(T{1});
  b.trunk.lm_head = seeded_normal<T>(rng, {d, v}, in_scale);
  b.embedding.positions = sinusoidal_positions<T>(config.max_seq, d);
  return b;
}

template <typename T>
std::vector<Tensor<T>*> Backbone<T>::tensors() {
  std::vector<Tensor<T>*> out{&embedding.table};
  for (auto& blk : trunk.blocks) {
    for (auto* t : blk.tensors()) out.push_back(t);
  }
  out.push_back(&trunk.final_gain);
  out.push_back(&trunk.lm_head);
  out.push_back(&embedding.positions);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> Backbone<T>::tensors() const {
  auto mut = const_cast<Backbone*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

template <typename T>
TrunkGrads<T> TrunkGrads<T>::zeros_like(const Trunk<T>& trunk) {
  TrunkGrads g;
  for (const auto& blk : trunk.blocks) {
    DecoderBlock<T> z;
    auto src = blk.tensors();
    auto dst = z.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Tensor<T>(src[i]->dims());
    g.blocks.push_back(std::move(z));
  }
  g.final_gain = Tensor<T>(trunk.final_gain.dims());
  g.lm_head = Tensor<T>(trunk.lm_head.dims());
  return g;
}

template <typename T>
Tensor<T> embed(std::span<const std::int32_t> tokens, const SeqShape& shape, const Embedding<T>& emb,
                const ModelConfig& cfg, FlopMeter meter) {
  if (tokens.size() != shape.tokens()) throw ShapeError("embed: token count does not match batch shape");
  if (shape.seq > cfg.max_seq) {
    throw InputError("embed: sequence length " + std::to_string(shape.seq) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  }
  const std::size_t d = cfg.d_model;
  Tensor<T> out(Dims{shape.batch, shape.seq, d});
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const std::int32_t tok = tokens[r];
    if (tok < 0 || static_cast<std::uint32_t>(tok) >= cfg.vocab) {
      throw InputError("embed: token id " + std::to_string(tok) + " outside vocabulary");
    }
    auto src = emb.table.row(static_cast<std::size_t>(tok));
    auto pos = emb.positions.row(r % shape.seq);
    auto dst = out.row(r);
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] + pos[j];
  }
  meter.add(flops::elementwise(tokens.size() * d));
  return out;
}

namespace {

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

template <typename T>
void check_delta(const Tensor<T>& delta, const Tensor<T>& like, const char* what) {
  if (delta.rows() != like.rows() || delta.cols() != like.cols()) {
    throw ShapeError(std::string(what) + ": delta shape " + dims_to_string(delta.dims()) +
                     " does not match " + dims_to_string(like.dims()));
  }
}

}  // namespace

template <typename T>
Tensor<T> forward_block(const Tensor<T>& h_in, const DecoderBlock<T>& block, const ModelConfig& cfg,
                        const SeqShape& shape, std::size_t layer, PeftHook<T>* hook,
                        BlockCache<T>* cache, FlopMeter meter) {
  const std::size_t n = shape.tokens(), d = cfg.d_model, ff = cfg.d_ff;
  const Tensor<T> h = h_in.reshaped({n, d});
  const T eps = static_cast<T>(kRmsNormEps);

  auto attn_norm = kernels::rmsnorm_rows(h, block.attn_gain, eps);
  meter.add(flops::rmsnorm(n, d));
  Tensor<T> q = kernels::matmul(attn_norm.y, block.w_q);
  Tensor<T> k = kernels::matmul(attn_norm.y, block.w_k);
  Tensor<T> v = kernels::matmul(attn_norm.y, block.w_v);
  meter.add(3 * flops::matmul(n, d, d));

  bool qkv_hooked = false;
  if (hook) {
    if (auto delta = hook->qkv_delta(layer, attn_norm.y)) {
      check_delta(delta->q, q, "forward_block q");
      check_delta(delta->k, k, "forward_block k");
      check_delta(delta->v, v, "forward_block v");
      add_inplace(q, delta->q);
      add_inplace(k, delta->k);
      add_inplace(v, delta->v);
      meter.add(3 * flops::elementwise(n * d));
      qkv_hooked = true;
    }
  }

  const AttentionShape ashape{shape.batch, shape.seq, cfg.n_heads};
  auto attn = kernels::causal_attention(q, k, v, ashape);
  meter.add(flops::causal_attention(shape.batch, cfg.n_heads, shape.seq, cfg.head_dim()));
  Tensor<T> h1 = kernels::matmul(attn.out, block.w_o);
  meter.add(flops::matmul(n, d, d));
  add_inplace(h1, h);
  meter.add(flops::elementwise(n * d));

  auto mlp_norm = kernels::rmsnorm_rows(h1, block.mlp_gain, eps);
  meter.add(flops::rmsnorm(n, d));
  Tensor<T> pre = kernels::matmul(mlp_norm.y, block.w1);
  Tensor<T> act = kernels::silu(pre);
  Tensor<T> f = kernels::matmul(act, block.w2);
  meter.add(flops::matmul(n, d, ff) + flops::silu(n * ff) + flops::matmul(n, ff, d));

  Tensor<T> out = h1;
  add_inplace(out, f);
  meter.add(flops::elementwise(n * d));
  bool mlp_hooked = false;
  if (hook) {
    if (auto delta = hook->mlp_delta(layer, f)) {
      check_delta(*delta, f, "forward_block mlp");
      add_inplace(out, *delta);
      meter.add(flops::elementwise(n * d));
      mlp_hooked = true;
    }
  }

  if (cache) {
    cache->h_in = h;
    cache->attn_norm = std::move(attn_norm);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(attn.probs);
    cache->attn_out = std::move(attn.out);
    cache->h1 = std::move(h1);
    cache->mlp_norm = std::move(mlp_norm);
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
    cache->mlp_out = std::move(f);
    cache->qkv_hooked = qkv_hooked;
    cache->mlp_hooked = mlp_hooked;
  }
  return out.reshaped(h_in.dims());
}

template <typename T>
Tensor<T> backward_block(const BlockCache<T>& c, const Tensor<T>& dout_in, const DecoderBlock<T>& block,
                         const ModelConfig& cfg, const SeqShape& shape, std::size_t layer,
                         PeftHook<T>* hook, DecoderBlock<T>* grads, FlopMeter meter) {
  const std::size_t n = shape.tokens(), d = cfg.d_model, ff = cfg.d_ff;
  const Tensor<T> dout = dout_in.reshaped({n, d});

  // out = h1 + f + mlp_delta
  Tensor<T> df = dout;
  if (c.mlp_hooked && hook) {
    if (auto branch = hook->mlp_backward(layer, dout)) {
      add_inplace(df, *branch);
      meter.add(flops::elementwise(n * d));
    }
  }
  Tensor<T> dact = kernels::matmul_nt(df, block.w2);
  Tensor<T> dpre = kernels::silu_backward(c.pre_act, dact);
  Tensor<T> dm = kernels::matmul_nt(dpre, block.w1);
  meter.add(flops::matmul(n, d, ff) + flops::silu_backward(n * ff) + flops::matmul(n, ff, d));
  if (grads) {
    accumulate(grads->w2, kernels::matmul_tn(c.act, df));
    accumulate(grads->w1, kernels::matmul_tn(c.mlp_norm.y, dpre));
    meter.add(flops::matmul(ff, n, d) + flops::matmul(d, n, ff));
  }
  auto mlp_norm_g = kernels::rmsnorm_rows_backward(c.h1, block.mlp_gain, c.mlp_norm.inv_rms, dm);
  meter.add(flops::rmsnorm_backward(n, d));
  if (grads) accumulate(grads->mlp_gain, mlp_norm_g.dgain);
  Tensor<T> dh1 = dout;
  add_inplace(dh1, mlp_norm_g.dx);
  meter.add(flops::elementwise(n * d));

  // h1 = h + attn_out W_O
  Tensor<T> dattn = kernels::matmul_nt(dh1, block.w_o);
  meter.add(flops::matmul(n, d, d));
  if (grads) {
    accumulate(grads->w_o, kernels::matmul_tn(c.attn_out, dh1));
    meter.add(flops::matmul(d, n, d));
  }
  const AttentionShape ashape{shape.batch, shape.seq, cfg.n_heads};
  auto ag = kernels::causal_attention_backward(c.q, c.k, c.v, c.probs, dattn, ashape);
  meter.add(flops::causal_attention_backward(shape.batch, cfg.n_heads, shape.seq, cfg.head_dim()));

  Tensor<T> da = kernels::matmul_nt(ag.dq, block.w_q);
  add_inplace(da, kernels::matmul_nt(ag.dk, block.w_k));
  add_inplace(da, kernels::matmul_nt(ag.dv, block.w_v));
  meter.add(3 * flops::matmul(n, d, d) + 2 * flops::elementwise(n * d));
  if (c.qkv_hooked && hook) {
    if (auto branch = hook->qkv_backward(layer, ag.dq, ag.dk, ag.dv)) {
      add_inplace(da, *branch);
      meter.add(flops::elementwise(n * d));
    }
  }
  if (grads) {
    accumulate(grads->w_q, kernels::matmul_tn(c.attn_norm.y, ag.dq));
    accumulate(grads->w_k, kernels::matmul_tn(c.attn_norm.y, ag.dk));
    accumulate(grads->w_v, kernels::matmul_tn(c.attn_norm.y, ag.dv));
    meter.add(3 * flops::matmul(d, n, d));
  }
  auto attn_norm_g = kernels::rmsnorm_rows_backward(c.h_in, block.attn_gain, c.attn_norm.inv_rms, da);
  meter.add(flops::rmsnorm_backward(n, d));
  if (grads) accumulate(grads->attn_gain, attn_norm_g.dgain);
  Tensor<T> dh = dh1;
  add_inplace(dh, attn_norm_g.dx);
  meter.add(flops::elementwise(n * d));
  return dh.reshaped(dout_in.dims());
}

template <typename T>
Tensor<T> forward_trunk(const Tensor<T>& h0, const Trunk<T>& trunk, const ModelConfig& cfg,
                        const SeqShape& shape, PeftHook<T>* hook, TrunkCache<T>* cache, FlopMeter meter) {
  const std::size_t n = shape.tokens(), d = cfg.d_model;
  if (h0.size() != n * d) throw ShapeError("forward_trunk: input does not match batch shape");
  if (cache) cache->blocks.assign(trunk.blocks.size(), BlockCache<T>{});
  Tensor<T> h = h0.reshaped({n, d});
  for (std::size_t l = 0; l < trunk.blocks.size(); ++l) {
    h = forward_block(h, trunk.blocks[l], cfg, shape, l, hook, cache ? &cache->blocks[l] : nullptr, meter);
  }
  auto fin = kernels::rmsnorm_rows(h, trunk.final_gain, static_cast<T>(kRmsNormEps));
  Tensor<T> logits = kernels::matmul(fin.y, trunk.lm_head);
  meter.add(flops::rmsnorm(n, d) + flops::matmul(n, d, cfg.vocab));
  if (cache) {
    cache->final_in = std::move(h);
    cache->final_norm = std::move(fin);
  }
  return logits.reshaped({shape.batch, shape.seq, cfg.vocab});
}

template <typename T>
std::optional<Tensor<T>> backward_trunk(const TrunkCache<T>& cache, const Tensor<T>& dlogits_in,
                                        const Trunk<T>& trunk, const ModelConfig& cfg,
                                        const SeqShape& shape, PeftHook<T>* hook, TrunkGrads<T>* grads,
                                        FlopMeter meter) {
  const std::size_t n = shape.tokens(), d = cfg.d_model, v = cfg.vocab;
  const std::size_t layers = trunk.blocks.size();
  std::size_t stop = grads ? 0 : (hook ? hook->lowest_backward_layer(layers) : layers);
  if (stop >= layers) return std::nullopt;

  const Tensor<T> dlogits = dlogits_in.reshaped({n, v});
  Tensor<T> dfin = kernels::matmul_nt(dlogits, trunk.lm_head);
  meter.add(flops::matmul(n, v, d));
  if (grads) {
    accumulate(grads->lm_head, kernels::matmul_tn(cache.final_norm.y, dlogits));
    meter.add(flops::matmul(d, n, v));
  }
  auto fg = kernels::rmsnorm_rows_backward(cache.final_in, trunk.final_gain, cache.final_norm.inv_rms, dfin);
  meter.add(flops::rmsnorm_backward(n, d));
  if (grads) accumulate(grads->final_gain, fg.dgain);
  Tensor<T> dh = std::move(fg.dx);
  for (std::size_t l = layers; l-- > stop;) {
    dh = backward_block(cache.blocks[l], dh, trunk.blocks[l], cfg, shape, l, hook,
                        grads ? &grads->blocks[l] : nullptr, meter);
  }
  return dh;
}

template <typename T>
Tensor<T> forward_backbone(std::span<const std::int32_t> tokens, const SeqShape& shape,
                           const Backbone<T>& backbone, PeftHook<T>* hook) {
  Tensor<T> h0 = embed(tokens, shape, backbone.embedding, backbone.config);
  return forward_trunk<T>(h0, backbone.trunk, backbone.config, shape, hook, static_cast<TrunkCache<T>*>(nullptr));
}

template <typename T>
std::size_t argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

template <typename T>
std::vector<std::int32_t> generate(std::span<const std::int32_t> prompt, std::size_t n_new,
                                   const Backbone<T>& backbone, PeftHook<T>* hook) {
  if (prompt.empty()) throw InputError("generate: empty prompt");
  if (prompt.size() + n_new > backbone.config.max_seq) {
    throw InputError("generate: prompt plus new tokens exceeds max_seq");
  }
  std::vector<std::int32_t> seq(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < n_new; ++i) {
    const SeqShape shape{1, seq.size()};
    Tensor<T> logits = forward_backbone<T>(seq, shape, backbone, hook);
    const Tensor<T> flat = logits.reshaped({seq.size(), backbone.config.vocab});
    seq.push_back(static_cast<std::int32_t>(argmax<T>(flat.row(seq.size() - 1))));
  }
  return seq;
}

#define DLORA_INSTANTIATE(T)                                                                          \
  template struct DecoderBlock<T>;                                                                    \
  template struct Backbone<T>;                                                                        \
  template struct TrunkGrads<T>;                                                                      \
  template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t);                               \
  template Tensor<T> embed(std::span<const std::int32_t>, const SeqShape&, const Embedding<T>&,        \
                           const ModelConfig&, FlopMeter);                                            \
  template Tensor<T> forward_block(const Tensor<T>&, const DecoderBlock<T>&, const ModelConfig&,       \
                                   const SeqShape&, std::size_t, PeftHook<T>*, BlockCache<T>*,         \
                                   FlopMeter);                                                        \
  template Tensor<T> backward_block(const BlockCache<T>&, const Tensor<T>&, const DecoderBlock<T>&,    \
                                    const ModelConfig&, const SeqShape&, std::size_t, PeftHook<T>*,    \
                                    DecoderBlock<T>*, FlopMeter);                                     \
  template Tensor<T> forward_trunk(const Tensor<T>&, const Trunk<T>&, const ModelConfig&,              \
                                   const SeqShape&, PeftHook<T>*, TrunkCache<T>*, FlopMeter);         \
  template std::optional<Tensor<T>> backward_trunk(const TrunkCache<T>&, const Tensor<T>&,             \
                                                   const Trunk<T>&, const ModelConfig&,                \
                                                   const SeqShape&, PeftHook<T>*, TrunkGrads<T>*,      \
                                                   FlopMeter);                                        \
  template Tensor<T> forward_backbone(std::span<const std::int32_t>, const SeqShape&,                  \
                                      const Backbone<T>&, PeftHook<T>*);                              \
  template std::size_t argmax<T>(std::span<const T>);                                                 \
  template std::vector<std::int32_t> generate(std::span<const std::int32_t>, std::size_t,              \
                                              const Backbone<T>&, PeftHook<T>*);

DLORA_INSTANTIATE(float)
DLORA_INSTANTIATE(double)

}  // namespace dlora
