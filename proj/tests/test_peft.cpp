// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dlora/peft.hpp"
#include "support.hpp"

namespace dlora {
namespace {

using test::rel_error;

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.vocab = 13;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.n_layers = 3;
  mc.max_seq = 6;
  mc.precision = Precision::F64;
  mc.seed = 2;
  return mc;
}

LoraProjection<double> random_projection(std::uint64_t seed, std::size_t r, std::size_t d, double alpha) {
  return {test::random_tensor(seed, {r, d}), test::random_tensor(seed + 1, {r, d}), alpha};
}

TEST(PeftConfig, Validation) {
  PeftConfig pc;
  EXPECT_NO_THROW(pc.validate());
  pc.rank = 0;
  EXPECT_THROW(pc.validate(), InputError);
  pc = PeftConfig{};
  pc.adapter_dim = 0;
  EXPECT_THROW(pc.validate(), InputError);
}

TEST(LoraDelta, ScalarHandExample) {
  const LoraProjection<double> p{Tensor<double>({1, 1}, {3}), Tensor<double>({1, 1}, {5}), 2.0};
  const auto delta = lora_delta(Tensor<double>({1, 1}, {7}), p);
  EXPECT_EQ(delta[0], 210.0);
  const auto g = lora_backward(Tensor<double>({1, 1}, {7}), Tensor<double>({1, 1}, {0.5}), p);
  EXPECT_EQ(g.up[0], 2.0 * 21.0 * 0.5);
  EXPECT_EQ(g.down[0], 2.0 * 5.0 * 7.0 * 0.5);
  EXPECT_EQ(g.dh[0], 2.0 * 3.0 * 5.0 * 0.5);
}

TEST(LoraDelta, ZeroUpOrZeroAlphaIsNoOp) {
  const auto h = test::random_tensor(1, {5, 8});
  auto p = random_projection(2, 4, 8, 1.0);
  p.up.fill(0.0);
  EXPECT_EQ(lora_delta(h, p), Tensor<double>(Dims{5, 8}));
  auto q = random_projection(3, 4, 8, 0.0);
  EXPECT_EQ(lora_delta(h, q), Tensor<double>(Dims{5, 8}));
}

TEST(LoraDelta, MatchesDefinitionAndIsLinear) {
  const auto h1 = test::random_tensor(4, {5, 8}), h2 = test::random_tensor(5, {5, 8});
  const auto p = random_projection(6, 4, 8, 1.7);
  auto expected = test::naive::matmul(test::naive::matmul(h1, test::naive::transpose(p.down)), p.up);
  for (auto& v : expected.data()) v *= 1.7;
  EXPECT_LT(rel_error(lora_delta(h1, p), expected), 1e-14);

  const auto pf = LoraProjection<float>{test::cast<float>(p.down), test::cast<float>(p.up), 1.7f};
  const auto f1 = test::cast<float>(h1), f2 = test::cast<float>(h2);
  const auto lhs = lora_delta(add(f1, f2), pf);
  const auto rhs = add(lora_delta(f1, pf), lora_delta(f2, pf));
  double num = 0, den = 0;
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    num += std::pow(static_cast<double>(lhs[i]) - rhs[i], 2);
    den += std::pow(static_cast<double>(rhs[i]), 2);
  }
  EXPECT_LT(std::sqrt(num / den), 1e-6);
}

TEST(LoraDelta, ShapeErrors) {
  const auto p = random_projection(7, 4, 8, 1.0);
  EXPECT_THROW(lora_delta(test::random_tensor(8, {5, 7}), p), ShapeError);
  EXPECT_THROW(lora_backward(test::random_tensor(8, {5, 8}), test::random_tensor(9, {4, 8}), p), ShapeError);
}

TEST(LoraDelta, FlopCount) {
  CostLedger ledger;
  const auto p = random_projection(10, 4, 8, 1.0);
  lora_delta(test::random_tensor(11, {5, 8}), p, FlopMeter{&ledger, Node::Edge, CostClass::Module});
  EXPECT_EQ(ledger.totals().edge_flops, 4u * 5 * 4 * 8);
  EXPECT_EQ(ledger.totals().edge_module_flops, 4u * 5 * 4 * 8);
}

TEST(LoraBackward, ZeroUpstreamGivesZero) {
  const auto p = random_projection(12, 4, 8, 1.3);
  const auto g = lora_backward(test::random_tensor(13, {5, 8}), Tensor<double>({5, 8}), p);
  for (const auto* t : {&g.up, &g.down, &g.dh}) {
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(LoraBackward, FiniteDifferences) {
  auto h = test::random_tensor(14, {6, 8});
  auto p = random_projection(15, 4, 8, 1.3);
  const auto w = test::random_tensor(16, {6, 8});
  auto f = [&] { return test::weighted_sum(lora_delta(h, p), w); };
  const auto g = lora_backward(h, w, p);
  EXPECT_LT(rel_error(g.up, test::numeric_grad(p.up, f)), 1e-5);
  EXPECT_LT(rel_error(g.down, test::numeric_grad(p.down, f)), 1e-5);
  EXPECT_LT(rel_error(g.dh, test::numeric_grad(h, f)), 1e-5);
}

SerialAdapter<double> random_adapter(std::uint64_t seed, std::size_t d, std::size_t m) {
  return {test::random_tensor(seed, {d, m}), test::random_tensor(seed + 1, {m}), test::random_tensor(seed + 2, {m, d}),
          test::random_tensor(seed + 3, {d})};
}

TEST(Adapter, HandExampleAndIdentity) {
  const SerialAdapter<double> a{Tensor<double>({1, 1}, {1}), Tensor<double>({1}), Tensor<double>({1, 1}, {3}),
                                Tensor<double>({1})};
  const double silu2 = 2.0 / (1.0 + std::exp(-2.0));
  const auto out = adapter_forward(Tensor<double>({1, 1}, {2}), a);
  EXPECT_NEAR(out[0], 2.0 + 3.0 * silu2, 1e-15);
  EXPECT_NEAR(out[0], 7.2848, 1e-4);

  SerialAdapter<double> zero = random_adapter(20, 8, 4);
  for (auto* t : {&zero.w_a, &zero.b_a, &zero.w_b, &zero.b_b}) t->fill(0.0);
  const auto h = test::random_tensor(21, {5, 8});
  EXPECT_EQ(adapter_forward(h, zero), h);
}

TEST(Adapter, FiniteDifferences) {
  auto h = test::random_tensor(22, {6, 8});
  auto a = random_adapter(23, 8, 4);
  const auto w = test::random_tensor(27, {6, 8});
  auto f = [&] { return test::weighted_sum(adapter_forward(h, a), w); };
  const auto g = adapter_backward(h, w, a);
  EXPECT_LT(rel_error(g.w_a, test::numeric_grad(a.w_a, f)), 1e-5);
  EXPECT_LT(rel_error(g.b_a.reshaped(a.b_a.dims()), test::numeric_grad(a.b_a, f)), 1e-5);
  EXPECT_LT(rel_error(g.w_b, test::numeric_grad(a.w_b, f)), 1e-5);
  EXPECT_LT(rel_error(g.b_b.reshaped(a.b_b.dims()), test::numeric_grad(a.b_b, f)), 1e-5);
  EXPECT_LT(rel_error(g.dh, test::numeric_grad(h, f)), 1e-5);
  // The branch-only gradient differs from the full one by the residual path.
  const auto branch = adapter_branch_backward(h, w, a);
  EXPECT_LT(rel_error(add(branch.dh, w), g.dh), 1e-15);
}

TEST(ModuleNorm, Examples) {
  const auto mc = tiny_model();
  PeftConfig pc;
  pc.kind = PeftKind::Adapter;
  pc.adapter_dim = 2;
  auto pool = init_pool<double>(pc, mc, 1);
  auto& m = pool[0];
  for (auto* t : m.params()) t->fill(0.0);
  EXPECT_EQ(module_l2_norm(m), 0.0);
  m.params()[1]->operator[](0) = 3.0;
  m.params()[3]->operator[](2) = 4.0;
  EXPECT_EQ(module_l2_norm(m), 5.0);
}

TEST(ModuleNorm, JointOverQkvAndHomogeneous) {
  const auto mc = tiny_model();
  auto pool = init_pool<double>(PeftConfig{}, mc, 3);
  auto& m = pool[1];
  for (auto* t : m.params()) {
    const auto r = test::random_tensor(t->size(), t->dims());
    *t = r;
  }
  long double ss = 0;
  for (const auto* t : std::as_const(m).params()) {
    for (double v : t->data()) ss += static_cast<long double>(v) * v;
  }
  const double n = module_l2_norm(m);
  EXPECT_NEAR(n, static_cast<double>(std::sqrt(ss)), 1e-13);
  EXPECT_GT(n, 0.0);
  for (auto* t : m.params()) {
    for (auto& v : t->data()) v *= -2.5;
  }
  EXPECT_NEAR(module_l2_norm(m), 2.5 * n, 1e-12);
}

TEST(InitPool, OnePerBlockAndNoOp) {
  const auto mc = tiny_model();
  const auto pool = init_pool<double>(PeftConfig{}, mc, 7);
  ASSERT_EQ(pool.size(), mc.n_layers);
  double down_ss = 0;
  std::size_t down_n = 0;
  for (std::size_t l = 0; l < pool.size(); ++l) {
    EXPECT_EQ(pool[l].layer, l);
    EXPECT_TRUE(pool[l].active());
    const auto& trip = std::get<LoraTriplet<double>>(pool[l].body);
    for (const auto& p : trip.qkv) {
      EXPECT_EQ(p.down.dims(), (Dims{4, 8}));
      for (double v : p.up.data()) EXPECT_EQ(v, 0.0);
      for (double v : p.down.data()) down_ss += v * v;
      down_n += p.down.size();
    }
  }
  EXPECT_NEAR(std::sqrt(down_ss / down_n), 0.02, 0.006);

  const auto b = Backbone<double>::init(mc);
  PeftTrainer<double> trainer(pool, AdamWConfig{}, FrozenPolicy::SkipFrozen);
  trainer.begin_step();
  LocalPeftHook<double> hook(trainer);
  const std::vector<std::int32_t> toks{1, 2, 3, 4, 5, 6};
  EXPECT_TRUE(bit_identical(forward_backbone<double>(toks, SeqShape{1, 6}, b, &hook),
                            forward_backbone<double>(toks, SeqShape{1, 6}, b, nullptr)));
}

TEST(InitPool, AdapterInitIsNoOp) {
  const auto mc = tiny_model();
  PeftConfig pc;
  pc.kind = PeftKind::Adapter;
  const auto pool = init_pool<double>(pc, mc, 7);
  const auto b = Backbone<double>::init(mc);
  PeftTrainer<double> trainer(pool, AdamWConfig{}, FrozenPolicy::SkipFrozen);
  trainer.begin_step();
  LocalPeftHook<double> hook(trainer);
  const std::vector<std::int32_t> toks{1, 2, 3, 4, 5, 6};
  EXPECT_TRUE(bit_identical(forward_backbone<double>(toks, SeqShape{1, 6}, b, &hook),
                            forward_backbone<double>(toks, SeqShape{1, 6}, b, nullptr)));
}

/// Runs `steps` local training steps and returns the per-step losses.
std::vector<double> train_locally(PeftTrainer<double>& trainer, const Backbone<double>& b, std::size_t steps) {
  const auto& mc = b.config;
  const SeqShape shape{2, 6};
  std::vector<std::int32_t> toks(12), targets(12);
  for (std::size_t i = 0; i < 12; ++i) {
    toks[i] = static_cast<std::int32_t>((i * 5 + 1) % mc.vocab);
    targets[i] = static_cast<std::int32_t>((i * 3 + 2) % mc.vocab);
  }
  const std::vector<std::uint8_t> mask(12, 1);
  std::vector<double> losses;
  for (std::size_t s = 0; s < steps; ++s) {
    trainer.begin_step();
    LocalPeftHook<double> hook(trainer);
    const auto h0 = embed<double>(toks, shape, b.embedding, mc);
    TrunkCache<double> cache;
    const auto logits = forward_trunk<double>(h0, b.trunk, mc, shape, &hook, &cache);
    const auto ce = kernels::cross_entropy(logits.reshaped({12, mc.vocab}), targets, mask);
    backward_trunk<double>(cache, ce.dlogits, b.trunk, mc, shape, &hook, static_cast<TrunkGrads<double>*>(nullptr));
    trainer.end_step();
    losses.push_back(ce.loss);
  }
  return losses;
}

TEST(PeftTrainer, KilledModulesAndBackboneStayFrozen) {
  for (auto policy : {FrozenPolicy::SkipFrozen, FrozenPolicy::ComputeFrozenOnEdge}) {
    const auto mc = tiny_model();
    const auto b = Backbone<double>::init(mc);
    const auto before = b;
    auto pool = init_pool<double>(PeftConfig{}, mc, 4);
    PeftTrainer<double> trainer(pool, AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 0.01, 10}, policy);
    const std::vector<ModuleStatus> status{ModuleStatus::Active, ModuleStatus::Killed, ModuleStatus::Active};
    trainer.set_status(status);
    EXPECT_EQ(trainer.active_count(), 2u);
    EXPECT_EQ(trainer.in_forward(1), policy == FrozenPolicy::ComputeFrozenOnEdge);
    EXPECT_FALSE(trainer.trains(1));
    const auto losses = train_locally(trainer, b, 5);
    EXPECT_LT(losses.back(), losses.front());
    for (std::size_t l = 0; l < 3; ++l) {
      const auto now = trainer.pool()[l].params();
      const auto then = std::as_const(pool[l]).params();
      bool same = true;
      for (std::size_t i = 0; i < now.size(); ++i) same &= bit_identical(*now[i], *then[i]);
      EXPECT_EQ(same, l == 1) << "layer " << l;
    }
    const auto ta = b.tensors(), tb = before.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(bit_identical(*ta[i], *tb[i]));
  }
}

TEST(PeftTrainer, KillThenReviveKeepsParameters) {
  const auto mc = tiny_model();
  const auto b = Backbone<double>::init(mc);
  PeftTrainer<double> trainer(init_pool<double>(PeftConfig{}, mc, 4), AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 0.01, 10},
                              FrozenPolicy::ComputeFrozenOnEdge);
  train_locally(trainer, b, 2);
  const auto at_kill = trainer.pool()[2];
  trainer.set_status(std::vector<ModuleStatus>{ModuleStatus::Active, ModuleStatus::Active, ModuleStatus::Killed});
  train_locally(trainer, b, 3);
  trainer.set_status(std::vector<ModuleStatus>(3, ModuleStatus::Active));
  const auto a = std::as_const(at_kill).params();
  const auto now = trainer.pool()[2].params();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_identical(*a[i], *now[i]));
}

TEST(PeftTrainer, GradientsThroughTheBackboneMatchFiniteDifferences) {
  ModelConfig mc = tiny_model();
  mc.d_model = 16;
  mc.n_layers = 2;
  const auto b = Backbone<double>::init(mc);
  for (auto kind : {PeftKind::Lora, PeftKind::Adapter}) {
    PeftConfig pc;
    pc.kind = kind;
    pc.alpha = 1.5;
    pc.adapter_dim = 4;
    auto pool = init_pool<double>(pc, mc, 9);
    std::uint64_t seed = 100;
    for (auto& m : pool) {
      for (auto* t : m.params()) *t = test::random_tensor(seed++, t->dims(), -0.3, 0.3);
    }
    const SeqShape shape{2, 4};
    const std::vector<std::int32_t> toks{1, 5, 2, 9, 0, 3, 7, 7}, targets{5, 2, 9, 0, 3, 7, 7, 1};
    const std::vector<std::uint8_t> mask(8, 1);
    auto loss_of = [&](const PeftPool<double>& p) {
      PeftTrainer<double> tr(p, AdamWConfig{}, FrozenPolicy::SkipFrozen);
      tr.begin_step();
      LocalPeftHook<double> hook(tr);
      const auto logits = forward_backbone<double>(toks, shape, b, &hook);
      return kernels::cross_entropy(logits.reshaped({8, mc.vocab}), targets, mask).loss;
    };
    PeftTrainer<double> tr(pool, AdamWConfig{}, FrozenPolicy::SkipFrozen);
    tr.set_apply_updates(false);
    tr.begin_step();
    LocalPeftHook<double> hook(tr);
    const auto h0 = embed<double>(toks, shape, b.embedding, mc);
    TrunkCache<double> cache;
    const auto logits = forward_trunk<double>(h0, b.trunk, mc, shape, &hook, &cache);
    const auto ce = kernels::cross_entropy(logits.reshaped({8, mc.vocab}), targets, mask);
    backward_trunk<double>(cache, ce.dlogits, b.trunk, mc, shape, &hook, static_cast<TrunkGrads<double>*>(nullptr));
    for (std::size_t l = 0; l < pool.size(); ++l) {
      auto params = pool[l].params();
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto f = [&] { return loss_of(pool); };
        const auto numeric = test::numeric_grad(*params[k], f);
        EXPECT_LT(rel_error(tr.last_grads()[l][k].reshaped(numeric.dims()), numeric), 1e-5)
            << "kind " << static_cast<int>(kind) << " layer " << l << " tensor " << k;
      }
    }
  }
}

TEST(LowestActiveLayer, FindsFirstTrainedBlock) {
  using S = ModuleStatus;
  EXPECT_EQ(lowest_active_layer(std::vector<S>{S::Killed, S::Active, S::Active}), 1u);
  EXPECT_EQ(lowest_active_layer(std::vector<S>{S::Killed, S::Killed}), 2u);
  EXPECT_EQ(lowest_active_layer(std::vector<S>{S::Active}), 0u);
}

}  // namespace
}  // namespace dlora
