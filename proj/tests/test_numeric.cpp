// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dlora/kernels.hpp"
#include "dlora/optim.hpp"
#include "dlora/rng.hpp"
#include "support.hpp"

namespace dlora {
namespace {

using test::random_tensor;
using test::rel_error;

TEST(Rng, SplitMixReferenceVector) {
  Rng rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(1234), b(1234), c(1235);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndBelowRanges) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(rng.below(7), 7u);
  }
}

TEST(Rng, UniformUsesTop53Bits) {
  Rng a(99), b(99);
  const std::uint64_t w = a.next_u64();
  EXPECT_EQ(b.uniform(), std::ldexp(static_cast<double>(w >> 11), -53));
}

TEST(SeededNormal, BoxMullerPairFromTwoUniforms) {
  Rng words(17);
  const double u1 = std::ldexp(static_cast<double>(words.next_u64() >> 11), -53);
  const double u2 = std::ldexp(static_cast<double>(words.next_u64() >> 11), -53);
  const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  Rng rng(17);
  const auto t = seeded_normal<double>(rng, {2});
  EXPECT_DOUBLE_EQ(t[0], r * std::cos(2.0 * std::numbers::pi * u2));
  EXPECT_DOUBLE_EQ(t[1], r * std::sin(2.0 * std::numbers::pi * u2));
}

TEST(SeededNormal, DeterministicAndStandard) {
  Rng a(3), b(3);
  const auto x = seeded_normal<double>(a, {100000});
  EXPECT_TRUE(bit_identical(x, seeded_normal<double>(b, {100000})));
  double mean = 0.0, var = 0.0;
  for (double v : x.data()) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  EXPECT_LT(std::abs(mean), 0.02);
  EXPECT_LT(std::abs(var - 1.0), 0.05);
}

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}).reshaped({3}), ShapeError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_TRUE(t.all_finite());
  t[4] = std::numeric_limits<float>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(Matmul, HandExamples) {
  const Tensor<double> a({2, 2}, {1, 2, 3, 4});
  const Tensor<double> id({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(kernels::matmul(a, id), a);
  EXPECT_EQ(kernels::matmul(a, Tensor<double>({2, 1}, {5, 6})), Tensor<double>({2, 1}, {17, 39}));
  EXPECT_EQ(kernels::matmul(Tensor<double>({1, 1}, {2}), Tensor<double>({1, 1}, {3})),
            Tensor<double>({1, 1}, {6}));
}

TEST(Matmul, ShapeErrors) {
  const Tensor<float> a({2, 3}), b({2, 3});
  EXPECT_THROW(kernels::matmul(a, b), ShapeError);
  EXPECT_THROW(reference::matmul(a, b), ShapeError);
  EXPECT_THROW(kernels::matmul_tn(a, Tensor<float>({3, 2})), ShapeError);
  EXPECT_THROW(kernels::matmul_nt(a, Tensor<float>({3, 2})), ShapeError);
}

TEST(Matmul, MatchesNaiveOracle) {
  const auto a = random_tensor(1, {7, 5}), b = random_tensor(2, {5, 9}), c = random_tensor(3, {7, 9});
  EXPECT_LT(rel_error(kernels::matmul(a, b), test::naive::matmul(a, b)), 1e-14);
  EXPECT_LT(rel_error(kernels::matmul_nt(a, test::naive::transpose(b)), test::naive::matmul(a, b)), 1e-14);
  EXPECT_LT(rel_error(kernels::matmul_tn(a, c), test::naive::matmul(test::naive::transpose(a), c)), 1e-14);
}

TEST(Matmul, BackwardContract) {
  auto a = random_tensor(4, {4, 3});
  auto b = random_tensor(5, {3, 5});
  const auto w = random_tensor(6, {4, 5});
  auto f = [&] { return test::weighted_sum(kernels::matmul(a, b), w); };
  EXPECT_LT(rel_error(kernels::matmul_nt(w, b), test::numeric_grad(a, f)), 1e-8);
  EXPECT_LT(rel_error(kernels::matmul_tn(a, w), test::numeric_grad(b, f)), 1e-8);
}

TEST(Softmax, HandExamples) {
  const auto y = kernels::softmax_rows(Tensor<double>({3, 2}, {0, 0, std::log(2.0), 0, 1000, 1000}));
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  EXPECT_NEAR(y(1, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(y(2, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(2, 1), 0.5);
}

TEST(Softmax, RowsSumToOne) {
  const auto x = test::cast<float>(random_tensor(7, {16, 33}, -20, 20));
  const auto y = kernels::softmax_rows(x);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0.0;
    for (float v : y.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, MatchesOracleAndGradient) {
  auto x = random_tensor(8, {8, 8}, -3, 3);
  EXPECT_LT(rel_error(kernels::softmax_rows(x), test::naive::softmax_rows(x)), 1e-14);
  const auto w = random_tensor(9, {8, 8});
  auto f = [&] { return test::weighted_sum(kernels::softmax_rows(x), w); };
  const auto analytic = kernels::softmax_rows_backward(kernels::softmax_rows(x), w);
  EXPECT_LT(rel_error(analytic, test::numeric_grad(x, f)), 1e-5);
}

TEST(RmsNorm, HandExamples) {
  const Tensor<double> ones({2}, {1, 1});
  const auto y = kernels::rmsnorm_rows(Tensor<double>({1, 2}, {3, 4}), ones, 0.0).y;
  EXPECT_NEAR(y[0], 3.0 / std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(y[1], 4.0 / std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(y[0], 0.8485, 1e-4);
  EXPECT_NEAR(y[1], 1.1314, 1e-4);
  const auto z = kernels::rmsnorm_rows(Tensor<double>({1, 2}), ones, 1e-5).y;
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
}

TEST(RmsNorm, LinearInGainAndStableInEps) {
  const auto x = random_tensor(10, {6, 8}, 1, 3);
  const auto gain = random_tensor(11, {8});
  Tensor<double> gain3 = gain;
  for (auto& g : gain3.data()) g *= 3.0;
  const auto y = kernels::rmsnorm_rows(x, gain, 1e-5).y;
  const auto y3 = kernels::rmsnorm_rows(x, gain3, 1e-5).y;
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y3[i], 3.0 * y[i], 1e-12);
  const auto y0 = kernels::rmsnorm_rows(x, gain, 0.0).y;
  EXPECT_LT(rel_error(y, y0), 1e-3);
  EXPECT_LT(rel_error(y, test::naive::rmsnorm_rows(x, gain, 1e-5)), 1e-14);
}

TEST(RmsNorm, BackwardMatchesFiniteDifferences) {
  auto x = random_tensor(12, {8, 8});
  auto gain = random_tensor(13, {8}, 0.5, 1.5);
  const auto w = random_tensor(14, {8, 8});
  auto f = [&] { return test::weighted_sum(kernels::rmsnorm_rows(x, gain, 1e-5).y, w); };
  const auto fwd = kernels::rmsnorm_rows(x, gain, 1e-5);
  const auto g = kernels::rmsnorm_rows_backward(x, gain, fwd.inv_rms, w);
  EXPECT_LT(rel_error(g.dx, test::numeric_grad(x, f)), 1e-5);
  EXPECT_LT(rel_error(g.dgain.reshaped({8}), test::numeric_grad(gain, f)), 1e-5);
}

TEST(Silu, MatchesOracleAndGradient) {
  auto z = random_tensor(15, {8, 8}, -4, 4);
  EXPECT_LT(rel_error(kernels::silu(z), test::naive::silu(z)), 1e-14);
  const auto w = random_tensor(16, {8, 8});
  auto f = [&] { return test::weighted_sum(kernels::silu(z), w); };
  EXPECT_LT(rel_error(kernels::silu_backward(z, w), test::numeric_grad(z, f)), 1e-5);
}

TEST(Attention, MatchesOracle) {
  const AttentionShape shape{2, 5, 2};
  const auto q = random_tensor(17, {10, 8}), k = random_tensor(18, {10, 8}), v = random_tensor(19, {10, 8});
  const auto res = kernels::causal_attention(q, k, v, shape);
  EXPECT_LT(rel_error(res.out, test::naive::causal_attention(q, k, v, 2, 5, 2)), 1e-13);
  for (std::size_t r = 0; r < res.probs.rows(); ++r) {
    const std::size_t i = r % shape.seq;
    for (std::size_t j = i + 1; j < shape.seq; ++j) EXPECT_EQ(res.probs(r, j), 0.0);
  }
}

TEST(Attention, BackwardMatchesFiniteDifferences) {
  const AttentionShape shape{1, 8, 2};
  auto q = random_tensor(20, {8, 8}), k = random_tensor(21, {8, 8}), v = random_tensor(22, {8, 8});
  const auto w = random_tensor(23, {8, 8});
  auto f = [&] { return test::weighted_sum(kernels::causal_attention(q, k, v, shape).out, w); };
  const auto fwd = kernels::causal_attention(q, k, v, shape);
  const auto g = kernels::causal_attention_backward(q, k, v, fwd.probs, w, shape);
  EXPECT_LT(rel_error(g.dq, test::numeric_grad(q, f)), 1e-5);
  EXPECT_LT(rel_error(g.dk, test::numeric_grad(k, f)), 1e-5);
  EXPECT_LT(rel_error(g.dv, test::numeric_grad(v, f)), 1e-5);
}

TEST(CrossEntropy, HandExamples) {
  const auto uniform = cross_entropy(Tensor<double>({3, 4}), std::vector<std::int32_t>{0, 1, 3});
  EXPECT_NEAR(uniform.loss, std::log(4.0), 1e-15);
  const auto sharp = cross_entropy(Tensor<double>({1, 2}, {10, -10}), std::vector<std::int32_t>{0});
  EXPECT_NEAR(sharp.loss, std::log1p(std::exp(-20.0)), 1e-15);
  EXPECT_NEAR(sharp.loss, 2.06e-9, 0.01e-9);
}

TEST(CrossEntropy, GradientRowsSumToZeroAndMatchDefinition) {
  auto logits = random_tensor(24, {8, 8}, -2, 2);
  const std::vector<std::int32_t> targets{0, 3, 7, 1, 1, 5, 2, 6};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 1, 1};
  const auto res = kernels::cross_entropy(logits, targets, mask);
  EXPECT_NEAR(res.loss, test::naive::cross_entropy(logits, targets, mask), 1e-14);
  for (std::size_t r = 0; r < 8; ++r) {
    double s = 0.0;
    for (double v : res.dlogits.row(r)) s += v;
    EXPECT_NEAR(s, 0.0, 1e-15);
    if (!mask[r]) {
      for (double v : res.dlogits.row(r)) EXPECT_EQ(v, 0.0);
    }
  }
  auto f = [&] { return test::naive::cross_entropy(logits, targets, mask); };
  EXPECT_LT(rel_error(res.dlogits, test::numeric_grad(logits, f)), 1e-5);
}

TEST(CrossEntropy, Errors) {
  const Tensor<float> logits({2, 3});
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{0, 3}), InputError);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{-1, 0}), InputError);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{0}), ShapeError);
  const std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(kernels::cross_entropy(logits, std::vector<std::int32_t>{0, 1}, none), InputError);
}

template <typename T>
void expect_parallel_matches_serial() {
  const auto a = test::cast<T>(random_tensor(30, {37, 19}, -2, 2));
  const auto b = test::cast<T>(random_tensor(31, {19, 23}, -2, 2));
  const auto c = test::cast<T>(random_tensor(32, {37, 23}, -2, 2));
  EXPECT_TRUE(bit_identical(kernels::matmul(a, b), reference::matmul(a, b)));
  EXPECT_TRUE(bit_identical(kernels::matmul_nt(a, a), reference::matmul_nt(a, a)));
  EXPECT_TRUE(bit_identical(kernels::matmul_tn(a, c), reference::matmul_tn(a, c)));
  const auto y = kernels::softmax_rows(c);
  EXPECT_TRUE(bit_identical(y, reference::softmax_rows(c)));
  EXPECT_TRUE(bit_identical(kernels::softmax_rows_backward(y, c), reference::softmax_rows_backward(y, c)));
  const auto gain = test::cast<T>(random_tensor(33, {23}, 0.5, 1.5));
  const auto rn = kernels::rmsnorm_rows(c, gain, T(1e-5));
  const auto rr = reference::rmsnorm_rows(c, gain, T(1e-5));
  EXPECT_TRUE(bit_identical(rn.y, rr.y));
  EXPECT_TRUE(bit_identical(rn.inv_rms, rr.inv_rms));
  const auto gn = kernels::rmsnorm_rows_backward(c, gain, rn.inv_rms, c);
  const auto gr = reference::rmsnorm_rows_backward(c, gain, rr.inv_rms, c);
  EXPECT_TRUE(bit_identical(gn.dx, gr.dx));
  EXPECT_TRUE(bit_identical(gn.dgain, gr.dgain));
  EXPECT_TRUE(bit_identical(kernels::silu(c), reference::silu(c)));
  EXPECT_TRUE(bit_identical(kernels::silu_backward(c, c), reference::silu_backward(c, c)));

  const AttentionShape shape{3, 7, 4};
  const auto q = test::cast<T>(random_tensor(34, {21, 16}, -2, 2));
  const auto k = test::cast<T>(random_tensor(35, {21, 16}, -2, 2));
  const auto v = test::cast<T>(random_tensor(36, {21, 16}, -2, 2));
  const auto an = kernels::causal_attention(q, k, v, shape);
  const auto ar = reference::causal_attention(q, k, v, shape);
  EXPECT_TRUE(bit_identical(an.out, ar.out));
  EXPECT_TRUE(bit_identical(an.probs, ar.probs));
  const auto bn = kernels::causal_attention_backward(q, k, v, an.probs, v, shape);
  const auto br = reference::causal_attention_backward(q, k, v, ar.probs, v, shape);
  EXPECT_TRUE(bit_identical(bn.dq, br.dq));
  EXPECT_TRUE(bit_identical(bn.dk, br.dk));
  EXPECT_TRUE(bit_identical(bn.dv, br.dv));

  std::vector<std::int32_t> targets(37);
  std::vector<std::uint8_t> mask(37);
  for (std::size_t i = 0; i < 37; ++i) {
    targets[i] = static_cast<std::int32_t>((i * 7) % 23);
    mask[i] = i % 3 != 0;
  }
  const auto cn = kernels::cross_entropy(c, targets, mask);
  const auto cr = reference::cross_entropy(c, targets, mask);
  EXPECT_EQ(cn.loss, cr.loss);
  EXPECT_TRUE(bit_identical(cn.dlogits, cr.dlogits));
}

TEST(Kernels, ParallelBitIdenticalToSerialFloat) { expect_parallel_matches_serial<float>(); }
TEST(Kernels, ParallelBitIdenticalToSerialDouble) { expect_parallel_matches_serial<double>(); }

TEST(Kernels, RepeatedEvaluationIsBitIdentical) {
  const auto a = test::cast<float>(random_tensor(40, {64, 64}));
  const auto first = kernels::matmul(a, a);
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(bit_identical(first, kernels::matmul(a, a)));
}

TEST(Elementwise, Helpers) {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  add_row_bias(a, Tensor<double>({2}, {10, 20}));
  EXPECT_EQ(a, Tensor<double>({2, 2}, {11, 22, 13, 24}));
  EXPECT_EQ(column_sums(a), Tensor<double>({2}, {24, 46}));
  scale_inplace(a, 0.5);
  EXPECT_EQ(a, Tensor<double>({2, 2}, {5.5, 11, 6.5, 12}));
  EXPECT_THROW(add(a, Tensor<double>({4})), ShapeError);
}

TEST(CosineLr, Schedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 10), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 5, 10), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(0.1, 10, 10), 0.0, 1e-17);
  EXPECT_NEAR(cosine_lr(0.1, 20, 10), 0.0, 1e-17);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  AdamW opt(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0, 100});
  Tensor<double> p({1});
  std::vector<Tensor<double>*> params{&p};
  auto moments = AdamWMoments<double>::zeros_like(std::span<Tensor<double>* const>(params));
  const std::vector<Tensor<double>> grads{Tensor<double>({1}, {1.0})};
  opt.begin_step();
  opt.update(std::span<Tensor<double>* const>(params), std::span<const Tensor<double>>(grads), moments);
  EXPECT_NEAR(p[0], -0.1, 1e-8);
}

TEST(AdamW, MatchesHandRolledRecurrence) {
  const AdamWConfig cfg{0.01, 0.9, 0.999, 1e-8, 0.1, 3};
  AdamW opt(cfg);
  Tensor<double> p({2}, {0.5, -1.0});
  std::vector<Tensor<double>*> params{&p};
  auto moments = AdamWMoments<double>::zeros_like(std::span<Tensor<double>* const>(params));
  const double g[3][2] = {{0.3, -0.2}, {0.1, 0.4}, {-0.5, 0.05}};
  double x[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t) {
    const double lr = 0.01 * 0.5 * (1 + std::cos(std::numbers::pi * (t - 1) / 3.0));
    for (int j = 0; j < 2; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * g[t - 1][j];
      v[j] = 0.999 * v[j] + 0.001 * g[t - 1][j] * g[t - 1][j];
      const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
      x[j] = x[j] * (1 - lr * 0.1) - lr * mh / (std::sqrt(vh) + 1e-8);
    }
    const std::vector<Tensor<double>> grads{Tensor<double>({2}, {g[t - 1][0], g[t - 1][1]})};
    opt.begin_step();
    opt.update(std::span<Tensor<double>* const>(params), std::span<const Tensor<double>>(grads), moments);
  }
  EXPECT_NEAR(p[0], x[0], 1e-15);
  EXPECT_NEAR(p[1], x[1], 1e-15);
}

TEST(AdamW, RejectsMismatchedInputs) {
  AdamW opt(AdamWConfig{});
  Tensor<double> p({2});
  std::vector<Tensor<double>*> params{&p};
  auto moments = AdamWMoments<double>::zeros_like(std::span<Tensor<double>* const>(params));
  const std::vector<Tensor<double>> grads{Tensor<double>({3})};
  EXPECT_THROW(opt.update(std::span<Tensor<double>* const>(params), std::span<const Tensor<double>>(grads), moments),
               std::logic_error);
  opt.begin_step();
  EXPECT_THROW(opt.update(std::span<Tensor<double>* const>(params), std::span<const Tensor<double>>(grads), moments),
               ShapeError);
}

}  // namespace
}  // namespace dlora
