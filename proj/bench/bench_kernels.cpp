// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels against the serial reference kernels at desk-scale shapes.
// Range argument is the token count (batch * seq).

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "dlora/kernels.hpp"
#include "dlora/rng.hpp"

namespace dlora {
namespace {

constexpr std::size_t kModel = 64;
constexpr std::size_t kFf = 256;
constexpr std::size_t kSeq = 32;
constexpr std::size_t kHeads = 4;

Tensor<float> uniform(std::uint64_t seed, Dims dims) {
  Rng rng(seed);
  Tensor<float> t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(2.0 * rng.uniform() - 1.0);
  return t;
}

std::size_t tokens(const benchmark::State& state) { return static_cast<std::size_t>(state.range(0)); }

template <bool Omp>
void BM_Matmul(benchmark::State& state) {
  const auto a = uniform(1, {tokens(state), kModel});
  const auto b = uniform(2, {kModel, kFf});
  for (auto _ : state) {
    auto c = Omp ? kernels::matmul(a, b) : reference::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * tokens(state) * kModel * kFf));
}

template <bool Omp>
void BM_MatmulTn(benchmark::State& state) {
  const auto a = uniform(1, {tokens(state), kModel});
  const auto b = uniform(2, {tokens(state), kFf});
  for (auto _ : state) {
    auto c = Omp ? kernels::matmul_tn(a, b) : reference::matmul_tn(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
}

template <bool Omp>
void BM_Softmax(benchmark::State& state) {
  const auto x = uniform(3, {tokens(state), 512});
  for (auto _ : state) {
    auto y = Omp ? kernels::softmax_rows(x) : reference::softmax_rows(x);
    benchmark::DoNotOptimize(y.data().data());
  }
}

template <bool Omp>
void BM_RmsNorm(benchmark::State& state) {
  const auto x = uniform(4, {tokens(state), kModel});
  const auto gain = uniform(5, {1, kModel});
  for (auto _ : state) {
    auto r = Omp ? kernels::rmsnorm_rows(x, gain, 1e-6f) : reference::rmsnorm_rows(x, gain, 1e-6f);
    benchmark::DoNotOptimize(r.y.data().data());
  }
}

template <bool Omp>
void BM_Attention(benchmark::State& state) {
  const std::size_t n = tokens(state);
  const AttentionShape shape{n / kSeq, kSeq, kHeads};
  const auto q = uniform(6, {n, kModel});
  const auto k = uniform(7, {n, kModel});
  const auto v = uniform(8, {n, kModel});
  for (auto _ : state) {
    auto r = Omp ? kernels::causal_attention(q, k, v, shape) : reference::causal_attention(q, k, v, shape);
    benchmark::DoNotOptimize(r.out.data().data());
  }
}

template <bool Omp>
void BM_AttentionBackward(benchmark::State& state) {
  const std::size_t n = tokens(state);
  const AttentionShape shape{n / kSeq, kSeq, kHeads};
  const auto q = uniform(6, {n, kModel});
  const auto k = uniform(7, {n, kModel});
  const auto v = uniform(8, {n, kModel});
  const auto dout = uniform(9, {n, kModel});
  const auto fwd = reference::causal_attention(q, k, v, shape);
  for (auto _ : state) {
    auto g = Omp ? kernels::causal_attention_backward(q, k, v, fwd.probs, dout, shape)
                 : reference::causal_attention_backward(q, k, v, fwd.probs, dout, shape);
    benchmark::DoNotOptimize(g.dq.data().data());
  }
}

template <bool Omp>
void BM_CrossEntropy(benchmark::State& state) {
  const std::size_t n = tokens(state);
  const auto logits = uniform(10, {n, 256});
  std::vector<std::int32_t> targets(n);
  std::vector<std::uint8_t> mask(n, 1);
  for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<std::int32_t>((i * 37) % 256);
  for (auto _ : state) {
    auto r = Omp ? kernels::cross_entropy(logits, targets, mask) : reference::cross_entropy(logits, targets, mask);
    benchmark::DoNotOptimize(r.loss);
  }
}

#define DLORA_BENCH_PAIR(fn)                                        \
  BENCHMARK(fn<true>)->Name(#fn "/omp")->RangeMultiplier(4)->Range(32, 2048);  \
  BENCHMARK(fn<false>)->Name(#fn "/serial")->RangeMultiplier(4)->Range(32, 2048)

DLORA_BENCH_PAIR(BM_Matmul);
DLORA_BENCH_PAIR(BM_MatmulTn);
DLORA_BENCH_PAIR(BM_Softmax);
DLORA_BENCH_PAIR(BM_RmsNorm);
DLORA_BENCH_PAIR(BM_Attention);
DLORA_BENCH_PAIR(BM_AttentionBackward);
DLORA_BENCH_PAIR(BM_CrossEntropy);

}  // namespace
}  // namespace dlora

BENCHMARK_MAIN();
