// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>

#include "dlora/tensor.hpp"

// Dense kernels. Every reduction accumulates in ascending index order in the
// working precision, so the OpenMP kernels (parallel over independent output
// rows) and the serial reference kernels produce bit-identical results.

namespace dlora {

/// Attention geometry: rows of Q/K/V are `batch * seq` tokens, columns are
/// split into `heads` contiguous blocks.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
};

template <typename T>
struct AttentionResult {
  Tensor<T> out;    // [batch*seq x d]
  Tensor<T> probs;  // [batch*heads*seq x seq], zero above the diagonal
};

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

template <typename T>
struct RmsNormResult {
  Tensor<T> y;
  Tensor<T> inv_rms;  // [rows x 1]
};

template <typename T>
struct RmsNormGrads {
  Tensor<T> dx;
  Tensor<T> dgain;  // [1 x d]
};

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  Tensor<T> dlogits;
};

#define DLORA_KERNEL_DECLS                                                                    \
  template <typename T>                                                                       \
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);                                   \
  template <typename T>                                                                       \
  Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);                                \
  template <typename T>                                                                       \
  Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);                                \
  template <typename T>                                                                       \
  Tensor<T> softmax_rows(const Tensor<T>& x);                                                 \
  template <typename T>                                                                       \
  Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy);                   \
  template <typename T>                                                                       \
  RmsNormResult<T> rmsnorm_rows(const Tensor<T>& x, const Tensor<T>& gain, T eps);            \
  template <typename T>                                                                       \
  RmsNormGrads<T> rmsnorm_rows_backward(const Tensor<T>& x, const Tensor<T>& gain,            \
                                        const Tensor<T>& inv_rms, const Tensor<T>& dy);       \
  template <typename T>                                                                       \
  Tensor<T> silu(const Tensor<T>& z);                                                         \
  template <typename T>                                                                       \
  Tensor<T> silu_backward(const Tensor<T>& z, const Tensor<T>& dy);                           \
  template <typename T>                                                                       \
  AttentionResult<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k,                 \
                                      const Tensor<T>& v, const AttentionShape& shape);       \
  template <typename T>                                                                       \
  AttentionGrads<T> causal_attention_backward(const Tensor<T>& q, const Tensor<T>& k,         \
                                              const Tensor<T>& v, const Tensor<T>& probs,     \
                                              const Tensor<T>& dout,                          \
                                              const AttentionShape& shape);                   \
  template <typename T>                                                                       \
  CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets, \
                                      std::span<const std::uint8_t> mask);

/// OpenMP kernels used by the model and runtime.
namespace kernels {
DLORA_KERNEL_DECLS
}  // namespace kernels

/// Serial reference kernels, kept for equivalence testing and benchmarking.
namespace reference {
DLORA_KERNEL_DECLS
}  // namespace reference

#undef DLORA_KERNEL_DECLS

// Small elementwise helpers (serial; all O(n)).

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void scale_inplace(Tensor<T>& a, T s);

/// Adds `bias` ([1 x cols] or [cols]) to every row of `a`.
template <typename T>
void add_row_bias(Tensor<T>& a, const Tensor<T>& bias);

/// Column sums in ascending row order, as a [cols] tensor.
template <typename T>
Tensor<T> column_sums(const Tensor<T>& a);

/// Cross entropy where every position counts.
template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

}  // namespace dlora
