// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <string>

#include "dlora/kernels.hpp"

namespace dlora::kernels {

namespace {

using Index = std::ptrdiff_t;

template <typename T>
void require_rank2_compatible(const Tensor<T>& a, std::size_t a_dim, const Tensor<T>& b,
                              std::size_t b_dim, const char* op) {
  if (a_dim != b_dim) {
    throw ShapeError(std::string(op) + ": inner dims differ, " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2_compatible(a, a.cols(), b, b.rows(), "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c = Tensor<T>::matrix(m, n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    T* crow = pc + i * n;
    const T* arow = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2_compatible(a, a.cols(), b, b.cols(), "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> c = Tensor<T>::matrix(m, n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T acc = T{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2_compatible(a, a.rows(), b, b.rows(), "matmul_tn");
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Tensor<T> c = Tensor<T>::matrix(m, n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    T* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T api = pa[p * m + i];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y(x.dims());
  const std::size_t rows = x.rows(), n = x.cols();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const T* in = x.data().data() + r * n;
    T* out = y.data().data() + r * n;
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    T sum = T{0};
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  if (!same_shape(y, dy)) throw ShapeError("softmax_rows_backward: shape mismatch");
  Tensor<T> dx(y.dims());
  const std::size_t rows = y.rows(), n = y.cols();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const T* py = y.data().data() + r * n;
    const T* pdy = dy.data().data() + r * n;
    T* pdx = dx.data().data() + r * n;
    T dot = T{0};
    for (std::size_t j = 0; j < n; ++j) dot += pdy[j] * py[j];
    for (std::size_t j = 0; j < n; ++j) pdx[j] = py[j] * (pdy[j] - dot);
  }
  return dx;
}

template <typename T>
RmsNormResult<T> rmsnorm_rows(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (gain.size() != d) throw ShapeError("rmsnorm: gain length does not match row width");
  RmsNormResult<T> res{Tensor<T>(x.dims()), Tensor<T>::matrix(rows, 1)};
  const T* pg = gain.data().data();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const T* px = x.data().data() + r * d;
    T* py = res.y.data().data() + r * d;
    T ss = T{0};
    for (std::size_t j = 0; j < d; ++j) ss += px[j] * px[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    res.inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) py[j] = pg[j] * (px[j] * inv);
  }
  return res;
}

template <typename T>
RmsNormGrads<T> rmsnorm_rows_backward(const Tensor<T>& x, const Tensor<T>& gain,
                                      const Tensor<T>& inv_rms, const Tensor<T>& dy) {
  if (!same_shape(x, dy)) throw ShapeError("rmsnorm_backward: shape mismatch");
  const std::size_t rows = x.rows(), d = x.cols();
  RmsNormGrads<T> g{Tensor<T>(x.dims()), Tensor<T>::matrix(1, d)};
  const T* pg = gain.data().data();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const T* px = x.data().data() + r * d;
    const T* pdy = dy.data().data() + r * d;
    T* pdx = g.dx.data().data() + r * d;
    const T inv = inv_rms[r];
    T dot = T{0};
    for (std::size_t j = 0; j < d; ++j) dot += pg[j] * pdy[j] * px[j];
    const T coeff = inv * inv * dot / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) pdx[j] = inv * (pg[j] * pdy[j] - px[j] * coeff);
  }
#pragma omp parallel for schedule(static)
  for (Index j = 0; j < static_cast<Index>(d); ++j) {
    T acc = T{0};
    for (std::size_t r = 0; r < rows; ++r) acc += dy[r * d + j] * (x[r * d + j] * inv_rms[r]);
    g.dgain[j] = acc;
  }
  return g;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& z) {
  Tensor<T> y(z.dims());
  const Index n = static_cast<Index>(z.size());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) y[i] = z[i] / (T{1} + std::exp(-z[i]));
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& z, const Tensor<T>& dy) {
  if (!same_shape(z, dy)) throw ShapeError("silu_backward: shape mismatch");
  Tensor<T> dz(z.dims());
  const Index n = static_cast<Index>(z.size());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    const T s = T{1} / (T{1} + std::exp(-z[i]));
    dz[i] = dy[i] * (s * (T{1} + z[i] * (T{1} - s)));
  }
  return dz;
}

template <typename T>
AttentionResult<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                    const AttentionShape& shape) {
  const std::size_t d = q.cols(), seq = shape.seq, heads = shape.heads;
  if (!same_shape(q, k) || !same_shape(q, v) || q.rows() != shape.batch * seq || d % heads != 0) {
    throw ShapeError("causal_attention: inconsistent q/k/v shapes " + dims_to_string(q.dims()));
  }
  const std::size_t hd = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  AttentionResult<T> res{Tensor<T>::matrix(q.rows(), d),
                         Tensor<T>::matrix(shape.batch * heads * seq, seq)};
  const Index pairs = static_cast<Index>(shape.batch * heads);
#pragma omp parallel for schedule(static)
  for (Index bh = 0; bh < pairs; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads;
    const std::size_t h = static_cast<std::size_t>(bh) % heads;
    const std::size_t row0 = b * seq, col0 = h * hd;
    T* pbase = res.probs.data().data() + static_cast<std::size_t>(bh) * seq * seq;
    for (std::size_t i = 0; i < seq; ++i) {
      T* p = pbase + i * seq;
      const T* qi = q.data().data() + (row0 + i) * d + col0;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = k.data().data() + (row0 + j) * d + col0;
        T acc = T{0};
        for (std::size_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
        p[j] = acc * scale;
      }
      T mx = p[0];
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, p[j]);
      T sum = T{0};
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) p[j] /= sum;
      T* oi = res.out.data().data() + (row0 + i) * d + col0;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = v.data().data() + (row0 + j) * d + col0;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  return res;
}

template <typename T>
AttentionGrads<T> causal_attention_backward(const Tensor<T>& q, const Tensor<T>& k,
                                            const Tensor<T>& v, const Tensor<T>& probs,
                                            const Tensor<T>& dout, const AttentionShape& shape) {
  const std::size_t d = q.cols(), seq = shape.seq, heads = shape.heads;
  if (!same_shape(q, dout)) throw ShapeError("causal_attention_backward: shape mismatch");
  const std::size_t hd = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  AttentionGrads<T> g{Tensor<T>(q.dims()), Tensor<T>(q.dims()), Tensor<T>(q.dims())};
  const Index pairs = static_cast<Index>(shape.batch * heads);
#pragma omp parallel for schedule(static)
  for (Index bh = 0; bh < pairs; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads;
    const std::size_t h = static_cast<std::size_t>(bh) % heads;
    const std::size_t row0 = b * seq, col0 = h * hd;
    const T* pbase = probs.data().data() + static_cast<std::size_t>(bh) * seq * seq;
    std::vector<T> ds(seq * seq, T{0});
    for (std::size_t i = 0; i < seq; ++i) {
      const T* p = pbase + i * seq;
      const T* doi = dout.data().data() + (row0 + i) * d + col0;
      T* dsi = ds.data() + i * seq;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = v.data().data() + (row0 + j) * d + col0;
        T acc = T{0};
        for (std::size_t c = 0; c < hd; ++c) acc += doi[c] * vj[c];
        dsi[j] = acc;
      }
      T dot = T{0};
      for (std::size_t j = 0; j <= i; ++j) dot += dsi[j] * p[j];
      for (std::size_t j = 0; j <= i; ++j) dsi[j] = p[j] * (dsi[j] - dot) * scale;
    }
    for (std::size_t i = 0; i < seq; ++i) {
      T* dqi = g.dq.data().data() + (row0 + i) * d + col0;
      const T* dsi = ds.data() + i * seq;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = k.data().data() + (row0 + j) * d + col0;
        for (std::size_t c = 0; c < hd; ++c) dqi[c] += dsi[j] * kj[c];
      }
    }
    for (std::size_t j = 0; j < seq; ++j) {
      T* dkj = g.dk.data().data() + (row0 + j) * d + col0;
      T* dvj = g.dv.data().data() + (row0 + j) * d + col0;
      for (std::size_t i = j; i < seq; ++i) {
        const T* qi = q.data().data() + (row0 + i) * d + col0;
        const T* doi = dout.data().data() + (row0 + i) * d + col0;
        const T dsij = ds[i * seq + j];
        const T pij = pbase[i * seq + j];
        for (std::size_t c = 0; c < hd; ++c) {
          dkj[c] += dsij * qi[c];
          dvj[c] += pij * doi[c];
        }
      }
    }
  }
  return g;
}

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                    std::span<const std::uint8_t> mask) {
  const std::size_t rows = logits.rows(), v = logits.cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: targets/mask length must equal logits rows");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    if (mask[r]) ++count;
  }
  if (count == 0) throw InputError("cross_entropy: empty loss mask");
  CrossEntropyResult<T> res{0.0, Tensor<T>(logits.dims())};
  std::vector<double> row_loss(rows, 0.0);
  const T inv_count = T{1} / static_cast<T>(count);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    if (!mask[r]) continue;
    const T* x = logits.data().data() + r * v;
    T* g = res.dlogits.data().data() + r * v;
    T mx = x[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    T sum = T{0};
    for (std::size_t j = 0; j < v; ++j) {
      g[j] = std::exp(x[j] - mx);
      sum += g[j];
    }
    const std::size_t t = static_cast<std::size_t>(targets[r]);
    row_loss[r] = static_cast<double>(mx) + std::log(static_cast<double>(sum)) - static_cast<double>(x[t]);
    for (std::size_t j = 0; j < v; ++j) g[j] = (g[j] / sum) * inv_count;
    g[t] -= inv_count;
  }
  double total = 0.0;
  for (double l : row_loss) total += l;
  res.loss = total / static_cast<double>(count);
  return res;
}

#define DLORA_INSTANTIATE(T)                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                              \
  template Tensor<T> softmax_rows_backward(const Tensor<T>&, const Tensor<T>&);                   \
  template RmsNormResult<T> rmsnorm_rows(const Tensor<T>&, const Tensor<T>&, T);                  \
  template RmsNormGrads<T> rmsnorm_rows_backward(const Tensor<T>&, const Tensor<T>&,              \
                                                 const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> silu(const Tensor<T>&);                                                      \
  template Tensor<T> silu_backward(const Tensor<T>&, const Tensor<T>&);                           \
  template AttentionResult<T> causal_attention(const Tensor<T>&, const Tensor<T>&,                \
                                               const Tensor<T>&, const AttentionShape&);          \
  template AttentionGrads<T> causal_attention_backward(const Tensor<T>&, const Tensor<T>&,        \
                                                       const Tensor<T>&, const Tensor<T>&,        \
                                                       const Tensor<T>&, const AttentionShape&);  \
  template CrossEntropyResult<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,   \
                                               std::span<const std::uint8_t>);

DLORA_INSTANTIATE(float)
DLORA_INSTANTIATE(double)

}  // namespace dlora::kernels
