// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Straightforward single-threaded kernels. Loop order differs from the OpenMP
// versions but every output element sees the same operations in the same order.

#include <algorithm>
#include <cmath>
#include <string>

#include "dlora/kernels.hpp"

namespace dlora::reference {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dims differ");
  Tensor<T> c = Tensor<T>::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T acc = T{0};
      for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
      c(i, j) = acc;
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dims differ");
  Tensor<T> c = Tensor<T>::matrix(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      T acc = T{0};
      for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(j, p);
      c(i, j) = acc;
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: inner dims differ");
  Tensor<T> c = Tensor<T>::matrix(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T acc = T{0};
      for (std::size_t p = 0; p < a.rows(); ++p) acc += a(p, i) * b(p, j);
      c(i, j) = acc;
    }
  }
  return c;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y(x.dims());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum = T{0};
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (T& o : out) o /= sum;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  if (!same_shape(y, dy)) throw ShapeError("softmax_rows_backward: shape mismatch");
  Tensor<T> dx(y.dims());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T dot = T{0};
    for (std::size_t j = 0; j < y.cols(); ++j) dot += dy(r, j) * y(r, j);
    for (std::size_t j = 0; j < y.cols(); ++j) dx(r, j) = y(r, j) * (dy(r, j) - dot);
  }
  return dx;
}

template <typename T>
RmsNormResult<T> rmsnorm_rows(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d) throw ShapeError("rmsnorm: gain length does not match row width");
  RmsNormResult<T> res{Tensor<T>(x.dims()), Tensor<T>::matrix(x.rows(), 1)};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T ss = T{0};
    for (std::size_t j = 0; j < d; ++j) ss += x(r, j) * x(r, j);
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    res.inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) res.y(r, j) = gain[j] * (x(r, j) * inv);
  }
  return res;
}

template <typename T>
RmsNormGrads<T> rmsnorm_rows_backward(const Tensor<T>& x, const Tensor<T>& gain,
                                      const Tensor<T>& inv_rms, const Tensor<T>& dy) {
  if (!same_shape(x, dy)) throw ShapeError("rmsnorm_backward: shape mismatch");
  const std::size_t d = x.cols();
  RmsNormGrads<T> g{Tensor<T>(x.dims()), Tensor<T>::matrix(1, d)};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T inv = inv_rms[r];
    T dot = T{0};
    for (std::size_t j = 0; j < d; ++j) dot += gain[j] * dy(r, j) * x(r, j);
    const T coeff = inv * inv * dot / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) g.dx(r, j) = inv * (gain[j] * dy(r, j) - x(r, j) * coeff);
  }
  for (std::size_t j = 0; j < d; ++j) {
    T acc = T{0};
    for (std::size_t r = 0; r < x.rows(); ++r) acc += dy(r, j) * (x(r, j) * inv_rms[r]);
    g.dgain[j] = acc;
  }
  return g;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& z) {
  Tensor<T> y(z.dims());
  for (std::size_t i = 0; i < z.size(); ++i) y[i] = z[i] / (T{1} + std::exp(-z[i]));
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& z, const Tensor<T>& dy) {
  if (!same_shape(z, dy)) throw ShapeError("silu_backward: shape mismatch");
  Tensor<T> dz(z.dims());
  for (std::size_t i = 0; i < z.size(); ++i) {
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
    throw ShapeError("causal_attention: inconsistent q/k/v shapes");
  }
  const std::size_t hd = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  AttentionResult<T> res{Tensor<T>::matrix(q.rows(), d),
                         Tensor<T>::matrix(shape.batch * heads * seq, seq)};
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t prow0 = (b * heads + h) * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<T> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          T acc = T{0};
          for (std::size_t c = 0; c < hd; ++c) acc += q(b * seq + i, h * hd + c) * k(b * seq + j, h * hd + c);
          s[j] = acc * scale;
        }
        const T mx = *std::max_element(s.begin(), s.end());
        T sum = T{0};
        for (T& x : s) {
          x = std::exp(x - mx);
          sum += x;
        }
        for (std::size_t j = 0; j <= i; ++j) res.probs(prow0 + i, j) = s[j] / sum;
        for (std::size_t c = 0; c < hd; ++c) {
          T acc = T{0};
          for (std::size_t j = 0; j <= i; ++j) acc += res.probs(prow0 + i, j) * v(b * seq + j, h * hd + c);
          res.out(b * seq + i, h * hd + c) = acc;
        }
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
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t prow0 = (b * heads + h) * seq;
      const std::size_t r0 = b * seq, c0 = h * hd;
      Tensor<T> ds = Tensor<T>::matrix(seq, seq);
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          T acc = T{0};
          for (std::size_t c = 0; c < hd; ++c) acc += dout(r0 + i, c0 + c) * v(r0 + j, c0 + c);
          ds(i, j) = acc;
        }
        T dot = T{0};
        for (std::size_t j = 0; j <= i; ++j) dot += ds(i, j) * probs(prow0 + i, j);
        for (std::size_t j = 0; j <= i; ++j) ds(i, j) = probs(prow0 + i, j) * (ds(i, j) - dot) * scale;
      }
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t c = 0; c < hd; ++c) {
          T acc = T{0};
          for (std::size_t j = 0; j <= i; ++j) acc += ds(i, j) * k(r0 + j, c0 + c);
          g.dq(r0 + i, c0 + c) = acc;
        }
      }
      for (std::size_t j = 0; j < seq; ++j) {
        for (std::size_t c = 0; c < hd; ++c) {
          T acck = T{0}, accv = T{0};
          for (std::size_t i = j; i < seq; ++i) {
            acck += ds(i, j) * q(r0 + i, c0 + c);
            accv += probs(prow0 + i, j) * dout(r0 + i, c0 + c);
          }
          g.dk(r0 + j, c0 + c) = acck;
          g.dv(r0 + j, c0 + c) = accv;
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
      throw InputError("cross_entropy: target outside vocabulary");
    }
    count += mask[r] ? 1 : 0;
  }
  if (count == 0) throw InputError("cross_entropy: empty loss mask");
  CrossEntropyResult<T> res{0.0, Tensor<T>(logits.dims())};
  const T inv_count = T{1} / static_cast<T>(count);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    auto x = logits.row(r);
    auto g = res.dlogits.row(r);
    const T mx = *std::max_element(x.begin(), x.end());
    T sum = T{0};
    for (std::size_t j = 0; j < v; ++j) {
      g[j] = std::exp(x[j] - mx);
      sum += g[j];
    }
    const auto t = static_cast<std::size_t>(targets[r]);
    total += static_cast<double>(mx) + std::log(static_cast<double>(sum)) - static_cast<double>(x[t]);
    for (std::size_t j = 0; j < v; ++j) g[j] = (g[j] / sum) * inv_count;
    g[t] -= inv_count;
  }
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

}  // namespace dlora::reference
