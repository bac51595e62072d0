// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dlora/rng.hpp"
#include "dlora/tensor.hpp"

namespace dlora::test {

inline Tensor<double> random_tensor(std::uint64_t seed, Dims dims, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

template <class T, class U>
Tensor<T> cast(const Tensor<U>& t) {
  Tensor<T> out(t.dims());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<T>(t[i]);
  return out;
}

/// Central differences of a scalar function with respect to every entry of `x`.
inline Tensor<double> numeric_grad(Tensor<double>& x, const std::function<double()>& f, double h = 1e-5) {
  Tensor<double> g(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||b||, tiny)
inline double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

// Textbook definitions in long double, written without the library kernels.
namespace naive {

inline Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += static_cast<long double>(a(i, p)) * b(p, j);
      c(i, j) = static_cast<double>(s);
    }
  }
  return c;
}

inline Tensor<double> transpose(const Tensor<double>& a) {
  Tensor<double> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

inline Tensor<double> softmax_rows(const Tensor<double>& x) {
  Tensor<double> y(x.dims());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    long double mx = x(r, 0), s = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max<long double>(mx, x(r, j));
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(static_cast<long double>(x(r, j)) - mx);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      y(r, j) = static_cast<double>(std::exp(static_cast<long double>(x(r, j)) - mx) / s);
    }
  }
  return y;
}

inline Tensor<double> rmsnorm_rows(const Tensor<double>& x, const Tensor<double>& gain, double eps) {
  Tensor<double> y(x.dims());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    long double ms = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) ms += static_cast<long double>(x(r, j)) * x(r, j);
    ms /= x.cols();
    const long double inv = 1.0L / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < x.cols(); ++j) y(r, j) = static_cast<double>(gain[j] * x(r, j) * inv);
  }
  return y;
}

inline Tensor<double> silu(const Tensor<double>& z) {
  Tensor<double> y(z.dims());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const long double v = z[i];
    y[i] = static_cast<double>(v / (1.0L + std::exp(-v)));
  }
  return y;
}

/// Multi-head causal attention with scores q.k / sqrt(head_dim).
inline Tensor<double> causal_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                                       std::size_t batch, std::size_t seq, std::size_t heads) {
  const std::size_t d = q.cols(), hd = d / heads;
  Tensor<double> out(q.dims());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<long double> s(i + 1);
        long double mx = -1e300L, z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          long double acc = 0;
          for (std::size_t c = 0; c < hd; ++c) {
            acc += static_cast<long double>(q(b * seq + i, h * hd + c)) * k(b * seq + j, h * hd + c);
          }
          s[j] = acc / std::sqrt(static_cast<long double>(hd));
          mx = std::max(mx, s[j]);
        }
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t c = 0; c < hd; ++c) {
          long double acc = 0;
          for (std::size_t j = 0; j <= i; ++j) acc += s[j] / z * v(b * seq + j, h * hd + c);
          out(b * seq + i, h * hd + c) = static_cast<double>(acc);
        }
      }
    }
  }
  return out;
}

inline double cross_entropy(const Tensor<double>& logits, const std::vector<std::int32_t>& targets,
                            const std::vector<std::uint8_t>& mask) {
  long double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (!mask[r]) continue;
    long double mx = logits(r, 0), s = 0;
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max<long double>(mx, logits(r, j));
    for (std::size_t j = 0; j < logits.cols(); ++j) s += std::exp(logits(r, j) - mx);
    total += mx + std::log(s) - logits(r, static_cast<std::size_t>(targets[r]));
    ++count;
  }
  return static_cast<double>(total / count);
}

}  // namespace naive

/// Unique scratch path under the system temp directory.
inline std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dlora-tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace dlora::test
