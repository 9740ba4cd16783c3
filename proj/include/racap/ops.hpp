#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "racap/tensor.hpp"

namespace racap {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_shape(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.rows(),
                "matmul: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  return Tensor::make_result({m, n}, std::move(out), {&a, &b},
                             [a, b, m, k, n](std::span<const double> g) {
    const auto A = a.data();
    const auto B = b.data();
    if (double* ga = grad_buffer(a)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * B[p * n + j];
        }
    }
    if (double* gb = grad_buffer(b)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_shape(a.dims() == b.dims(),
                "add: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.dims(), std::move(out), {&a, &b},
                             [a, b](std::span<const double> g) {
    accumulate_grad(a, g);
    accumulate_grad(b, g);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_shape(a.dims() == b.dims(),
                "sub: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.dims(), std::move(out), {&a, &b},
                             [a, b](std::span<const double> g) {
    accumulate_grad(a, g);
    if (double* gb = grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_shape(a.dims() == b.dims(),
                "mul: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.dims(), std::move(out), {&a, &b},
                             [a, b](std::span<const double> g) {
    if (double* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    if (double* gb = grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor::make_result(a.dims(), std::move(out), {&a},
                             [a, s](std::span<const double> g) {
    if (double* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return Tensor::make_result(a.dims(), std::move(out), {&a},
                             [a](std::span<const double> g) { accumulate_grad(a, g); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

/// x[m x n] + bias[n], broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_shape(x.ndim() == 2 && bias.size() == x.cols(),
                "add_bias: " + shape_str(x.dims()) + " + " + shape_str(bias.dims()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return Tensor::make_result({m, n}, std::move(out), {&x, &bias},
                             [x, bias, m, n](std::span<const double> g) {
    accumulate_grad(x, g);
    if (double* gb = grad_buffer(bias))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

inline Tensor transpose(const Tensor& a) {
  require_shape(a.ndim() == 2, "transpose needs a matrix");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return Tensor::make_result({n, m}, std::move(out), {&a},
                             [a, m, n](std::span<const double> g) {
    if (double* ga = grad_buffer(a))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

namespace detail {

// Iterates over the 1-D lines of a 2-D (or 1-D) tensor along `axis`.
struct AxisLines {
  std::size_t count, length, outer_stride, inner_stride;
};

inline AxisLines axis_lines(const Tensor& x, std::size_t axis) {
  if (x.ndim() == 1) {
    require_shape(axis == 0, "axis out of range");
    return {1, x.size(), 0, 1};
  }
  require_shape(x.ndim() == 2 && axis < 2, "softmax supports 1-D or 2-D tensors");
  const std::size_t m = x.dims()[0], n = x.dims()[1];
  return axis == 1 ? AxisLines{m, n, n, 1} : AxisLines{n, m, 1, n};
}

}  // namespace detail

/// Max-subtracted softmax along `axis` (last axis by default).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto L = detail::axis_lines(x, axis);
  std::vector<double> out(x.size());
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t base = l * L.outer_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < L.length; ++i) mx = std::max(mx, x[base + i * L.inner_stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < L.length; ++i) {
      const double e = std::exp(x[base + i * L.inner_stride] - mx);
      out[base + i * L.inner_stride] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < L.length; ++i) out[base + i * L.inner_stride] /= sum;
  }
  std::vector<double> y = out;
  return Tensor::make_result(x.dims(), std::move(out), {&x},
                             [x, y = std::move(y), L](std::span<const double> g) {
    double* gx = grad_buffer(x);
    if (!gx) return;
    for (std::size_t l = 0; l < L.count; ++l) {
      const std::size_t base = l * L.outer_stride;
      double dotv = 0.0;
      for (std::size_t i = 0; i < L.length; ++i) {
        const std::size_t k = base + i * L.inner_stride;
        dotv += g[k] * y[k];
      }
      for (std::size_t i = 0; i < L.length; ++i) {
        const std::size_t k = base + i * L.inner_stride;
        gx[k] += y[k] * (g[k] - dotv);
      }
    }
  });
}

inline Tensor softmax(const Tensor& x) { return softmax(x, x.ndim() - 1); }

/// Sets entries above the diagonal (column > row) to -inf.
inline Tensor causal_mask(const Tensor& scores) {
  require_shape(scores.ndim() == 2, "causal_mask needs a matrix");
  const std::size_t m = scores.rows(), n = scores.cols();
  std::vector<double> out(scores.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      out[i * n + j] = -std::numeric_limits<double>::infinity();
  return Tensor::make_result({m, n}, std::move(out), {&scores},
                             [scores, m, n](std::span<const double> g) {
    if (double* gs = grad_buffer(scores))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j <= std::min(i, n - 1); ++j) gs[i * n + j] += g[i * n + j];
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
  return Tensor::make_result(x.dims(), std::move(out), {&x},
                             [x](std::span<const double> g) {
    double* gx = grad_buffer(x);
    if (!gx) return;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return Tensor::make_result(x.dims(), std::move(out), {&x},
                             [x](std::span<const double> g) {
    if (double* gx = grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) gx[i] += g[i];
  });
}

/// Row-wise layer normalization with affine parameters of length cols().
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  require_shape(x.ndim() == 2 && gamma.size() == x.cols() && beta.size() == x.cols(),
                "layer_norm: " + shape_str(x.dims()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> xhat(x.size()), inv_std(m), out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
    }
  }
  return Tensor::make_result(
      {m, n}, std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
       n](std::span<const double> g) {
        if (double* gg = grad_buffer(gamma))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        if (double* gb = grad_buffer(beta))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        double* gx = grad_buffer(x);
        if (!gx) return;
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gamma[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gamma[j];
            gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      });
}

/// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& v : mask) v = keep(rng) ? s : 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return Tensor::make_result(x.dims(), std::move(out), {&x},
                             [x, mask = std::move(mask)](std::span<const double> g) {
    if (double* gx = grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

inline Tensor reshape(const Tensor& x, Shape dims) {
  require_shape(shape_size(dims) == x.size(),
                "reshape " + shape_str(x.dims()) + " -> " + shape_str(dims));
  return Tensor::make_result(std::move(dims), x.values(), {&x},
                             [x](std::span<const double> g) { accumulate_grad(x, g); });
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_shape(x.ndim() == 2 && count > 0 && begin + count <= x.cols(),
                "slice_cols out of range");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + begin + j];
  return Tensor::make_result({m, count}, std::move(out), {&x},
                             [x, m, n, begin, count](std::span<const double> g) {
    if (double* gx = grad_buffer(x))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += g[i * count + j];
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_shape(x.ndim() == 2 && count > 0 && begin + count <= x.rows(),
                "slice_rows out of range");
  const std::size_t n = x.cols();
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return Tensor::make_result({count, n}, std::move(out), {&x},
                             [x, n, begin](std::span<const double> g) {
    if (double* gx = grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  require_shape(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_shape(p.ndim() == 2 && p.rows() == m, "concat_cols row mismatch");
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * n + off + j] = p(i, j);
    off += p.cols();
  }
  std::vector<Tensor> keep(parts.begin(), parts.end());
  return Tensor::make_result({m, n}, std::move(out), parts,
                             [keep, m, n](std::span<const double> g) {
    std::size_t off = 0;
    for (const auto& p : keep) {
      const std::size_t c = p.cols();
      if (double* gp = grad_buffer(p))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * n + off + j];
      off += c;
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({1}, {s}, {&x}, [x](std::span<const double> g) {
    if (double* gx = grad_buffer(x))
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Sum of scalar tensors.
inline Tensor add_n(std::span<const Tensor> terms) {
  require(!terms.empty(), "add_n of nothing");
  double s = 0.0;
  for (const auto& t : terms) {
    require_shape(t.size() == 1, "add_n expects scalars");
    s += t.item();
  }
  std::vector<Tensor> keep(terms.begin(), terms.end());
  return Tensor::make_result({1}, {s}, terms, [keep](std::span<const double> g) {
    for (const auto& t : keep)
      if (double* gt = grad_buffer(t)) gt[0] += g[0];
  });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  require_shape(a.size() == b.size(), "dot size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return Tensor::make_result({1}, {s}, {&a, &b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_buffer(a))
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0] * b[i];
    if (double* gb = grad_buffer(b))
      for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[0] * a[i];
  });
}

/// x / |x|_2 over all elements.
inline Tensor l2_normalize(const Tensor& x) {
  double sq = 0.0;
  for (double v : x.data()) sq += v * v;
  require(sq > 0.0, "l2_normalize of a zero vector");
  const double norm = std::sqrt(sq);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / norm;
  std::vector<double> y = out;
  return Tensor::make_result(x.dims(), std::move(out), {&x},
                             [x, y = std::move(y), norm](std::span<const double> g) {
    double* gx = grad_buffer(x);
    if (!gx) return;
    double yg = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) yg += y[i] * g[i];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (g[i] - y[i] * yg) / norm;
  });
}

/// Gathers rows of `table` [V x D] for the given ids.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_shape(table.ndim() == 2 && !ids.empty(), "embedding needs a table and ids");
  const std::size_t d = table.cols(), v = table.rows();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < v, "token id " + std::to_string(ids[i]) + " out of vocabulary");
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return Tensor::make_result({ids.size(), d}, std::move(out), {&table},
                             [table, idv = std::move(idv), d](std::span<const double> g) {
    if (double* gt = grad_buffer(table))
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
  });
}

/// Mean over rows of the cross-entropy between softmax(logits) and the
/// smoothed target (1 - smoothing) * onehot + smoothing / V.
inline Tensor smoothed_cross_entropy(const Tensor& logits,
                                     std::span<const std::size_t> targets,
                                     double smoothing) {
  require_shape(logits.ndim() == 2 && logits.rows() == targets.size(),
                "cross-entropy: logits " + shape_str(logits.dims()) + " vs " +
                    std::to_string(targets.size()) + " targets");
  require(smoothing >= 0.0 && smoothing < 1.0, "label smoothing must be in [0, 1)");
  const std::size_t m = logits.rows(), v = logits.cols();
  const double uni = smoothing / static_cast<double>(v);
  std::vector<double> probs(m * v);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(targets[i] < v, "target id out of vocabulary");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[i * v + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(logits[i * v + j] - mx);
    const double lse = mx + std::log(s);
    double row = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double q = uni + (j == targets[i] ? 1.0 - smoothing : 0.0);
      row += q * (lse - logits[i * v + j]);
      probs[i * v + j] = std::exp(logits[i * v + j] - lse);
    }
    loss += row;
  }
  loss /= static_cast<double>(m);
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return Tensor::make_result(
      {1}, {loss}, {&logits},
      [logits, probs = std::move(probs), tv = std::move(tv), m, v, uni,
       smoothing](std::span<const double> g) {
        double* gl = grad_buffer(logits);
        if (!gl) return;
        const double s = g[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < v; ++j) {
            const double q = uni + (j == tv[i] ? 1.0 - smoothing : 0.0);
            gl[i * v + j] += s * (probs[i * v + j] - q);
          }
      });
}

}  // namespace racap
