#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "raypatch/tensor.hpp"

namespace raypatch {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Graph::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline Tensor make_output(Shape shape, bool track) {
  Tensor out(std::move(shape));
  out.set_requires_grad(track);
  return out;
}

inline void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void expect_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value");
  }
}

// [N, C, H, W] view of a rank-3 ([C, H, W], N = 1) or rank-4 tensor.
struct ImageDims {
  std::size_t n, c, h, w;
};

inline ImageDims image_dims(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
}

inline Shape image_shape(const Tensor& like, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (like.rank() == 3) return {c, h, w};
  return {n, c, h, w};
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (track) {
    Graph::active()->record(op, [sx = x.storage(), so = out.storage(), deriv] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* gx = sx->grad_data();
      for (std::size_t i = 0; i < so->value.size(); ++i) gx[i] += so->grad[i] * deriv(sx->value[i], so->value[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_output({m, n}, track);
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, p) * ConstMatMap(b.data().data(), p, n);
  counters().macs += m * p * n;
  if (track) {
    Graph::active()->record("matmul", [sa = a.storage(), sb = b.storage(), so = out.storage(), m, p, n] {
      if (!so->has_grad()) return;
      ConstMatMap dc(so->grad.data(), m, n);
      if (sa->requires_grad) {
        MatMap(sa->grad_data(), m, p).noalias() += dc * ConstMatMap(sb->value.data(), p, n).transpose();
      }
      if (sb->requires_grad) {
        MatMap(sb->grad_data(), p, n).noalias() += ConstMatMap(sa->value.data(), m, p).transpose() * dc;
      }
    });
  }
  return out;
}

// a · bᵀ for a [m,p], b [n,p].
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_transposed: cannot multiply " + shape_str(a.shape()) + " by transpose of " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(0);
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_output({m, n}, track);
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, p) * ConstMatMap(b.data().data(), n, p).transpose();
  counters().macs += m * p * n;
  if (track) {
    Graph::active()->record("matmul_transposed", [sa = a.storage(), sb = b.storage(), so = out.storage(), m, p, n] {
      if (!so->has_grad()) return;
      ConstMatMap dc(so->grad.data(), m, n);
      if (sa->requires_grad) {
        MatMap(sa->grad_data(), m, p).noalias() += dc * ConstMatMap(sb->value.data(), n, p);
      }
      if (sb->requires_grad) {
        MatMap(sb->grad_data(), n, p).noalias() += dc.transpose() * ConstMatMap(sa->value.data(), m, p);
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  const bool track = detail::tracking({&x});
  Tensor out = detail::make_output({n, m}, track);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ys[j * m + i] = xs[i * n + j];
  if (track) {
    Graph::active()->record("transpose", [sx = x.storage(), so = out.storage(), m, n] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* gx = sx->grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += so->grad[j * m + i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = detail::tracking({&x});
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  out.set_requires_grad(track);
  if (track) {
    Graph::active()->record("reshape", [sx = x.storage(), so = out.storage()] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* gx = sx->grad_data();
      for (std::size_t i = 0; i < so->grad.size(); ++i) gx[i] += so->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "add");
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_output(a.shape(), track);
  auto as = a.data(), bs = b.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] + bs[i];
  if (track) {
    Graph::active()->record("add", [sa = a.storage(), sb = b.storage(), so = out.storage()] {
      if (!so->has_grad()) return;
      const std::size_t n = so->grad.size();
      if (sa->requires_grad) {
        double* g = sa->grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += so->grad[i];
      }
      if (sb->requires_grad) {
        double* g = sb->grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += so->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "sub");
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_output(a.shape(), track);
  auto as = a.data(), bs = b.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] - bs[i];
  if (track) {
    Graph::active()->record("sub", [sa = a.storage(), sb = b.storage(), so = out.storage()] {
      if (!so->has_grad()) return;
      const std::size_t n = so->grad.size();
      if (sa->requires_grad) {
        double* g = sa->grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += so->grad[i];
      }
      if (sb->requires_grad) {
        double* g = sb->grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] -= so->grad[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "mul");
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_output(a.shape(), track);
  auto as = a.data(), bs = b.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] * bs[i];
  if (track) {
    Graph::active()->record("mul", [sa = a.storage(), sb = b.storage(), so = out.storage()] {
      if (!so->has_grad()) return;
      const std::size_t n = so->grad.size();
      if (sa->requires_grad) {
        double* g = sa->grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += so->grad[i] * sb->value[i];
      }
      if (sb->requires_grad) {
        double* g = sb->grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += so->grad[i] * sa->value[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary(
      x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Tensor exp(const Tensor& x) {
  Tensor out = detail::unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
  detail::expect_finite(out, "exp");
  return out;
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive or NaN input " + std::to_string(v));
  }
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// x [n, d] + b [d] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.numel() != x.dim(1)) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match rows of " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  const bool track = detail::tracking({&x, &b});
  Tensor out = detail::make_output(x.shape(), track);
  auto xs = x.data(), bs = b.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) ys[i * d + j] = xs[i * d + j] + bs[j];
  if (track) {
    Graph::active()->record("add_bias", [sx = x.storage(), sb = b.storage(), so = out.storage(), n, d] {
      if (!so->has_grad()) return;
      if (sx->requires_grad) {
        double* g = sx->grad_data();
        for (std::size_t i = 0; i < n * d; ++i) g[i] += so->grad[i];
      }
      if (sb->requires_grad) {
        double* g = sb->grad_data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += so->grad[i * d + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  const bool track = detail::tracking({&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = detail::make_output({1}, track);
  out.mutable_data()[0] = acc;
  if (track) {
    Graph::active()->record("sum", [sx = x.storage(), so = out.storage()] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* g = sx->grad_data();
      for (std::size_t i = 0; i < sx->value.size(); ++i) g[i] += so->grad[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Normalization

inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_str(x.shape()));
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  const bool track = detail::tracking({&x});
  Tensor out = detail::make_output(x.shape(), track);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xs.data() + i * n;
    double* y = ys.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(row[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  if (track) {
    Graph::active()->record("softmax_rows", [sx = x.storage(), so = out.storage(), m, n] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* gx = sx->grad_data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = so->value.data() + i * n;
        const double* gy = so->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// Normalizes over the last axis, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine parameters do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const bool track = detail::tracking({&x, &gamma, &beta});
  Tensor out = detail::make_output(x.shape(), track);
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  auto ys = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      ys[r * d + j] = h * gs[j] + bs[j];
    }
  }
  if (track) {
    Graph::active()->record("layer_norm", [sx = x.storage(), sg = gamma.storage(), sb = beta.storage(),
                                           so = out.storage(), xhat = std::move(xhat),
                                           inv_std = std::move(inv_std), rows, d] {
      if (!so->has_grad()) return;
      const double* gy = so->grad.data();
      if (sg->requires_grad) {
        double* g = sg->grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j] * xhat[r * d + j];
      }
      if (sb->requires_grad) {
        double* g = sb->grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
      }
      if (sx->requires_grad) {
        double* gx = sx->grad_data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = gy[r * d + j] * sg->value[j];
            s1 += dh;
            s2 += dh * xhat[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = gy[r * d + j] * sg->value[j];
            gx[r * d + j] += inv_std[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
          }
        }
      }
    });
  }
  return out;
}

// Batch normalization over the N, H, W axes of [N,C,H,W] (or [C,H,W]).
// Training mode normalizes with batch statistics and folds them into the
// running estimates (running = momentum * running + (1 - momentum) * batch,
// unbiased variance); eval mode normalizes with the running estimates.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, bool training, double momentum = 0.9, double eps = 1e-5) {
  const auto [n, c, h, w] = detail::image_dims(x, "batch_norm");
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw ShapeError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  }
  const std::size_t hw = h * w;
  const std::size_t count = n * hw;
  const bool track = detail::tracking({&x, &gamma, &beta});
  Tensor out = detail::make_output(x.shape(), track);
  auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  auto ys = out.mutable_data();
  std::vector<double> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double m = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) m += xs[(b * c + ch) * hw + i];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double dv = xs[(b * c + ch) * hw + i] - m;
          v += dv * dv;
        }
      const double biased = v / static_cast<double>(count);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : biased;
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(biased + eps);
      running_mean.mutable_data()[ch] = momentum * running_mean.data()[ch] + (1.0 - momentum) * m;
      running_var.mutable_data()[ch] = momentum * running_var.data()[ch] + (1.0 - momentum) * unbiased;
    } else {
      mu[ch] = running_mean.data()[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  std::vector<double> xhat(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        xhat[idx] = (xs[idx] - mu[ch]) * inv_std[ch];
        ys[idx] = xhat[idx] * gs[ch] + bs[ch];
      }
  if (track) {
    Graph::active()->record("batch_norm", [sx = x.storage(), sg = gamma.storage(), sb = beta.storage(),
                                           so = out.storage(), xhat = std::move(xhat),
                                           inv_std = std::move(inv_std), n, c, hw, count, training] {
      if (!so->has_grad()) return;
      const double* gy = so->grad.data();
      std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = (b * c + ch) * hw + i;
            sum_dy[ch] += gy[idx];
            sum_dy_xhat[ch] += gy[idx] * xhat[idx];
          }
      if (sg->requires_grad) {
        double* g = sg->grad_data();
        for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy_xhat[ch];
      }
      if (sb->requires_grad) {
        double* g = sb->grad_data();
        for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy[ch];
      }
      if (sx->requires_grad) {
        double* gx = sx->grad_data();
        const double inv_m = 1.0 / static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double gam = sg->value[ch];
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              if (training) {
                gx[idx] += gam * inv_std[ch] *
                           (gy[idx] - inv_m * sum_dy[ch] - xhat[idx] * inv_m * sum_dy_xhat[ch]);
              } else {
                gx[idx] += gam * inv_std[ch] * gy[idx];
              }
            }
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(ref));
      }
    }
    out_shape[axis] += p.dim(axis);
    track = track || detail::tracking({&p});
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  const std::size_t out_axis = out_shape[axis];
  Tensor out = detail::make_output(out_shape, track);
  auto ys = out.mutable_data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis) * inner;
    auto xs = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xs.data() + o * len, len, ys.data() + o * out_axis * inner + offset * inner);
    offset += p.dim(axis);
  }
  if (track) {
    std::vector<std::shared_ptr<detail::Storage>> stores;
    for (const Tensor& p : parts) stores.push_back(p.storage());
    Graph::active()->record("concat", [stores = std::move(stores), offsets = std::move(offsets),
                                       so = out.storage(), outer, inner, out_axis, axis] {
      if (!so->has_grad()) return;
      for (std::size_t k = 0; k < stores.size(); ++k) {
        auto& s = stores[k];
        if (!s->requires_grad) continue;
        const std::size_t len = s->shape[axis] * inner;
        double* g = s->grad_data();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = so->grad.data() + o * out_axis * inner + offsets[k] * inner;
          for (std::size_t i = 0; i < len; ++i) g[o * len + i] += src[i];
        }
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t in_axis = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const bool track = detail::tracking({&x});
  Tensor out = detail::make_output(out_shape, track);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xs.data() + (o * in_axis + start) * inner, length * inner, ys.data() + o * length * inner);
  if (track) {
    Graph::active()->record("slice", [sx = x.storage(), so = out.storage(), outer, inner, in_axis, start, length] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* g = sx->grad_data();
      for (std::size_t o = 0; o < outer; ++o) {
        double* dst = g + (o * in_axis + start) * inner;
        const double* src = so->grad.data() + o * length * inner;
        for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Flat selection of elements by index; result has shape [indices.size()].
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ShapeError("gather: empty index set");
  for (std::size_t i : indices) {
    if (i >= x.numel()) throw ShapeError("gather: index " + std::to_string(i) + " out of range");
  }
  const bool track = detail::tracking({&x});
  Tensor out = detail::make_output({indices.size()}, track);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t k = 0; k < indices.size(); ++k) ys[k] = xs[indices[k]];
  if (track) {
    Graph::active()->record("gather", [sx = x.storage(), so = out.storage(), indices] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* g = sx->grad_data();
      for (std::size_t k = 0; k < indices.size(); ++k) g[indices[k]] += so->grad[k];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and resampling

// 3x3 convolution, zero padding 1, stride 1 or 2. x is [C,H,W] or [N,C,H,W].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1) {
  const auto [n, c_in, h, w] = detail::image_dims(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("conv2d: weight must be [C_out, C_in, 3, 3], got " + shape_str(weight.shape()));
  }
  if (weight.dim(1) != c_in) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                     std::to_string(c_in));
  }
  const std::size_t c_out = weight.dim(0);
  if (bias.numel() != c_out) throw ShapeError("conv2d: bias does not match output channels");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  const std::size_t ho = (h - 1) / stride + 1, wo = (w - 1) / stride + 1;
  const std::size_t k = c_in * 9, p = ho * wo;
  const bool track = detail::tracking({&x, &weight, &bias});
  Tensor out = detail::make_output(detail::image_shape(x, n, c_out, ho, wo), track);

  std::vector<double> cols(n * k * p, 0.0);
  auto xs = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    double* col = cols.data() + b * k * p;
    for (std::size_t ci = 0; ci < c_in; ++ci)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          double* row = col + (ci * 9 + ky * 3 + kx) * p;
          const double* plane = xs.data() + (b * c_in + ci) * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              row[oy * wo + ox] = plane[iy * static_cast<std::ptrdiff_t>(w) + ix];
            }
          }
        }
  }
  using detail::ConstMatMap;
  using detail::MatMap;
  ConstMatMap wm(weight.data().data(), c_out, k);
  Eigen::Map<const Eigen::VectorXd> bv(bias.data().data(), static_cast<Eigen::Index>(c_out));
  auto ys = out.mutable_data();
  for (std::size_t b = 0; b < n; ++b) {
    MatMap ym(ys.data() + b * c_out * p, c_out, p);
    ym.noalias() = wm * ConstMatMap(cols.data() + b * k * p, k, p);
    ym.colwise() += bv;
  }
  counters().macs += n * c_out * p * k;

  if (track) {
    Graph::active()->record("conv2d", [sx = x.storage(), sw = weight.storage(), sb = bias.storage(),
                                       so = out.storage(), cols = std::move(cols), n, c_in, c_out, h, w, ho, wo,
                                       k, p, stride] {
      if (!so->has_grad()) return;
      ConstMatMap wm2(sw->value.data(), c_out, k);
      std::vector<double> dcols(sx->requires_grad ? k * p : 0);
      for (std::size_t b = 0; b < n; ++b) {
        ConstMatMap dy(so->grad.data() + b * c_out * p, c_out, p);
        ConstMatMap col(cols.data() + b * k * p, k, p);
        if (sw->requires_grad) MatMap(sw->grad_data(), c_out, k).noalias() += dy * col.transpose();
        if (sb->requires_grad) {
          Eigen::Map<Eigen::VectorXd>(sb->grad_data(), static_cast<Eigen::Index>(c_out)) += dy.rowwise().sum();
        }
        if (sx->requires_grad) {
          MatMap dc(dcols.data(), k, p);
          dc.noalias() = wm2.transpose() * dy;
          double* gx = sx->grad_data();
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* row = dcols.data() + (ci * 9 + ky * 3 + kx) * p;
                double* plane = gx + (b * c_in + ci) * h * w;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    plane[iy * static_cast<std::ptrdiff_t>(w) + ix] += row[oy * wo + ox];
                  }
                }
              }
        }
      }
    });
  }
  return out;
}

inline Tensor upsample_nearest2x(const Tensor& x) {
  const auto [n, c, h, w] = detail::image_dims(x, "upsample_nearest2x");
  const std::size_t planes = n * c, h2 = 2 * h, w2 = 2 * w;
  const bool track = detail::tracking({&x});
  Tensor out = detail::make_output(detail::image_shape(x, n, c, h2, w2), track);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t y = 0; y < h2; ++y)
      for (std::size_t xx = 0; xx < w2; ++xx) ys[(pl * h2 + y) * w2 + xx] = xs[(pl * h + y / 2) * w + xx / 2];
  if (track) {
    Graph::active()->record("upsample_nearest2x", [sx = x.storage(), so = out.storage(), planes, h, w] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* g = sx->grad_data();
      const std::size_t h2 = 2 * h, w2 = 2 * w;
      for (std::size_t pl = 0; pl < planes; ++pl)
        for (std::size_t y = 0; y < h2; ++y)
          for (std::size_t xx = 0; xx < w2; ++xx) g[(pl * h + y / 2) * w + xx / 2] += so->grad[(pl * h2 + y) * w2 + xx];
    });
  }
  return out;
}

namespace detail {

// Source taps for one output coordinate of a 2x bilinear upsample,
// half-pixel (align_corners = false) convention.
struct Tap {
  std::size_t i0, i1;
  double t;
};

inline Tap bilinear_tap(std::size_t out_index, std::size_t in_size) {
  double src = (static_cast<double>(out_index) + 0.5) * 0.5 - 0.5;
  if (src < 0.0) src = 0.0;
  std::size_t i0 = static_cast<std::size_t>(src);
  if (i0 > in_size - 1) i0 = in_size - 1;
  const std::size_t i1 = std::min(i0 + 1, in_size - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

inline Tensor upsample_bilinear2x(const Tensor& x) {
  const auto [n, c, h, w] = detail::image_dims(x, "upsample_bilinear2x");
  const std::size_t planes = n * c, h2 = 2 * h, w2 = 2 * w;
  const bool track = detail::tracking({&x});
  Tensor out = detail::make_output(detail::image_shape(x, n, c, h2, w2), track);
  std::vector<detail::Tap> ty(h2), tx(w2);
  for (std::size_t y = 0; y < h2; ++y) ty[y] = detail::bilinear_tap(y, h);
  for (std::size_t xx = 0; xx < w2; ++xx) tx[xx] = detail::bilinear_tap(xx, w);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = xs.data() + pl * h * w;
    for (std::size_t y = 0; y < h2; ++y) {
      const auto& a = ty[y];
      for (std::size_t xx = 0; xx < w2; ++xx) {
        const auto& b = tx[xx];
        const double top = (1.0 - b.t) * src[a.i0 * w + b.i0] + b.t * src[a.i0 * w + b.i1];
        const double bot = (1.0 - b.t) * src[a.i1 * w + b.i0] + b.t * src[a.i1 * w + b.i1];
        ys[(pl * h2 + y) * w2 + xx] = (1.0 - a.t) * top + a.t * bot;
      }
    }
  }
  counters().macs += 4 * planes * h2 * w2;
  if (track) {
    Graph::active()->record("upsample_bilinear2x", [sx = x.storage(), so = out.storage(), ty = std::move(ty),
                                                    tx = std::move(tx), planes, h, w, h2, w2] {
      if (!so->has_grad() || !sx->requires_grad) return;
      double* g = sx->grad_data();
      for (std::size_t pl = 0; pl < planes; ++pl) {
        double* dst = g + pl * h * w;
        for (std::size_t y = 0; y < h2; ++y) {
          const auto& a = ty[y];
          for (std::size_t xx = 0; xx < w2; ++xx) {
            const auto& b = tx[xx];
            const double gy = so->grad[(pl * h2 + y) * w2 + xx];
            dst[a.i0 * w + b.i0] += gy * (1.0 - a.t) * (1.0 - b.t);
            dst[a.i0 * w + b.i1] += gy * (1.0 - a.t) * b.t;
            dst[a.i1 * w + b.i0] += gy * a.t * (1.0 - b.t);
            dst[a.i1 * w + b.i1] += gy * a.t * b.t;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace raypatch
