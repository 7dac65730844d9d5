#pragma once

#include <cblas.h>

#include <limits>
#include <numeric>

#include "geomamba/tensor.hpp"

namespace geomamba {

namespace detail {

inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, double beta) {
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a, lda, b, ldb, beta, c,
              static_cast<int>(n));
}

struct AxisSplit {
  std::size_t outer = 1, mid = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw ShapeError(op, x.shape(), {axis}, "axis out of range");
}

inline void check_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [df](Node& self) {
    auto* gx = grad_of(self.inputs[0]);
    if (!gx) return;
    const auto& xin = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * df(xin[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs)
      if (auto* g = detail::grad_of(in))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto* g = detail::grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self.inputs[1]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    if (auto* g = detail::grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::grad_of(self.inputs[1]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary("scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

/// log(1 + e^v) without overflow.
inline double softplus_scalar(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& x) {
  return detail::unary(
      "silu", x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary("softplus", x, softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Adds a 1-D vector along `axis` (the only broadcast besides scalars).
inline Tensor add_bias(const Tensor& x, const Tensor& b, std::size_t axis) {
  detail::check_axis("add_bias", x, axis);
  if (b.numel() != x.dim(axis)) throw ShapeError("add_bias", x.shape(), b.shape(), "bias length must match axis");
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t m = 0; m < s.mid; ++m) {
      double* row = out.data() + (o * s.mid + m) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] += b[m];
    }
  return make_result("add_bias", x.shape(), std::move(out), {x, b}, [s](detail::Node& self) {
    if (auto* g = detail::grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self.inputs[1]))
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t m = 0; m < s.mid; ++m) {
          const double* row = self.grad.data() + (o * s.mid + m) * s.inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < s.inner; ++i) acc += row[i];
          (*g)[m] += acc;
        }
  });
}

/// Multiplies by a 1-D vector along `axis`.
inline Tensor mul_channel(const Tensor& x, const Tensor& g, std::size_t axis) {
  detail::check_axis("mul_channel", x, axis);
  if (g.numel() != x.dim(axis)) throw ShapeError("mul_channel", x.shape(), g.shape(), "scale length must match axis");
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t m = 0; m < s.mid; ++m) {
      const std::size_t base = (o * s.mid + m) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) out[base + i] = xv[base + i] * g[m];
    }
  return make_result("mul_channel", x.shape(), std::move(out), {x, g}, [s](detail::Node& self) {
    const auto& xv = self.inputs[0]->data;
    const auto& gv = self.inputs[1]->data;
    auto* gx = detail::grad_of(self.inputs[0]);
    auto* gg = detail::grad_of(self.inputs[1]);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t m = 0; m < s.mid; ++m) {
        const std::size_t base = (o * s.mid + m) * s.inner;
        double acc = 0.0;
        for (std::size_t i = 0; i < s.inner; ++i) {
          if (gx) (*gx)[base + i] += self.grad[base + i] * gv[m];
          acc += self.grad[base + i] * xv[base + i];
        }
        if (gg) (*gg)[m] += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result("sum", {1}, {acc}, {x}, [](detail::Node& self) {
    if (auto* g = detail::grad_of(self.inputs[0]))
      for (auto& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Linear algebra and layout

/// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.ndim() == 3;
  if (a.ndim() != b.ndim() || (a.ndim() != 2 && a.ndim() != 3)) throw ShapeError("matmul", a.shape(), b.shape(), "expected 2-D or 3-D operands");
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  if ((batched && b.dim(0) != batch) || a.dim(off + 1) != b.dim(off))
    throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(off), k = a.dim(off + 1), n = b.dim(off + 1);
  std::vector<double> out(batch * m * n);
  for (std::size_t p = 0; p < batch; ++p)
    detail::gemm(false, false, m, n, k, a.data().data() + p * m * k, b.data().data() + p * k * n,
                 out.data() + p * m * n, 0.0);
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_result("matmul", std::move(shape), std::move(out), {a, b}, [batch, m, k, n](detail::Node& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    auto* ga = detail::grad_of(self.inputs[0]);
    auto* gb = detail::grad_of(self.inputs[1]);
    for (std::size_t p = 0; p < batch; ++p) {
      const double* dy = self.grad.data() + p * m * n;
      if (ga) detail::gemm(false, true, m, k, n, dy, bv.data() + p * k * n, ga->data() + p * m * k, 1.0);
      if (gb) detail::gemm(true, false, k, n, m, av.data() + p * m * k, dy, gb->data() + p * k * n, 1.0);
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape, "element count differs");
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (auto* g = detail::grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// Collapses dimensions [start_dim, end) into one.
inline Tensor flatten(const Tensor& x, std::size_t start_dim = 1) {
  Shape shape(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(start_dim));
  std::size_t tail = 1;
  for (std::size_t i = start_dim; i < x.ndim(); ++i) tail *= x.dim(i);
  shape.push_back(tail);
  return reshape(x, std::move(shape));
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t nd = x.ndim();
  if (perm.size() != nd) throw ShapeError("permute", x.shape(), {perm.size()}, "permutation rank");
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  Shape out_shape(nd);
  std::vector<std::size_t> src_stride(nd);  // input stride for each output axis
  for (std::size_t i = 0; i < nd; ++i) {
    if (perm[i] >= nd) throw ShapeError("permute", x.shape(), {perm[i]}, "axis out of range");
    out_shape[i] = x.dim(perm[i]);
    src_stride[i] = in_strides[perm[i]];
  }
  // out flat index -> in flat index
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(nd, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = src;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[map[o]];
  return make_result("permute", std::move(out_shape), std::move(out), {x},
                     [map = std::move(map)](detail::Node& self) {
                       if (auto* g = detail::grad_of(self.inputs[0]))
                         for (std::size_t o = 0; o < map.size(); ++o) (*g)[map[o]] += self.grad[o];
                     });
}

inline Tensor transpose(const Tensor& x, std::size_t a, std::size_t b) {
  std::vector<std::size_t> perm(x.ndim());
  std::iota(perm.begin(), perm.end(), 0);
  detail::check_axis("transpose", x, a);
  detail::check_axis("transpose", x, b);
  std::swap(perm[a], perm[b]);
  return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& first = parts.front();
  detail::check_axis("concat", first, axis);
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.ndim() != first.ndim()) throw ShapeError("concat", first.shape(), p.shape());
    for (std::size_t d = 0; d < p.ndim(); ++d)
      if (d != axis && p.dim(d) != first.dim(d)) throw ShapeError("concat", first.shape(), p.shape());
    out_shape[axis] += p.dim(axis);
  }
  const auto s = detail::split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * s.inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * s.mid * s.inner + offset));
    offset += w;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts, [s, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t w = widths[k];
      if (auto* g = detail::grad_of(self.inputs[k]))
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < w; ++i) (*g)[o * w + i] += self.grad[o * s.mid * s.inner + off + i];
      off += w;
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::check_axis("slice", x, axis);
  if (begin >= end || end > x.dim(axis)) throw ShapeError("slice", x.shape(), {begin, end}, "bad range");
  const auto s = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * s.inner;
  std::vector<double> out(s.outer * w);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * s.mid * s.inner + begin * s.inner), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  return make_result("slice", std::move(out_shape), std::move(out), {x}, [s, w, begin](detail::Node& self) {
    if (auto* g = detail::grad_of(self.inputs[0]))
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < w; ++i) (*g)[o * s.mid * s.inner + begin * s.inner + i] += self.grad[o * w + i];
  });
}

/// Picks flat elements of `x` into a 1-D tensor.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("gather: empty index list");
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.numel()) throw ShapeError("gather", x.shape(), {indices[i]}, "index out of range");
    out[i] = x[indices[i]];
  }
  const std::size_t count = indices.size();
  return make_result("gather", {count}, std::move(out), {x},
                     [indices = std::move(indices)](detail::Node& self) {
                       if (auto* g = detail::grad_of(self.inputs[0]))
                         for (std::size_t i = 0; i < indices.size(); ++i) (*g)[indices[i]] += self.grad[i];
                     });
}

// ---------------------------------------------------------------------------
// Normalisation

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::check_axis("softmax", x, axis);
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.mid * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < s.mid; ++m) mx = std::max(mx, xv[base + m * s.inner]);
      double z = 0.0;
      for (std::size_t m = 0; m < s.mid; ++m) z += (out[base + m * s.inner] = std::exp(xv[base + m * s.inner] - mx));
      for (std::size_t m = 0; m < s.mid; ++m) out[base + m * s.inner] /= z;
    }
  return make_result("softmax", x.shape(), std::move(out), {x}, [s](detail::Node& self) {
    auto* g = detail::grad_of(self.inputs[0]);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.mid * s.inner + i;
        double dot = 0.0;
        for (std::size_t m = 0; m < s.mid; ++m) dot += self.grad[base + m * s.inner] * self.data[base + m * s.inner];
        for (std::size_t m = 0; m < s.mid; ++m) {
          const std::size_t k = base + m * s.inner;
          (*g)[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
  });
}

/// Zero-mean, unit-variance normalisation along `axis` (no affine).
inline Tensor layer_norm(const Tensor& x, std::size_t axis, double eps = 1e-5) {
  detail::check_axis("layer_norm", x, axis);
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(s.outer * s.inner);
  auto xv = x.data();
  const double n = static_cast<double>(s.mid);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.mid * s.inner + i;
      double mu = 0.0;
      for (std::size_t m = 0; m < s.mid; ++m) mu += xv[base + m * s.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t m = 0; m < s.mid; ++m) {
        const double d = xv[base + m * s.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double r = 1.0 / std::sqrt(var + eps);
      inv_std[o * s.inner + i] = r;
      for (std::size_t m = 0; m < s.mid; ++m) out[base + m * s.inner] = (xv[base + m * s.inner] - mu) * r;
    }
  return make_result("layer_norm", x.shape(), std::move(out), {x},
                     [s, inv_std = std::move(inv_std)](detail::Node& self) {
                       auto* g = detail::grad_of(self.inputs[0]);
                       if (!g) return;
                       const double n = static_cast<double>(s.mid);
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.mid * s.inner + i;
                           double mean_dy = 0.0, mean_dy_xhat = 0.0;
                           for (std::size_t m = 0; m < s.mid; ++m) {
                             const std::size_t k = base + m * s.inner;
                             mean_dy += self.grad[k];
                             mean_dy_xhat += self.grad[k] * self.data[k];
                           }
                           mean_dy /= n;
                           mean_dy_xhat /= n;
                           const double r = inv_std[o * s.inner + i];
                           for (std::size_t m = 0; m < s.mid; ++m) {
                             const std::size_t k = base + m * s.inner;
                             (*g)[k] += r * (self.grad[k] - mean_dy - self.data[k] * mean_dy_xhat);
                           }
                         }
                     });
}

/// Per-channel normalisation of x[N, C, ...] over every axis except 1.
/// Training mode uses batch statistics and folds them into the running
/// estimates (unbiased variance); eval mode uses the running estimates.
inline Tensor batch_norm(const Tensor& x, Tensor& running_mean, Tensor& running_var, bool training,
                         double momentum = 0.1, double eps = 1e-5) {
  if (x.ndim() < 2) throw ShapeError("batch_norm", x.shape(), {}, "expected [N, C, ...]");
  const std::size_t c = x.dim(1);
  if (running_mean.numel() != c || running_var.numel() != c)
    throw ShapeError("batch_norm", x.shape(), running_mean.shape(), "running stats length must equal channels");
  const auto s = detail::split_at(x.shape(), 1);  // outer = N, mid = C, inner = spatial
  const double count = static_cast<double>(s.outer * s.inner);
  auto xv = x.data();
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  if (training) {
    if (count < 2) throw ShapeError("batch_norm", x.shape(), {}, "training mode needs more than one value per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) acc += xv[(o * c + ch) * s.inner + i];
      mu[ch] = acc / count;
      double var = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const double d = xv[(o * c + ch) * s.inner + i] - mu[ch];
          var += d * d;
        }
      inv_std[ch] = 1.0 / std::sqrt(var / count + eps);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mu[ch];
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var / (count - 1.0);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t k = (o * c + ch) * s.inner + i;
        out[k] = (xv[k] - mu[ch]) * inv_std[ch];
      }
  return make_result("batch_norm", x.shape(), std::move(out), {x},
                     [s, c, count, training, inv_std = std::move(inv_std)](detail::Node& self) {
                       auto* g = detail::grad_of(self.inputs[0]);
                       if (!g) return;
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double mean_dy = 0.0, mean_dy_xhat = 0.0;
                         if (training) {
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t i = 0; i < s.inner; ++i) {
                               const std::size_t k = (o * c + ch) * s.inner + i;
                               mean_dy += self.grad[k];
                               mean_dy_xhat += self.grad[k] * self.data[k];
                             }
                           mean_dy /= count;
                           mean_dy_xhat /= count;
                         }
                         for (std::size_t o = 0; o < s.outer; ++o)
                           for (std::size_t i = 0; i < s.inner; ++i) {
                             const std::size_t k = (o * c + ch) * s.inner + i;
                             (*g)[k] += inv_std[ch] * (self.grad[k] - mean_dy - self.data[k] * mean_dy_xhat);
                           }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Spatial

struct Conv2dGeometry {
  std::size_t n, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
};

namespace detail {

inline void im2col(const double* img, const Conv2dGeometry& g, double* cols) {
  const std::size_t hw = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * hw;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.w_out + ox] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

inline void col2im(const double* cols, const Conv2dGeometry& g, double* img) {
  const std::size_t hw = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * hw;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.w_out + ox];
          }
        }
      }
}

}  // namespace detail

/// x[N,Cin,H,W] * w[Cout,Cin,kh,kw] (+ bias[Cout]) with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
  if (x.ndim() != 4 || weight.ndim() != 4) throw ShapeError("conv2d", x.shape(), weight.shape(), "expected 4-D input and weight");
  if (x.dim(1) != weight.dim(1)) throw ShapeError("conv2d", x.shape(), weight.shape(), "input channels differ");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), stride, pad, 0, 0};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) throw ShapeError("conv2d", x.shape(), weight.shape(), "kernel larger than padded input");
  g.h_out = (g.h + 2 * pad - g.kh) / stride + 1;
  g.w_out = (g.w + 2 * pad - g.kw) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != g.c_out) throw ShapeError("conv2d", weight.shape(), bias.shape(), "bias length");
  const std::size_t kdim = g.c_in * g.kh * g.kw, hw = g.h_out * g.w_out;
  std::vector<double> cols(kdim * hw);
  std::vector<double> out(g.n * g.c_out * hw);
  for (std::size_t b = 0; b < g.n; ++b) {
    detail::im2col(x.data().data() + b * g.c_in * g.h * g.w, g, cols.data());
    double* y = out.data() + b * g.c_out * hw;
    detail::gemm(false, false, g.c_out, hw, kdim, weight.data().data(), cols.data(), y, 0.0);
    if (has_bias)
      for (std::size_t co = 0; co < g.c_out; ++co)
        for (std::size_t p = 0; p < hw; ++p) y[co * hw + p] += bias[co];
  }
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result("conv2d", {g.n, g.c_out, g.h_out, g.w_out}, std::move(out), std::move(inputs),
                     [g, has_bias](detail::Node& self) {
                       const std::size_t kdim = g.c_in * g.kh * g.kw, hw = g.h_out * g.w_out;
                       const auto& xv = self.inputs[0]->data;
                       const auto& wv = self.inputs[1]->data;
                       auto* gx = detail::grad_of(self.inputs[0]);
                       auto* gw = detail::grad_of(self.inputs[1]);
                       auto* gb = has_bias ? detail::grad_of(self.inputs[2]) : nullptr;
                       std::vector<double> cols(kdim * hw);
                       for (std::size_t b = 0; b < g.n; ++b) {
                         const double* dy = self.grad.data() + b * g.c_out * hw;
                         if (gw) {
                           detail::im2col(xv.data() + b * g.c_in * g.h * g.w, g, cols.data());
                           detail::gemm(false, true, g.c_out, kdim, hw, dy, cols.data(), gw->data(), 1.0);
                         }
                         if (gx) {
                           detail::gemm(true, false, kdim, hw, g.c_out, wv.data(), dy, cols.data(), 0.0);
                           detail::col2im(cols.data(), g, gx->data() + b * g.c_in * g.h * g.w);
                         }
                         if (gb)
                           for (std::size_t co = 0; co < g.c_out; ++co)
                             for (std::size_t p = 0; p < hw; ++p) (*gb)[co] += dy[co * hw + p];
                       }
                     });
}

namespace detail {
inline Conv2dGeometry pool_geometry(const char* op, const Tensor& x, std::size_t k, std::size_t stride) {
  if (x.ndim() != 4) throw ShapeError(op, x.shape(), {}, "expected [N,C,H,W]");
  if (k == 0 || stride == 0 || x.dim(2) < k || x.dim(3) < k) throw ShapeError(op, x.shape(), {k, stride}, "window does not fit");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(1), k, k, stride, 0, 0, 0};
  g.h_out = (g.h - k) / stride + 1;
  g.w_out = (g.w - k) / stride + 1;
  return g;
}
}  // namespace detail

inline Tensor avg_pool2d(const Tensor& x, std::size_t k, std::size_t stride) {
  const auto g = detail::pool_geometry("avg_pool2d", x, k, stride);
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(g.n * g.c_in * g.h_out * g.w_out);
  auto xv = x.data();
  for (std::size_t p = 0; p < g.n * g.c_in; ++p)
    for (std::size_t oy = 0; oy < g.h_out; ++oy)
      for (std::size_t ox = 0; ox < g.w_out; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) acc += xv[(p * g.h + oy * stride + ky) * g.w + ox * stride + kx];
        out[(p * g.h_out + oy) * g.w_out + ox] = acc * inv;
      }
  return make_result("avg_pool2d", {g.n, g.c_in, g.h_out, g.w_out}, std::move(out), {x}, [g, inv](detail::Node& self) {
    auto* gx = detail::grad_of(self.inputs[0]);
    if (!gx) return;
    for (std::size_t p = 0; p < g.n * g.c_in; ++p)
      for (std::size_t oy = 0; oy < g.h_out; ++oy)
        for (std::size_t ox = 0; ox < g.w_out; ++ox) {
          const double d = self.grad[(p * g.h_out + oy) * g.w_out + ox] * inv;
          for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) (*gx)[(p * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx] += d;
        }
  });
}

/// Max pooling; ties resolve to the first element in raster order.
inline Tensor max_pool2d(const Tensor& x, std::size_t k, std::size_t stride) {
  const auto g = detail::pool_geometry("max_pool2d", x, k, stride);
  std::vector<double> out(g.n * g.c_in * g.h_out * g.w_out);
  std::vector<std::size_t> arg(out.size());
  auto xv = x.data();
  for (std::size_t p = 0; p < g.n * g.c_in; ++p)
    for (std::size_t oy = 0; oy < g.h_out; ++oy)
      for (std::size_t ox = 0; ox < g.w_out; ++ox) {
        std::size_t best = (p * g.h + oy * stride) * g.w + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t i = (p * g.h + oy * stride + ky) * g.w + ox * stride + kx;
            if (xv[i] > xv[best]) best = i;
          }
        const std::size_t o = (p * g.h_out + oy) * g.w_out + ox;
        out[o] = xv[best];
        arg[o] = best;
      }
  return make_result("max_pool2d", {g.n, g.c_in, g.h_out, g.w_out}, std::move(out), {x},
                     [arg = std::move(arg)](detail::Node& self) {
                       if (auto* gx = detail::grad_of(self.inputs[0]))
                         for (std::size_t o = 0; o < arg.size(); ++o) (*gx)[arg[o]] += self.grad[o];
                     });
}

/// [N,C,H,W] -> [N,C]
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("global_avg_pool", x.shape(), {}, "expected [N,C,H,W]");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  std::vector<double> out(nc);
  auto xv = x.data();
  for (std::size_t p = 0; p < nc; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    out[p] = acc * inv;
  }
  return make_result("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x}, [nc, hw, inv](detail::Node& self) {
    if (auto* gx = detail::grad_of(self.inputs[0]))
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < hw; ++i) (*gx)[p * hw + i] += self.grad[p] * inv;
  });
}

// ---------------------------------------------------------------------------
// Loss primitives

/// Mean softmax cross-entropy of logits[N,K] against integer labels with label
/// smoothing: target distribution (1-eps)*onehot + eps/K.
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels, double smoothing = 0.0) {
  if (logits.ndim() != 2 || labels.size() != logits.dim(0))
    throw ShapeError("cross_entropy_logits", logits.shape(), {labels.size()}, "expected [N,K] logits and N labels");
  if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("cross_entropy_logits: smoothing must be in [0,1)");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw std::out_of_range("cross_entropy_logits: label out of range");
  std::vector<double> probs(n * k);
  double total = 0.0;
  auto lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    double mean_nll = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - log_z);
      mean_nll += log_z - row[j];
    }
    mean_nll /= static_cast<double>(k);
    const double target_nll = log_z - row[static_cast<std::size_t>(labels[i])];
    total += (1.0 - smoothing) * target_nll + smoothing * mean_nll;
  }
  return make_result("cross_entropy_logits", {1}, {total / static_cast<double>(n)}, {logits},
                     [n, k, smoothing, labels, probs = std::move(probs)](detail::Node& self) {
                       auto* g = detail::grad_of(self.inputs[0]);
                       if (!g) return;
                       const double scale = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j) {
                           double q = smoothing / static_cast<double>(k);
                           if (static_cast<int>(j) == labels[i]) q += 1.0 - smoothing;
                           (*g)[i * k + j] += scale * (probs[i * k + j] - q);
                         }
                     });
}

/// Pairwise Euclidean distances between the rows of F[N,D]. The derivative at
/// a zero distance is taken as zero.
inline Tensor l2_distance_matrix(const Tensor& f) {
  if (f.ndim() != 2) throw ShapeError("l2_distance_matrix", f.shape(), {}, "expected [N,D]");
  const std::size_t n = f.dim(0), d = f.dim(1);
  std::vector<double> out(n * n, 0.0);
  auto fv = f.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = fv[i * d + c] - fv[j * d + c];
        acc += diff * diff;
      }
      out[i * n + j] = std::sqrt(acc);
    }
  return make_result("l2_distance_matrix", {n, n}, std::move(out), {f}, [n, d](detail::Node& self) {
    auto* g = detail::grad_of(self.inputs[0]);
    if (!g) return;
    const auto& fv = self.inputs[0]->data;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double dist = self.data[i * n + j];
        const double dy = self.grad[i * n + j];
        if (dist <= 0.0 || dy == 0.0) continue;
        const double s = dy / dist;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = fv[i * d + c] - fv[j * d + c];
          (*g)[i * d + c] += s * diff;
          (*g)[j * d + c] -= s * diff;
        }
      }
  });
}

}  // namespace geomamba
