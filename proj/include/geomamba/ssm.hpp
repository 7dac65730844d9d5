#pragma once

#include "geomamba/ops.hpp"

namespace geomamba {

/// Diagonal selective state-space scan with zero-order-hold discretisation.
///
/// Per batch n and channel e, with state h in R^S:
///   Abar_t = exp(delta_t * A[e,:]),  Bbar_t = delta_t * B_t
///   h_t    = Abar_t * h_{t-1} + Bbar_t * x_t
///   y_t    = <C_t, h_t> + D[e] * x_t
///
/// Shapes: x, delta [N,L,E]; A [E,S]; B, C [N,L,S]; D [E]. With `reverse` the
/// recurrence runs from t = L-1 down to 0.
inline Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                             const Tensor& d, bool reverse = false) {
  if (x.ndim() != 3) throw ShapeError("selective_scan", x.shape(), {}, "x must be [N,L,E]");
  const std::size_t n = x.dim(0), len = x.dim(1), e = x.dim(2);
  if (delta.shape() != x.shape()) throw ShapeError("selective_scan", x.shape(), delta.shape(), "delta");
  if (a.ndim() != 2 || a.dim(0) != e) throw ShapeError("selective_scan", x.shape(), a.shape(), "A must be [E,S]");
  const std::size_t s = a.dim(1);
  const Shape bc_shape{n, len, s};
  if (b.shape() != bc_shape) throw ShapeError("selective_scan", bc_shape, b.shape(), "B must be [N,L,S]");
  if (c.shape() != bc_shape) throw ShapeError("selective_scan", bc_shape, c.shape(), "C must be [N,L,S]");
  if (d.numel() != e) throw ShapeError("selective_scan", x.shape(), d.shape(), "D must be [E]");

  auto xv = x.data(), dv = delta.data(), av = a.data(), bv = b.data(), cv = c.data(), skip = d.data();
  std::vector<double> y(n * len * e);
  std::vector<double> states(n * len * e * s);  // h_t after the update at t, indexed by t
  std::vector<double> h(s);
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t ch = 0; ch < e; ++ch) {
      std::fill(h.begin(), h.end(), 0.0);
      for (std::size_t step = 0; step < len; ++step) {
        const std::size_t t = reverse ? len - 1 - step : step;
        const std::size_t xi = (bi * len + t) * e + ch;
        const std::size_t bci = (bi * len + t) * s;
        const double dt = dv[xi], xt = xv[xi];
        double acc = skip[ch] * xt;
        double* saved = states.data() + xi * s;
        for (std::size_t k = 0; k < s; ++k) {
          h[k] = std::exp(dt * av[ch * s + k]) * h[k] + dt * bv[bci + k] * xt;
          saved[k] = h[k];
          acc += cv[bci + k] * h[k];
        }
        y[xi] = acc;
      }
    }

  return make_result(
      "selective_scan", x.shape(), std::move(y), {x, delta, a, b, c, d},
      [n, len, e, s, reverse, states = std::move(states)](detail::Node& self) {
        const auto& xv = self.inputs[0]->data;
        const auto& dv = self.inputs[1]->data;
        const auto& av = self.inputs[2]->data;
        const auto& bv = self.inputs[3]->data;
        const auto& cv = self.inputs[4]->data;
        const auto& skip = self.inputs[5]->data;
        auto* gx = detail::grad_of(self.inputs[0]);
        auto* gdt = detail::grad_of(self.inputs[1]);
        auto* ga = detail::grad_of(self.inputs[2]);
        auto* gb = detail::grad_of(self.inputs[3]);
        auto* gc = detail::grad_of(self.inputs[4]);
        auto* gd = detail::grad_of(self.inputs[5]);
        std::vector<double> dh(s);
        for (std::size_t bi = 0; bi < n; ++bi)
          for (std::size_t ch = 0; ch < e; ++ch) {
            std::fill(dh.begin(), dh.end(), 0.0);
            for (std::size_t step = len; step-- > 0;) {
              const std::size_t t = reverse ? len - 1 - step : step;
              const std::size_t xi = (bi * len + t) * e + ch;
              const std::size_t bci = (bi * len + t) * s;
              const double dy = self.grad[xi];
              const double dt = dv[xi], xt = xv[xi];
              const double* h_t = states.data() + xi * s;
              const double* h_prev = nullptr;
              if (step > 0) {
                const std::size_t tp = reverse ? t + 1 : t - 1;
                h_prev = states.data() + ((bi * len + tp) * e + ch) * s;
              }
              if (gd) (*gd)[ch] += dy * xt;
              double dx = dy * skip[ch];
              double ddt = 0.0;
              for (std::size_t k = 0; k < s; ++k) {
                if (gc) (*gc)[bci + k] += dy * h_t[k];
                dh[k] += dy * cv[bci + k];
                const double decay = std::exp(dt * av[ch * s + k]);
                const double hp = h_prev ? h_prev[k] : 0.0;
                const double d_decay = dh[k] * hp;
                ddt += d_decay * decay * av[ch * s + k] + dh[k] * bv[bci + k] * xt;
                if (ga) (*ga)[ch * s + k] += d_decay * decay * dt;
                if (gb) (*gb)[bci + k] += dh[k] * dt * xt;
                dx += dh[k] * dt * bv[bci + k];
                dh[k] *= decay;
              }
              if (gx) (*gx)[xi] += dx;
              if (gdt) (*gdt)[xi] += ddt;
            }
          }
      });
}

}  // namespace geomamba
