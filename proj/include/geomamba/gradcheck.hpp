#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "geomamba/rng.hpp"
#include "geomamba/tensor.hpp"

namespace geomamba {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// |a - n| / max(|a| + |n|, floor). The floor keeps exactly-zero gradients
/// (e.g. a bias feeding a batch norm) from being judged on rounding noise alone.
inline double gradcheck_error(double analytic, double numeric, double floor = 1e-12) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

/// Compares reverse-mode gradients of the scalar `f()` with respect to the
/// given leaves against central differences (f(x + eps e) - f(x - eps e)) / 2 eps,
/// perturbing leaf storage in place and restoring it afterwards.
/// `max_coords_per_leaf` > 0 samples that many coordinates per leaf.
inline GradcheckResult gradcheck_leaves(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps = 1e-5,
                                        std::size_t max_coords_per_leaf = 0, std::uint64_t sample_seed = 0,
                                        double floor = 1e-12) {
  for (auto& t : leaves) t.zero_grad();
  Tensor out = f();
  if (out.numel() != 1) throw ShapeError("gradcheck", out.shape(), {1}, "function must return a scalar");
  backward(out);
  std::vector<std::vector<double>> analytic(leaves.size());
  for (std::size_t k = 0; k < leaves.size(); ++k)
    analytic[k] = leaves[k].has_grad() ? std::vector<double>(leaves[k].grad().begin(), leaves[k].grad().end())
                                       : std::vector<double>(leaves[k].numel(), 0.0);

  auto eval = [&]() {
    NoGradGuard guard;
    return f().item();
  };

  GradcheckResult res;
  Rng rng = make_stream(sample_seed, 0x9c);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const std::size_t n = leaves[k].numel();
    std::vector<std::size_t> coords;
    if (max_coords_per_leaf == 0 || max_coords_per_leaf >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < max_coords_per_leaf; ++i) coords.push_back(pick(rng));
    }
    auto data = leaves[k].mutable_data();
    for (std::size_t idx : coords) {
      const double x0 = data[idx];
      data[idx] = x0 + eps;
      const double f_plus = eval();
      data[idx] = x0 - eps;
      const double f_minus = eval();
      data[idx] = x0;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double err = gradcheck_error(analytic[k][idx], numeric, floor);
      ++res.coordinates_checked;
      if (res.coordinates_checked == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_input = k;
        res.worst_index = idx;
        res.analytic = analytic[k][idx];
        res.numeric = numeric;
      }
    }
  }
  return res;
}

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Gradcheck of a function of explicit inputs; the inputs are copied into
/// fresh leaves so the caller's tensors are untouched.
inline GradcheckResult gradcheck(const TensorFn& f, const std::vector<Tensor>& inputs, double eps = 1e-5) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(t.detach_copy(true));
  return gradcheck_leaves([&]() { return f(leaves); }, leaves, eps);
}

inline GradcheckResult gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
  return gradcheck([&f](const std::vector<Tensor>& v) { return f(v[0]); }, std::vector<Tensor>{x}, eps);
}

}  // namespace geomamba
