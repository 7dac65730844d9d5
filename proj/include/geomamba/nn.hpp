#pragma once

#include <map>
#include <string>
#include <vector>

#include "geomamba/ops.hpp"
#include "geomamba/rng.hpp"

namespace geomamba::nn {

/// Ordered registry of named parameters and buffers (running statistics).
/// Names are stable and double as checkpoint keys.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor add(const std::string& name, Tensor t, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }

  const Entry* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  Tensor get(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw std::out_of_range("ParamStore: no entry " + name);
    return e->tensor;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Freezes (or unfreezes) every trainable entry whose name starts with `prefix`.
  void set_trainable_prefix(const std::string& prefix, bool on) {
    for (auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0 && e.trainable) e.tensor.set_requires_grad(on);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Init { kKaiming, kLecun, kZero };

inline Tensor init_weight(Shape shape, std::size_t fan_in, Init init, Rng& rng) {
  switch (init) {
    case Init::kZero:
      return Tensor::zeros(std::move(shape));
    case Init::kKaiming:
      return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
    case Init::kLecun:
    default:
      return Tensor::randn(std::move(shape), rng, std::sqrt(1.0 / static_cast<double>(fan_in)));
  }
}

/// y = x W + b over the last axis of x[..., in].
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined

  Tensor operator()(const Tensor& x) const {
    const std::size_t in = weight.dim(0), out = weight.dim(1);
    if (x.shape().back() != in) throw ShapeError("linear", x.shape(), weight.shape(), "last axis must equal in-features");
    Shape out_shape = x.shape();
    out_shape.back() = out;
    Tensor y = matmul(reshape(x, {x.numel() / in, in}), weight);
    if (bias.defined()) y = add_bias(y, bias, 1);
    return reshape(y, std::move(out_shape));
  }
};

inline Linear make_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                          Init init = Init::kLecun, bool with_bias = true) {
  Linear l;
  l.weight = ps.add(name + ".weight", init_weight({in, out}, in, init, rng));
  if (with_bias) l.bias = ps.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

inline Conv2d make_conv(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                        std::size_t stride, std::size_t pad, Rng& rng, Init init = Init::kKaiming, bool with_bias = true) {
  Conv2d c;
  c.weight = ps.add(name + ".weight", init_weight({out, in, kernel, kernel}, in * kernel * kernel, init, rng));
  if (with_bias) c.bias = ps.add(name + ".bias", Tensor::zeros({out}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

/// Batch normalisation over axis 1 with learned affine.
struct BatchNorm {
  Tensor gamma, beta, running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  Tensor operator()(const Tensor& x, bool training) {
    Tensor y = batch_norm(x, running_mean, running_var, training, momentum, eps);
    return add_bias(mul_channel(y, gamma, 1), beta, 1);
  }
};

inline BatchNorm make_batch_norm(ParamStore& ps, const std::string& name, std::size_t channels) {
  BatchNorm bn;
  bn.gamma = ps.add(name + ".gamma", Tensor::full({channels}, 1.0));
  bn.beta = ps.add(name + ".beta", Tensor::zeros({channels}));
  bn.running_mean = ps.add(name + ".running_mean", Tensor::zeros({channels}), false);
  bn.running_var = ps.add(name + ".running_var", Tensor::full({channels}, 1.0), false);
  return bn;
}

/// Layer normalisation over the last axis with learned affine.
struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  Tensor operator()(const Tensor& x) const {
    const std::size_t last = x.ndim() - 1;
    return add_bias(mul_channel(layer_norm(x, last, eps), gamma, last), beta, last);
  }
};

inline LayerNorm make_layer_norm(ParamStore& ps, const std::string& name, std::size_t dim, double eps = 1e-5) {
  LayerNorm ln;
  ln.gamma = ps.add(name + ".gamma", Tensor::full({dim}, 1.0));
  ln.beta = ps.add(name + ".beta", Tensor::zeros({dim}));
  ln.eps = eps;
  return ln;
}

/// [N,C,H,W] -> [N,H*W,C]
inline Tensor to_tokens(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {n, h * w, c});
}

/// [N,H*W,C] -> [N,C,H,W]
inline Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w) {
  const std::size_t n = t.dim(0), c = t.dim(2);
  if (t.dim(1) != h * w) throw ShapeError("from_tokens", t.shape(), {h, w}, "token count must equal H*W");
  return permute(reshape(t, {n, h, w, c}), {0, 3, 1, 2});
}

}  // namespace geomamba::nn
