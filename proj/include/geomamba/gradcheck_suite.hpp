#pragma once

#include <string>
#include <vector>

#include "geomamba/gradcheck.hpp"
#include "geomamba/losses.hpp"
#include "geomamba/ops.hpp"
#include "geomamba/ssm.hpp"
#include "geomamba/trainer.hpp"

namespace geomamba::gradcheck_suite {

struct Case {
  std::string name;
  double tolerance = 1e-4;
  TensorFn fn;
  std::vector<Tensor> inputs;
};

struct CaseReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

namespace detail {

/// sum(y * w) for a fixed random w, so that layout ops are not checked
/// through a permutation-invariant reduction.
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng = make_stream(seed, 0x7e);
  return sum(mul(y, Tensor::randn(y.shape(), rng)));
}

/// Values bounded away from zero (for kinked ops).
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace detail

/// One case per differentiable op and composed loss.
inline std::vector<Case> op_cases(std::uint64_t seed = 7) {
  Rng rng = make_stream(seed, 0x51);
  auto rn = [&](Shape s, double sd = 1.0) { return Tensor::randn(std::move(s), rng, sd); };
  std::vector<Case> cases;
  auto unary_case = [&](const std::string& name, Tensor (*op)(const Tensor&), Tensor x) {
    cases.push_back({name, 1e-4, [op](const std::vector<Tensor>& v) { return detail::probe(op(v[0]), 1); }, {x}});
  };
  cases.push_back({"add", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(add(v[0], v[1]), 1); }, {rn({3, 4}), rn({3, 4})}});
  cases.push_back({"sub", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(sub(v[0], v[1]), 1); }, {rn({3, 4}), rn({3, 4})}});
  cases.push_back({"mul", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(mul(v[0], v[1]), 1); }, {rn({3, 4}), rn({3, 4})}});
  cases.push_back({"scale", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(scale(v[0], -1.7), 1); }, {rn({5})}});
  cases.push_back({"add_scalar", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(add_scalar(v[0], 0.3), 1); }, {rn({5})}});
  unary_case("relu", relu, detail::away_from_zero({4, 5}, rng));
  unary_case("gelu", gelu, rn({4, 5}));
  unary_case("sigmoid", sigmoid, rn({4, 5}));
  unary_case("silu", silu, rn({4, 5}));
  unary_case("softplus", softplus, rn({4, 5}));
  unary_case("exp", exp, rn({4, 5}, 0.5));
  cases.push_back({"add_bias", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(add_bias(v[0], v[1], 1), 1); }, {rn({2, 3, 4}), rn({3})}});
  cases.push_back({"mul_channel", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(mul_channel(v[0], v[1], 2), 1); }, {rn({2, 3, 4}), rn({4})}});
  cases.push_back({"sum", 1e-4, [](const std::vector<Tensor>& v) { return sum(mul(v[0], v[0])); }, {rn({6})}});
  cases.push_back({"mean", 1e-4, [](const std::vector<Tensor>& v) { return mean(mul(v[0], v[0])); }, {rn({6})}});
  cases.push_back({"matmul", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(matmul(v[0], v[1]), 1); }, {rn({3, 4}), rn({4, 2})}});
  cases.push_back({"matmul_batched", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(matmul(v[0], v[1]), 1); }, {rn({2, 3, 4}), rn({2, 4, 5})}});
  cases.push_back({"reshape", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(reshape(v[0], {6, 2}), 1); }, {rn({3, 4})}});
  cases.push_back({"flatten", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(flatten(v[0], 1), 1); }, {rn({2, 3, 2})}});
  cases.push_back({"permute", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(permute(v[0], {2, 0, 3, 1}), 1); }, {rn({2, 3, 4, 2})}});
  cases.push_back({"transpose", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(transpose(v[0], 0, 2), 1); }, {rn({2, 3, 4})}});
  cases.push_back({"concat", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(concat({v[0], v[1]}, 1), 1); }, {rn({2, 3, 2}), rn({2, 1, 2})}});
  cases.push_back({"slice", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(slice(v[0], 1, 1, 3), 1); }, {rn({2, 4, 3})}});
  cases.push_back({"gather", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(gather(v[0], {0, 5, 5, 2}), 1); }, {rn({2, 3})}});
  cases.push_back({"softmax", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(softmax(v[0], 1), 1); }, {rn({2, 5, 3})}});
  cases.push_back({"layer_norm", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(layer_norm(v[0], 2), 1); }, {rn({2, 3, 6})}});
  cases.push_back({"layer_norm_mid_axis", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(layer_norm(v[0], 1), 1); }, {rn({2, 5, 3})}});
  cases.push_back({"batch_norm_train", 1e-4,
                   [](const std::vector<Tensor>& v) {
                     Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
                     return detail::probe(batch_norm(v[0], rm, rv, true), 1);
                   },
                   {rn({4, 3, 2, 2})}});
  cases.push_back({"batch_norm_eval", 1e-4,
                   [](const std::vector<Tensor>& v) {
                     Tensor rm = Tensor::from({3}, {0.1, -0.2, 0.3}), rv = Tensor::from({3}, {0.5, 1.5, 2.0});
                     return detail::probe(batch_norm(v[0], rm, rv, false), 1);
                   },
                   {rn({2, 3, 2, 2})}});
  cases.push_back({"conv2d", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(conv2d(v[0], v[1], v[2], 2, 1), 1); },
                   {rn({2, 2, 5, 5}), rn({3, 2, 3, 3}), rn({3})}});
  cases.push_back({"conv2d_1x1", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(conv2d(v[0], v[1], v[2], 1, 0), 1); },
                   {rn({1, 3, 4, 4}), rn({1, 3, 1, 1}), rn({1})}});
  cases.push_back({"avg_pool2d", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(avg_pool2d(v[0], 2, 2), 1); }, {rn({1, 2, 4, 4})}});
  cases.push_back({"max_pool2d", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(max_pool2d(v[0], 2, 2), 1); }, {rn({1, 2, 4, 4})}});
  cases.push_back({"global_avg_pool", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(global_avg_pool(v[0]), 1); }, {rn({2, 3, 2, 2})}});
  cases.push_back({"cross_entropy_logits", 1e-4,
                   [](const std::vector<Tensor>& v) { return cross_entropy_logits(v[0], {0, 2, 1, 2}, 0.1); }, {rn({4, 3})}});
  cases.push_back({"l2_distance_matrix", 1e-4, [](const std::vector<Tensor>& v) { return detail::probe(l2_distance_matrix(v[0]), 1); }, {rn({4, 3})}});
  {
    const std::size_t n = 2, len = 5, e = 3, s = 2;
    Tensor delta = Tensor::uniform({n, len, e}, rng, 0.1, 1.0);
    Tensor a = Tensor::uniform({e, s}, rng, -1.5, -0.2);
    for (bool rev : {false, true})
      cases.push_back({rev ? "selective_scan_reverse" : "selective_scan", 1e-4,
                       [rev](const std::vector<Tensor>& v) {
                         return detail::probe(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], rev), 1);
                       },
                       {rn({n, len, e}), delta, a, rn({n, len, s}), rn({n, len, s}), rn({e})}});
  }
  // Composed losses.
  cases.push_back({"identity_loss", 1e-4,
                   [](const std::vector<Tensor>& v) { return losses::identity_loss(v[0], {1, 0, 1, 3, 2}, 0.1); }, {rn({5, 4})}});
  cases.push_back({"triplet_loss", 1e-4,
                   [](const std::vector<Tensor>& v) { return losses::triplet_loss(v[0], {0, 0, 1, 1, 2, 2}, 2.0).loss; },
                   {rn({6, 4})}});
  {
    std::bernoulli_distribution coin(0.3);
    std::vector<double> targets(2 * 1 * 3 * 3);
    for (auto& t : targets) t = coin(rng) ? 1.0 : 0.0;
    cases.push_back({"focal_loss", 1e-4,
                     [targets](const std::vector<Tensor>& v) { return losses::focal_loss(v[0], targets, 0.25, 2.0); },
                     {rn({2, 1, 3, 3}, 2.0)}});
  }
  {
    auto random_masks = [&](std::size_t count, std::size_t side) {
      std::vector<imgproc::BinaryMask> out;
      std::bernoulli_distribution coin(0.2);
      for (std::size_t i = 0; i < count; ++i) {
        imgproc::BinaryMask m(side, side);
        for (auto& b : m.bits) b = coin(rng) ? 1 : 0;
        out.push_back(m);
      }
      return out;
    };
    const auto y_opt = random_masks(2, 8), y_sar = random_masks(2, 8);
    losses::LossWeights w;
    auto gcc = [y_opt, y_sar, w](const std::vector<Tensor>& v) {
      return losses::gcc_loss({v[0], v[1], v[2], v[3]}, y_opt, y_sar, w).total;
    };
    cases.push_back({"gcc_loss", 1e-4, gcc, {rn({2, 1, 4, 4}), rn({2, 1, 2, 2}), rn({2, 1, 4, 4}), rn({2, 1, 2, 2})}});
    cases.push_back({"total_loss", 1e-4,
                     [gcc, w](const std::vector<Tensor>& v) {
                       Tensor id = losses::identity_loss(v[4], {0, 1, 0, 1}, w.label_smoothing);
                       Tensor tri = losses::triplet_loss(v[5], {0, 1, 0, 1}, w.margin + 1.5).loss;
                       return losses::total_loss(losses::retrieval_loss(id, tri, w.lambda_tri), gcc(v), w.lambda_gcc);
                     },
                     {rn({2, 1, 4, 4}), rn({2, 1, 2, 2}), rn({2, 1, 4, 4}), rn({2, 1, 2, 2}), rn({4, 2}), rn({4, 3})}});
  }
  return cases;
}

inline CaseReport run_case(const Case& c) {
  const auto r = gradcheck(c.fn, c.inputs, 1e-5);
  return {c.name, r.max_rel_error, c.tolerance, r.coordinates_checked, r.max_rel_error < c.tolerance};
}

/// A square op whose backward rule is deliberately wrong (3x instead of 2x);
/// the suite must flag it.
inline Case corrupted_case() {
  auto bad_square = [](const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    return make_result("corrupt_square", x.shape(), std::move(out), {x}, [](geomamba::detail::Node& self) {
      if (auto* g = geomamba::detail::grad_of(self.inputs[0]))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * 3.0 * self.inputs[0]->data[i];
    });
  };
  Rng rng = make_stream(3, 0x33);
  return {"corrupted_square", 1e-4, [bad_square](const std::vector<Tensor>& v) { return sum(bad_square(v[0])); },
          {Tensor::randn({4}, rng)}};
}

/// Full training objective of a reduced model (32x32 inputs, two classes,
/// cross-paired GFI, both supervision heads) against sampled parameter
/// coordinates. Relative errors use a 1e-6 denominator floor: the central
/// difference of an O(1) objective carries ~1e-10 of rounding noise.
inline CaseReport end_to_end_case(std::uint64_t seed = 11, std::size_t coords_per_param = 4, double tolerance = 1e-3) {
  model::ModelConfig mc;
  mc.stages.channels = {4, 8, 8, 8};
  mc.image_size = 32;
  mc.num_classes = 2;
  mc.embed_dim = 16;
  mc.heads = 2;
  mc.mlp_ratio = 2;
  mc.ssm_state = 2;
  model::GeoMamba net(mc, seed);

  Rng rng = make_stream(seed, 0xe2e);
  const std::size_t n = 2, side = mc.image_size;
  train::Batch b;
  b.optical = Tensor::randn({n, 3, side, side}, rng);
  b.sar = Tensor::randn({n, 3, side, side}, rng);
  b.prior = Tensor::randn({n, 2, side, side}, rng);
  b.labels = {0, 1};
  std::bernoulli_distribution coin(0.25);
  for (std::size_t i = 0; i < n; ++i) {
    imgproc::BinaryMask mo(side, side), ms(side, side);
    for (auto& v : mo.bits) v = coin(rng) ? 1 : 0;
    for (auto& v : ms.bits) v = coin(rng) ? 1 : 0;
    b.mask_opt.push_back(mo);
    b.mask_sar.push_back(ms);
  }
  losses::LossWeights w;
  w.margin = 5.0;  // keeps every hardest-triplet hinge active
  auto f = [&]() {
    return train::compute_objective(net, b, w, {true, true}, model::GfiPairing::kCross).total;
  };
  std::vector<Tensor> leaves;
  for (const auto& e : net.params().entries())
    if (e.tensor.requires_grad()) leaves.push_back(e.tensor);
  const auto r = gradcheck_leaves(f, leaves, 1e-5, coords_per_param, seed, 1e-6);
  return {"end_to_end_objective", r.max_rel_error, tolerance, r.coordinates_checked, r.max_rel_error < tolerance};
}

}  // namespace geomamba::gradcheck_suite
