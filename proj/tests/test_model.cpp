#include <gtest/gtest.h>

#include <cmath>

#include "geomamba/gradcheck.hpp"
#include "geomamba/losses.hpp"
#include "geomamba/model.hpp"
#include "geomamba/ssm.hpp"

using namespace geomamba;
using namespace geomamba::model;

namespace {

ModelConfig small_config(std::size_t image = 64, std::size_t embed = 1024) {
  ModelConfig cfg;
  cfg.image_size = image;
  cfg.embed_dim = embed;
  return cfg;
}

void fill(Tensor t, Rng& rng, double sd = 0.3) {
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : t.mutable_data()) v = nd(rng);
}

void expect_bit_equal(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]) << "index " << i;
}

// Naive recurrence for one channel and a one-dimensional state.
std::vector<double> naive_scan(const std::vector<double>& x, const std::vector<double>& dt, double a,
                               const std::vector<double>& b, const std::vector<double>& c, double d) {
  std::vector<double> y(x.size());
  double h = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    h = std::exp(dt[t] * a) * h + dt[t] * b[t] * x[t];
    y[t] = c[t] * h + d * x[t];
  }
  return y;
}

}  // namespace

TEST(Backbone, StageShapesAt64) {
  GeoMamba net(small_config(), 1);
  Rng rng = make_stream(1, 9);
  const auto st = net.backbone_forward(Tensor::randn({2, 3, 64, 64}, rng), Modality::kOptical, false);
  EXPECT_EQ(st[0].shape(), (Shape{2, 16, 16, 16}));
  EXPECT_EQ(st[1].shape(), (Shape{2, 32, 8, 8}));
  EXPECT_EQ(st[2].shape(), (Shape{2, 64, 4, 4}));
  EXPECT_EQ(st[3].shape(), (Shape{2, 128, 2, 2}));
}

TEST(Backbone, ZeroInputGivesZeroStageZero) {
  GeoMamba net(small_config(), 2);
  const Tensor w = net.params().get("stem.opt.0.conv.weight"), b = net.params().get("stem.opt.0.conv.bias");
  const Tensor pre = conv2d(Tensor::zeros({1, 3, 64, 64}), w, b, 2, 1);
  for (double v : pre.data()) EXPECT_EQ(v, 0.0);
  const auto st = net.backbone_forward(Tensor::zeros({1, 3, 64, 64}), Modality::kOptical, false);
  for (double v : st[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, BatchPermutationEquivariantInEval) {
  GeoMamba net(small_config(64, 32), 3);
  Rng rng = make_stream(3, 9);
  const Tensor x = Tensor::randn({3, 3, 64, 64}, rng);
  std::vector<double> perm_values;
  const std::vector<std::size_t> perm = {2, 0, 1};
  const std::size_t item = 3 * 64 * 64;
  for (auto p : perm) perm_values.insert(perm_values.end(), x.data().begin() + p * item, x.data().begin() + (p + 1) * item);
  const Tensor xp = Tensor::from({3, 3, 64, 64}, perm_values);
  ForwardOptions opt;
  opt.use_gfi = false;
  const auto a = net.forward({&x, nullptr, nullptr}, opt).optical->embedding;
  const auto b = net.forward({&xp, nullptr, nullptr}, opt).optical->embedding;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(b[i * 32 + k], a[perm[i] * 32 + k], 1e-12);
}

TEST(Backbone, RejectsBadInputs) {
  GeoMamba net(small_config(), 4);
  EXPECT_THROW(net.backbone_forward(Tensor::zeros({1, 1, 64, 64}), Modality::kSar, false), ShapeError);
  EXPECT_THROW(net.backbone_forward(Tensor::zeros({1, 3, 48, 48}), Modality::kSar, false), ShapeError);
  EXPECT_THROW(GeoMamba(small_config(48), 1), std::invalid_argument);
}

TEST(Scan, UnitSystemIsPrefixSum) {
  const std::size_t len = 9;
  std::vector<double> xv(len);
  for (std::size_t t = 0; t < len; ++t) xv[t] = static_cast<double>(t) - 3.5;
  const Tensor x = Tensor::from({1, len, 1}, xv);
  const Tensor y = selective_scan(x, Tensor::full({1, len, 1}, 1.0), Tensor::zeros({1, 1}), Tensor::full({1, len, 1}, 1.0),
                                  Tensor::full({1, len, 1}, 1.0), Tensor::zeros({1}));
  double acc = 0.0;
  for (std::size_t t = 0; t < len; ++t) {
    acc += xv[t];
    EXPECT_DOUBLE_EQ(y[t], acc);
  }
}

TEST(Scan, SingleStepClosedForm) {
  const Tensor y = selective_scan(Tensor::from({1, 1, 1}, {2.0}), Tensor::from({1, 1, 1}, {0.5}), Tensor::from({1, 1}, {-1.0}),
                                  Tensor::from({1, 1, 1}, {3.0}), Tensor::from({1, 1, 1}, {0.7}), Tensor::from({1}, {0.25}));
  EXPECT_NEAR(y[0], 0.7 * (0.5 * 3.0) * 2.0 + 0.25 * 2.0, 1e-15);
}

TEST(Scan, LengthSevenMatchesLoopOracleBothDirections) {
  Rng rng = make_stream(5, 9);
  const std::size_t len = 7;
  const Tensor x = Tensor::randn({1, len, 1}, rng), b = Tensor::randn({1, len, 1}, rng), c = Tensor::randn({1, len, 1}, rng);
  const Tensor dt = Tensor::uniform({1, len, 1}, rng, 0.01, 1.0);
  const Tensor a = Tensor::from({1, 1}, {-0.8}), d = Tensor::from({1}, {0.3});
  auto vec = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  const auto want = naive_scan(vec(x), vec(dt), -0.8, vec(b), vec(c), 0.3);
  const Tensor y = selective_scan(x, dt, a, b, c, d);
  for (std::size_t t = 0; t < len; ++t) EXPECT_NEAR(y[t], want[t], 1e-12);

  auto rev = [](std::vector<double> v) { return std::vector<double>(v.rbegin(), v.rend()); };
  const auto want_rev = rev(naive_scan(rev(vec(x)), rev(vec(dt)), -0.8, rev(vec(b)), rev(vec(c)), 0.3));
  const Tensor yr = selective_scan(x, dt, a, b, c, d, true);
  for (std::size_t t = 0; t < len; ++t) EXPECT_NEAR(yr[t], want_rev[t], 1e-12);
}

TEST(Scan, GradcheckMultiChannel) {
  Rng rng = make_stream(6, 9);
  const Tensor x = Tensor::randn({2, 5, 3}, rng), dt = Tensor::uniform({2, 5, 3}, rng, 0.1, 0.9);
  const Tensor a = Tensor::uniform({3, 2}, rng, -1.5, -0.2), b = Tensor::randn({2, 5, 2}, rng), c = Tensor::randn({2, 5, 2}, rng);
  const Tensor d = Tensor::randn({3}, rng);
  const auto r = gradcheck(
      [](const std::vector<Tensor>& in) {
        return sum(mul(selective_scan(in[0], in[1], in[2], in[3], in[4], in[5], true), in[0]));
      },
      {x, dt, a, b, c, d});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Gfi, InjectWithZeroOutProjectionIsIdentity) {
  GeoMamba net(small_config(), 7);
  Rng rng = make_stream(7, 9);
  const Tensor xs = Tensor::randn({2, 32, 8, 8}, rng), geo = Tensor::randn({2, 32, 8, 8}, rng);
  expect_bit_equal(net.gfi(1).inject(xs, geo), xs);
}

TEST(Gfi, InjectIgnoresKeyValueTokenOrder) {
  GeoMamba net(small_config(), 8);
  Rng rng = make_stream(8, 9);
  auto& g = net.gfi(1);
  fill(g.inject_attn.out_proj.weight, rng);
  const Tensor xs = Tensor::randn({1, 32, 4, 4}, rng), geo = Tensor::randn({1, 32, 4, 4}, rng);
  // Reverse the spatial order of the prior tokens.
  std::vector<double> shuffled(geo.numel());
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t p = 0; p < 16; ++p) shuffled[c * 16 + p] = geo[c * 16 + (15 - p)];
  const Tensor a = g.inject(xs, geo), b = g.inject(xs, Tensor::from({1, 32, 4, 4}, shuffled));
  double moved = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-12);
    moved = std::max(moved, std::abs(a[i] - xs[i]));
  }
  EXPECT_GT(moved, 1e-3);
}

TEST(Gfi, SingleKeyTokenGetsFullWeight) {
  GeoMamba net(small_config(), 9);
  Rng rng = make_stream(9, 9);
  auto attn = net.gfi(1).inject_attn;
  fill(attn.out_proj.weight, rng);
  const Tensor q = Tensor::randn({1, 5, 32}, rng), kv = Tensor::randn({1, 1, 32}, rng);
  const Tensor got = add(q, attn(q, kv));
  const Tensor proj_v = attn.out_proj(attn.v_proj(kv));
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_NEAR(got[t * 32 + c], q[t * 32 + c] + proj_v[c], 1e-12);
}

TEST(Gfi, CrossWithZeroProjectionsReturnsQuery) {
  GeoMamba net(small_config(), 10);
  Rng rng = make_stream(10, 9);
  const Tensor xq = Tensor::randn({2, 64, 4, 4}, rng);
  for (std::size_t side : {1u, 2u, 4u, 6u}) {
    const Tensor xkv = Tensor::randn({2, 64, side, side}, rng);
    const Tensor out = net.gfi(2).opt_from_sar(xq, xkv);
    EXPECT_EQ(out.shape(), xq.shape());
    expect_bit_equal(out, xq);
  }
}

TEST(Gfi, CrossOneHeadOneTokenHandComputation) {
  nn::ParamStore ps;
  Rng rng = make_stream(11, 9);
  ModelConfig cfg;
  cfg.heads = 1;
  cfg.mlp_ratio = 1;
  auto x = make_cross_interaction(ps, "x", 2, cfg, rng);
  // v = kv * Wv, attn out = v * Wo, then LN + MLP on the residual.
  auto set = [](Tensor t, std::vector<double> v) { std::copy(v.begin(), v.end(), t.mutable_data().begin()); };
  set(x.attn.v_proj.weight, {1, 0, 0, 2});
  set(x.attn.out_proj.weight, {0.5, 0, 0, 0.5});
  set(x.mlp.fc1.weight, {1, 0, 0, 1});
  set(x.mlp.fc2.weight, {1, 0, 0, 1});
  const Tensor xq = Tensor::from({1, 2, 1, 1}, {1.0, 3.0}), xkv = Tensor::from({1, 2, 1, 1}, {2.0, -1.0});
  const Tensor out = x(xq, xkv);
  // q' = (1 + 0.5*2, 3 + 0.5*(-2)) = (2, 2); LN of a constant row is 0; GELU(0) = 0.
  EXPECT_NEAR(out[0], 2.0, 1e-12);
  EXPECT_NEAR(out[1], 2.0, 1e-12);

  set(x.attn.out_proj.weight, {1, 0, 0, 0});
  const Tensor out2 = x(xq, xkv);
  // q' = (3, 3)
  EXPECT_NEAR(out2[0], 3.0, 1e-12);
  const Tensor out3 = x(Tensor::from({1, 2, 1, 1}, {0.0, 0.0}), xkv);
  // q' = (2, 0); LN -> (1, -1) up to eps; MLP -> (GELU(1), GELU(-1)).
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  auto gelu = [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };
  EXPECT_NEAR(out3[0], 2.0 + gelu(s), 1e-9);
  EXPECT_NEAR(out3[1], 0.0 + gelu(-s), 1e-9);
}

TEST(Gfi, IdentityAtInitThroughFullForward) {
  GeoMamba net(small_config(64, 64), 12);
  Rng rng = make_stream(12, 9);
  const Tensor o = Tensor::randn({2, 3, 64, 64}, rng), s = Tensor::randn({2, 3, 64, 64}, rng);
  const Tensor p = Tensor::randn({2, 2, 64, 64}, rng);
  for (auto pairing : {GfiPairing::kCross, GfiPairing::kSelf}) {
    ForwardOptions on{false, true, false, pairing}, off{false, false, false, pairing};
    const auto a = net.forward({&o, &s, &p}, on), b = net.forward({&o, &s, &p}, off);
    for (std::size_t i = 0; i < 4; ++i) {
      expect_bit_equal(a.optical->stages[i], b.optical->stages[i]);
      expect_bit_equal(a.sar->stages[i], b.sar->stages[i]);
    }
    expect_bit_equal(a.optical->embedding, b.optical->embedding);
  }
}

TEST(Gfi, OffMeansSarCannotReachOptical) {
  GeoMamba net(small_config(64, 64), 13);
  Rng rng = make_stream(13, 9);
  const Tensor o = Tensor::randn({2, 3, 64, 64}, rng), s = Tensor::randn({2, 3, 64, 64}, rng);
  const Tensor s2 = Tensor::randn({2, 3, 64, 64}, rng), p = Tensor::randn({2, 2, 64, 64}, rng);
  ForwardOptions off{false, false, true, GfiPairing::kCross};
  const auto a = net.forward({&o, &s, &p}, off), b = net.forward({&o, &s2, &p}, off);
  expect_bit_equal(a.optical->embedding, b.optical->embedding);
  expect_bit_equal(a.optical->mask_deep, b.optical->mask_deep);
}

TEST(DsHead, ZeroWeightsGiveHalfProbability) {
  GeoMamba net(small_config(), 14);
  auto& h = net.ds_head(Modality::kSar, false);
  for (auto& v : h.weight.mutable_data()) v = 0.0;
  Rng rng = make_stream(14, 9);
  const Tensor m = sigmoid(net.ds_project(Tensor::randn({2, 16, 16, 16}, rng), Modality::kSar, 0));
  EXPECT_EQ(m.shape(), (Shape{2, 1, 16, 16}));
  for (double v : m.data()) EXPECT_EQ(v, 0.5);
}

TEST(DsHead, UnitVectorPicksChannel) {
  GeoMamba net(small_config(), 15);
  auto& h = net.ds_head(Modality::kOptical, true);
  for (auto& v : h.weight.mutable_data()) v = 0.0;
  h.weight.mutable_data()[5] = 1.0;
  h.bias.mutable_data()[0] = 0.25;
  Rng rng = make_stream(15, 9);
  const Tensor f = Tensor::randn({1, 128, 2, 2}, rng);
  const Tensor m = net.ds_project(f, Modality::kOptical, 3);
  for (std::size_t p = 0; p < 4; ++p) EXPECT_DOUBLE_EQ(m[p], f[5 * 4 + p] + 0.25);
  EXPECT_THROW(net.ds_project(f, Modality::kOptical, 1), std::invalid_argument);
}

TEST(DsHead, GradcheckThroughFocalLoss) {
  GeoMamba net(small_config(), 16);
  Rng rng = make_stream(16, 9);
  const std::vector<double> targets = {1, 0, 0, 1, 0, 1, 1, 0};
  const auto r = gradcheck(
      [&](const Tensor& f) { return losses::focal_loss(net.ds_project(f, Modality::kSar, 3), targets, 0.25, 2.0); },
      Tensor::randn({2, 128, 2, 2}, rng));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Embedding, ConstantMapPoolsToConstant) {
  const Tensor pooled = global_avg_pool(Tensor::full({2, 4, 3, 3}, 1.5));
  EXPECT_EQ(pooled.shape(), (Shape{2, 4}));
  for (double v : pooled.data()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(Embedding, DimensionAndDeterminism) {
  GeoMamba net(small_config(), 17);
  Rng rng = make_stream(17, 9);
  const Tensor one = Tensor::randn({1, 3, 64, 64}, rng);
  std::vector<double> twice(one.data().begin(), one.data().end());
  twice.insert(twice.end(), one.data().begin(), one.data().end());
  const Tensor x = Tensor::from({2, 3, 64, 64}, twice);
  const auto f = net.forward({&x, nullptr, nullptr}, ForwardOptions{false, false, false, GfiPairing::kSelf}).optical;
  EXPECT_EQ(f->embedding.shape(), (Shape{2, 1024}));
  for (std::size_t k = 0; k < 1024; ++k) EXPECT_EQ(f->embedding[k], f->embedding[1024 + k]);
  GeoMamba again(small_config(), 17);
  const auto g = again.forward({&x, nullptr, nullptr}, ForwardOptions{false, false, false, GfiPairing::kSelf}).optical;
  expect_bit_equal(f->embedding, g->embedding);
}
