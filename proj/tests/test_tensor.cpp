#include <gtest/gtest.h>

#include <cmath>

#include "geomamba/gradcheck_suite.hpp"
#include "geomamba/ops.hpp"

using namespace geomamba;

namespace {

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 0.0) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(TensorOps, MatmulIdentityLeavesMatrixUnchanged) {
  Rng rng = make_stream(1, 1);
  const Tensor a = Tensor::randn({3, 3}, rng);
  const Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor out = matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(out[i], a[i]);
}

TEST(TensorOps, SoftmaxOfZerosIsUniform) {
  expect_values(softmax(Tensor::zeros({1, 3}), 1), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(TensorOps, L2DistanceMatrixHandValue) {
  expect_values(l2_distance_matrix(Tensor::from({2, 2}, {0, 0, 3, 4})), {0, 5, 5, 0}, 1e-12);
}

TEST(TensorOps, MatmulMatchesTripleLoop) {
  Rng rng = make_stream(2, 1);
  const Tensor a = Tensor::randn({2, 4, 5}, rng), b = Tensor::randn({2, 5, 3}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) s += a[(n * 4 + i) * 5 + k] * b[(n * 5 + k) * 3 + j];
        EXPECT_NEAR(c[(n * 4 + i) * 3 + j], s, 1e-12);
      }
}

TEST(TensorOps, Conv2dMatchesDirectLoop) {
  Rng rng = make_stream(3, 1);
  const std::size_t n = 2, ci = 3, co = 4, h = 7, w = 6, k = 3, stride = 2, pad = 1;
  const Tensor x = Tensor::randn({n, ci, h, w}, rng), wt = Tensor::randn({co, ci, k, k}, rng), b = Tensor::randn({co}, rng);
  const Tensor y = conv2d(x, wt, b, stride, pad);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  ASSERT_EQ(y.shape(), (Shape{n, co, oh, ow}));
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double s = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                s += x[((bi * ci + c) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] *
                     wt[((o * ci + c) * k + ky) * k + kx];
              }
          EXPECT_NEAR(y[((bi * co + o) * oh + oy) * ow + ox], s, 1e-12);
        }
}

TEST(TensorOps, MaxPoolMatchesNestedLoop) {
  Rng rng = make_stream(4, 1);
  const Tensor x = Tensor::randn({2, 3, 6, 6}, rng);
  const Tensor y = max_pool2d(x, 2, 2);
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double m = -INFINITY;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x[(p * 6 + oy * 2 + dy) * 6 + ox * 2 + dx]);
        EXPECT_EQ(y[(p * 3 + oy) * 3 + ox], m);
      }
}

TEST(TensorOps, LayerNormNormalizesLastAxis) {
  Rng rng = make_stream(5, 1);
  const Tensor y = layer_norm(Tensor::randn({4, 8}, rng, 3.0), 1, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 8; ++i) m += y[r * 8 + i] / 8;
    for (std::size_t i = 0; i < 8; ++i) v += (y[r * 8 + i] - m) * (y[r * 8 + i] - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(TensorOps, ShapeMismatchThrowsWithShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Autodiff, SumGradientIsOnes) {
  Tensor x = Tensor::from({4}, {1, -2, 3, 0.5}, true);
  backward(sum(x));
  expect_values(Tensor::from({4}, std::vector<double>(x.grad().begin(), x.grad().end())), {1, 1, 1, 1});
}

TEST(Autodiff, SquareGradientAtThreeIsSix) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Autodiff, NoGradGuardSkipsGraph) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard g;
  EXPECT_FALSE(mul(x, x).requires_grad());
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::from({1}, {2.0}, true);
  const Tensor y = mul(x, x);
  backward(sum(add(y, y)));  // d(2x^2)/dx = 4x
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Gradcheck, SquareSumErrorBelow1e6) {
  Rng rng = make_stream(6, 1);
  const auto r = gradcheck([](const Tensor& x) { return sum(mul(x, x)); }, Tensor::randn({5}, rng));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradcheck, LayerNormSumErrorBelow1e4) {
  Rng rng = make_stream(7, 1);
  const Tensor w = Tensor::randn({3, 5}, rng);
  const auto r = gradcheck([w](const Tensor& x) { return sum(mul(layer_norm(x, 1), w)); }, Tensor::randn({3, 5}, rng));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Gradcheck, ConstantFunctionHasZeroError) {
  Rng rng = make_stream(8, 1);
  const auto r = gradcheck([](const Tensor&) { return Tensor::scalar(2.5); }, Tensor::randn({3}, rng));
  EXPECT_EQ(r.max_rel_error, 0.0);
  EXPECT_EQ(r.analytic, 0.0);
  EXPECT_EQ(r.numeric, 0.0);
}

TEST(Gradcheck, EveryOpAndLossPasses) {
  for (const auto& c : gradcheck_suite::op_cases()) {
    const auto r = gradcheck_suite::run_case(c);
    EXPECT_TRUE(r.passed) << r.name << " max rel err " << r.max_rel_error;
    EXPECT_GT(r.coordinates, 0u) << r.name;
  }
}

TEST(Gradcheck, CorruptedBackwardIsFlagged) {
  const auto r = gradcheck_suite::run_case(gradcheck_suite::corrupted_case());
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(Gradcheck, EndToEndObjectiveBelow1e3) {
  const auto r = gradcheck_suite::end_to_end_case();
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}
