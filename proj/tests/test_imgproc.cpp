#include <gtest/gtest.h>

#include <filesystem>

#include "geomamba/imgproc.hpp"
#include "geomamba/png_io.hpp"
#include "geomamba/rng.hpp"

using namespace geomamba;
using namespace geomamba::imgproc;

namespace {

GrayImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng = make_stream(seed, 0x1);
  std::uniform_int_distribution<int> px(0, 255);
  GrayImage img(h, w);
  for (auto& v : img.pixels) v = px(rng);
  return img;
}

GrayImage vertical_step(std::size_t h, std::size_t w, std::size_t col) {
  GrayImage img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = col; x < w; ++x) img.at(y, x) = 200.0;
  return img;
}

GrayImage checkerboard(std::size_t blocks, std::size_t block) {
  GrayImage img(blocks * block, blocks * block);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) img.at(y, x) = ((y / block + x / block) % 2) ? 255.0 : 0.0;
  return img;
}

}  // namespace

TEST(Sobel, ConstantImageGivesEmptyMask) {
  EXPECT_EQ(sobel_mask(GrayImage(16, 16, 77.0)).count(), 0u);
}

TEST(Sobel, CenterResponseOfThreeByThreeStep) {
  GrayImage img(3, 3);
  for (std::size_t y = 0; y < 3; ++y) img.at(y, 2) = 255.0;
  const auto g = sobel_gradients(img);
  EXPECT_EQ(g.gx[4], 1020.0);
  EXPECT_EQ(g.gy[4], 0.0);
}

TEST(Sobel, StepEdgeMaskMatchesDirectLoopAndHugsTheStep) {
  const std::size_t h = 20, w = 24, col = 11;
  const GrayImage img = vertical_step(h, w, col);
  const auto mask = sobel_mask(img, 0.9);

  // Independent direct-loop magnitude with replicate borders.
  auto px = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  std::vector<double> mag;
  for (long y = 0; y < static_cast<long>(h); ++y)
    for (long x = 0; x < static_cast<long>(w); ++x) {
      double gx = 0, gy = 0;
      const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          gx += kx[dy + 1][dx + 1] * px(y + dy, x + dx);
          gy += kx[dx + 1][dy + 1] * px(y + dy, x + dx);
        }
      mag.push_back(std::hypot(gx, gy));
    }
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  const double thr = sorted[static_cast<std::size_t>(std::floor(0.9 * static_cast<double>(sorted.size() - 1)))];
  for (std::size_t i = 0; i < mag.size(); ++i) EXPECT_EQ(mask.bits[i], mag[i] > thr ? 1 : 0) << i;

  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask.at(y, x)) {
        EXPECT_TRUE(x == col - 1 || x == col) << "x=" << x;
      }
  EXPECT_GT(mask.count(), 0u);
}

TEST(Harris, ConstantImageGivesEmptyMask) {
  EXPECT_EQ(harris_mask(GrayImage(32, 32, 120.0)).count(), 0u);
}

TEST(Harris, PureEdgeGivesEmptyMaskAndNonPositiveResponse) {
  const GrayImage img = vertical_step(32, 32, 16);
  const auto resp = harris_response(img, 0.04, 5, 1.0);
  for (double r : resp) EXPECT_LE(r, 1e-9);
  EXPECT_EQ(harris_mask(img).count(), 0u);
}

TEST(Harris, CheckerboardInteriorCornerFlagged) {
  const GrayImage img = checkerboard(2, 16);
  const auto m = harris_mask(img);
  ASSERT_GT(m.count(), 0u);
  bool near_corner = false;
  for (std::size_t y = 14; y <= 17; ++y)
    for (std::size_t x = 14; x <= 17; ++x) near_corner = near_corner || m.at(y, x);
  EXPECT_TRUE(near_corner);
  const auto resp = harris_response(img, 0.04, 5, 1.0);
  EXPECT_GT(resp[15 * 32 + 15], 0.0);
}

TEST(Harris, FourByFourCheckerboardFlagsAllInteriorCorners) {
  const GrayImage img = checkerboard(4, 16);
  HarrisParams p;
  p.quantile = 0.99;
  const auto m = harris_mask(img, p);
  for (std::size_t cy : {16u, 32u, 48u})
    for (std::size_t cx : {16u, 32u, 48u}) {
      bool hit = false;
      for (std::size_t y = cy - 2; y <= cy + 1; ++y)
        for (std::size_t x = cx - 2; x <= cx + 1; ++x) hit = hit || m.at(y, x);
      EXPECT_TRUE(hit) << "corner " << cy << "," << cx;
    }
}

TEST(Harris, RejectsOutOfRangeK) {
  EXPECT_THROW(harris_response(GrayImage(8, 8), 0.5, 5, 1.0), std::invalid_argument);
}

TEST(Downsample, ZeroMaskStaysZero) {
  EXPECT_EQ(downsample_mask(BinaryMask(16, 16), 4).count(), 0u);
}

TEST(Downsample, SingleBitLandsInItsBlock) {
  BinaryMask m(16, 16);
  m.at(5, 5) = 1;
  const auto d = downsample_mask(m, 4);
  EXPECT_EQ(d.count(), 1u);
  EXPECT_EQ(d.at(1, 1), 1);
}

TEST(Downsample, RandomMaskMatchesNestedLoopMaxPool) {
  Rng rng = make_stream(9, 2);
  std::bernoulli_distribution coin(0.1);
  for (int trial = 0; trial < 20; ++trial) {
    BinaryMask m(24, 16);
    for (auto& b : m.bits) b = coin(rng);
    const auto d = downsample_mask(m, 2);
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        std::uint8_t v = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) v = std::max(v, m.at(2 * y + dy, 2 * x + dx));
        EXPECT_EQ(d.at(y, x), v);
      }
  }
}

TEST(Downsample, IndivisibleSizeThrows) {
  EXPECT_THROW(downsample_mask(BinaryMask(10, 10), 4), std::invalid_argument);
}

TEST(Median, ConstantImageUnchanged) {
  const GrayImage img(9, 7, 42.0);
  EXPECT_EQ(median_filter(img), img);
}

TEST(Median, IsolatedSpikeRemoved) {
  GrayImage img(3, 3);
  img.at(1, 1) = 255.0;
  EXPECT_EQ(median_filter(img).at(1, 1), 0.0);
}

TEST(Clahe, OutputInRangeAndTileMapsMatchScalarReference) {
  const GrayImage img = random_image(32, 40, 3);
  ClaheParams p;
  p.clip_limit = 2.0;
  p.tiles_y = 4;
  p.tiles_x = 5;
  const auto out = clahe(img, p);
  for (double v : out.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 255.0);
  }
  const auto maps = clahe_tile_mappings(img, p);
  for (std::size_t t = 0; t < maps.size(); ++t) {
    // Reference: clipped histogram, uniform redistribution, scaled cdf.
    const std::size_t ty = t / p.tiles_x, tx = t % p.tiles_x;
    std::vector<double> hist(256, 0.0);
    std::size_t count = 0;
    for (std::size_t y = ty * 8; y < ty * 8 + 8; ++y)
      for (std::size_t x = tx * 8; x < tx * 8 + 8; ++x) {
        hist[static_cast<std::size_t>(img.at(y, x))] += 1;
        ++count;
      }
    const double clip = std::max(1.0, 2.0 * static_cast<double>(count) / 256.0);
    double excess = 0;
    for (auto& b : hist) {
      excess += std::max(0.0, b - clip);
      b = std::min(b, clip);
    }
    double cdf = 0;
    for (std::size_t v = 0; v < 256; ++v) {
      cdf += hist[v] + excess / 256.0;
      EXPECT_NEAR(maps[t][v], std::min(255.0, 255.0 * cdf / static_cast<double>(count)), 1e-9);
      if (v > 0) {
        EXPECT_GE(maps[t][v], maps[t][v - 1]);
      }
    }
  }
}

TEST(Preprocess, ConstantImagesStayConstant) {
  const auto sar = preprocess_sar(GrayImage(32, 32, 90.0));
  for (double v : sar.pixels) EXPECT_DOUBLE_EQ(v, sar.pixels[0]);
  const auto opt = preprocess_optical(RgbImage(16, 16, 130.0));
  for (std::size_t i = 0; i < opt.pixels.size(); ++i) EXPECT_DOUBLE_EQ(opt.pixels[i], 130.0);
  const auto bil = bilateral_filter(GrayImage(8, 8, 12.0));
  for (double v : bil.pixels) EXPECT_NEAR(v, 12.0, 1e-12);
}

TEST(Preprocess, ThresholdZeroesWeakResponses) {
  GrayImage img(1, 3);
  img.pixels = {5.0, 19.9, 20.0};
  EXPECT_EQ(threshold_suppress(img, 20.0).pixels, (std::vector<double>{0.0, 0.0, 20.0}));
}

TEST(Png, GrayRgbAndMaskRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "geomamba_png_test";
  std::filesystem::create_directories(dir);
  const GrayImage g = random_image(9, 13, 4);
  write_png((dir / "g.png").string(), g);
  EXPECT_EQ(read_gray_png((dir / "g.png").string()), g);

  RgbImage rgb(5, 6);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = static_cast<double>(i % 256);
  write_png((dir / "c.png").string(), rgb);
  EXPECT_EQ(read_rgb_png((dir / "c.png").string()), rgb);

  BinaryMask m(4, 4);
  m.at(1, 2) = 1;
  write_png((dir / "m.png").string(), m);
  EXPECT_EQ(read_mask_png((dir / "m.png").string()), m);
  EXPECT_THROW(read_gray_png((dir / "missing.png").string()), IoError);
  std::filesystem::remove_all(dir);
}
