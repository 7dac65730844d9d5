#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace geomamba::imgproc {

/// Single-channel image with 8-bit semantics stored as reals.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }

  /// Replicate-border access.
  double clamped(std::ptrdiff_t y, std::ptrdiff_t x) const {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(height) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(width) - 1);
    return pixels[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)];
  }

  bool operator==(const GrayImage&) const = default;
};

/// Interleaved RGB image.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // (y * width + x) * 3 + channel

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  bool operator==(const RgbImage&) const = default;
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  bool operator==(const BinaryMask&) const = default;
};

inline double clamp_u8(double v) { return std::clamp(v, 0.0, 255.0); }

inline GrayImage luma(const RgbImage& img) {
  GrayImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.height * img.width; ++i)
    out.pixels[i] = 0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] + 0.114 * img.pixels[i * 3 + 2];
  return out;
}

inline GrayImage channel(const RgbImage& img, std::size_t c) {
  GrayImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.height * img.width; ++i) out.pixels[i] = img.pixels[i * 3 + c];
  return out;
}

inline void set_channel(RgbImage& img, std::size_t c, const GrayImage& g) {
  for (std::size_t i = 0; i < img.height * img.width; ++i) img.pixels[i * 3 + c] = g.pixels[i];
}

namespace detail {

inline void require_min_size(const char* op, const GrayImage& img, std::size_t min_side) {
  if (img.height < min_side || img.width < min_side)
    throw std::invalid_argument(std::string(op) + ": image " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " smaller than " + std::to_string(min_side) + "x" +
                                std::to_string(min_side));
}

/// Value at quantile q of `values` (order statistic at floor(q * (n - 1))).
inline double quantile(std::vector<double> values, double q) {
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

inline void check_quantile(const char* op, double q) {
  if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument(std::string(op) + ": quantile must lie in (0,1)");
}

}  // namespace detail

struct Gradients {
  std::vector<double> gx, gy;
};

/// 3x3 Sobel derivatives with replicate padding. gx responds to intensity
/// increasing to the right, gy to intensity increasing downwards.
inline Gradients sobel_gradients(const GrayImage& img) {
  Gradients g{std::vector<double>(img.pixels.size()), std::vector<double>(img.pixels.size())};
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
      auto p = [&](std::ptrdiff_t dy, std::ptrdiff_t dx) { return img.clamped(yy + dy, xx + dx); };
      g.gx[y * img.width + x] =
          (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
      g.gy[y * img.width + x] =
          (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
    }
  return g;
}

inline std::vector<double> sobel_magnitude(const GrayImage& img) {
  const auto g = sobel_gradients(img);
  std::vector<double> mag(g.gx.size());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::sqrt(g.gx[i] * g.gx[i] + g.gy[i] * g.gy[i]);
  return mag;
}

/// Contour pseudo-label: 1 where the Sobel magnitude exceeds its `quantile`.
inline BinaryMask sobel_mask(const GrayImage& img, double quantile = 0.85) {
  detail::require_min_size("sobel_mask", img, 3);
  detail::check_quantile("sobel_mask", quantile);
  const auto mag = sobel_magnitude(img);
  const double thr = detail::quantile(mag, quantile);
  BinaryMask m(img.height, img.width);
  for (std::size_t i = 0; i < mag.size(); ++i) m.bits[i] = mag[i] > thr ? 1 : 0;
  return m;
}

struct HarrisParams {
  double k = 0.04;
  std::size_t window = 5;
  double sigma = 1.0;
  double quantile = 0.99;
};

/// Corner response det(M) - k tr(M)^2 of the Gaussian-weighted structure tensor.
inline std::vector<double> harris_response(const GrayImage& img, double k, std::size_t window, double sigma) {
  detail::require_min_size("harris_response", img, 3);
  if (window < 3 || window % 2 == 0) throw std::invalid_argument("harris: window must be odd and >= 3");
  if (k < 0.02 || k > 0.1) throw std::invalid_argument("harris: k must lie in [0.02, 0.1]");
  if (!(sigma > 0.0)) throw std::invalid_argument("harris: sigma must be positive");
  const auto g = sobel_gradients(img);
  const std::size_t h = img.height, w = img.width, n = h * w;
  std::vector<double> ixx(n), iyy(n), ixy(n);
  for (std::size_t i = 0; i < n; ++i) {
    ixx[i] = g.gx[i] * g.gx[i];
    iyy[i] = g.gy[i] * g.gy[i];
    ixy[i] = g.gx[i] * g.gy[i];
  }
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  std::vector<double> kernel(window * window);
  double ksum = 0.0;
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const double v = std::exp(-static_cast<double>(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      kernel[static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(window) + dx + r)] = v;
      ksum += v;
    }
  for (auto& v : kernel) v /= ksum;
  std::vector<double> resp(n);
  auto at = [&](const std::vector<double>& m, std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return m[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double sxx = 0.0, syy = 0.0, sxy = 0.0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const double kv = kernel[static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(window) + dx + r)];
          const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
          sxx += kv * at(ixx, yy, xx);
          syy += kv * at(iyy, yy, xx);
          sxy += kv * at(ixy, yy, xx);
        }
      const double tr = sxx + syy;
      resp[y * w + x] = sxx * syy - sxy * sxy - k * tr * tr;
    }
  return resp;
}

/// Keypoint pseudo-label: 1 where the Harris response exceeds its quantile,
/// is positive, and is a 3x3 local maximum away from the 1-pixel border.
inline BinaryMask harris_mask(const GrayImage& img, const HarrisParams& p = {}) {
  detail::check_quantile("harris_mask", p.quantile);
  const auto resp = harris_response(img, p.k, p.window, p.sigma);
  const double thr = detail::quantile(resp, p.quantile);
  BinaryMask m(img.height, img.width);
  const std::size_t w = img.width;
  for (std::size_t y = 1; y + 1 < img.height; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      const double v = resp[y * w + x];
      if (!(v > thr && v > 0.0)) continue;
      bool is_max = true;
      for (std::size_t yy = y - 1; yy <= y + 1 && is_max; ++yy)
        for (std::size_t xx = x - 1; xx <= x + 1; ++xx)
          if (resp[yy * w + xx] > v) {
            is_max = false;
            break;
          }
      m.at(y, x) = is_max ? 1 : 0;
    }
  return m;
}

/// Max-pool over factor x factor blocks.
inline BinaryMask downsample_mask(const BinaryMask& mask, std::size_t factor) {
  if (factor == 0 || mask.height % factor != 0 || mask.width % factor != 0)
    throw std::invalid_argument("downsample_mask: " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                " not divisible by factor " + std::to_string(factor));
  BinaryMask out(mask.height / factor, mask.width / factor);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) out.at(y / factor, x / factor) = 1;
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing operators

inline GrayImage bilateral_filter(const GrayImage& img, double sigma_space = 3.0, double sigma_range = 25.0) {
  if (!(sigma_space > 0.0) || !(sigma_range > 0.0)) throw std::invalid_argument("bilateral_filter: sigmas must be positive");
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(2.0 * sigma_space));
  std::vector<double> spatial;
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
      spatial.push_back(std::exp(-static_cast<double>(dy * dy + dx * dx) / (2.0 * sigma_space * sigma_space)));
  const double inv_range = 1.0 / (2.0 * sigma_range * sigma_range);
  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double center = img.at(y, x);
      double num = 0.0, den = 0.0;
      std::size_t k = 0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx, ++k) {
          const double v = img.clamped(static_cast<std::ptrdiff_t>(y) + dy, static_cast<std::ptrdiff_t>(x) + dx);
          const double wgt = spatial[k] * std::exp(-(v - center) * (v - center) * inv_range);
          num += wgt * v;
          den += wgt;
        }
      out.at(y, x) = clamp_u8(num / den);
    }
  return out;
}

/// img - strength * (4-neighbour Laplacian).
inline GrayImage laplacian_sharpen(const GrayImage& img, double strength = 0.5) {
  if (strength < 0.0) throw std::invalid_argument("laplacian_sharpen: strength must be non-negative");
  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
      const double lap = img.clamped(yy - 1, xx) + img.clamped(yy + 1, xx) + img.clamped(yy, xx - 1) +
                         img.clamped(yy, xx + 1) - 4.0 * img.at(y, x);
      out.at(y, x) = clamp_u8(img.at(y, x) - strength * lap);
    }
  return out;
}

inline GrayImage median_filter(const GrayImage& img, std::size_t window = 3) {
  if (window == 0 || window % 2 == 0) throw std::invalid_argument("median_filter: window must be odd");
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  GrayImage out(img.height, img.width);
  std::vector<double> buf(window * window);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      std::size_t k = 0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
          buf[k++] = img.clamped(static_cast<std::ptrdiff_t>(y) + dy, static_cast<std::ptrdiff_t>(x) + dx);
      std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2), buf.end());
      out.at(y, x) = clamp_u8(buf[buf.size() / 2]);
    }
  return out;
}

struct ClaheParams {
  double clip_limit = 2.0;
  std::size_t tiles_y = 8;
  std::size_t tiles_x = 8;
};

/// Per-tile 256-entry lookup tables of contrast-limited equalisation.
inline std::vector<std::array<double, 256>> clahe_tile_mappings(const GrayImage& img, const ClaheParams& p) {
  if (!(p.clip_limit > 0.0)) throw std::invalid_argument("clahe: clip limit must be positive");
  if (p.tiles_x == 0 || p.tiles_y == 0 || p.tiles_x > img.width || p.tiles_y > img.height)
    throw std::invalid_argument("clahe: tile grid must fit inside the image");
  std::vector<std::array<double, 256>> maps(p.tiles_y * p.tiles_x);
  for (std::size_t ty = 0; ty < p.tiles_y; ++ty)
    for (std::size_t tx = 0; tx < p.tiles_x; ++tx) {
      const std::size_t y0 = ty * img.height / p.tiles_y, y1 = (ty + 1) * img.height / p.tiles_y;
      const std::size_t x0 = tx * img.width / p.tiles_x, x1 = (tx + 1) * img.width / p.tiles_x;
      std::array<double, 256> hist{};
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          hist[static_cast<std::size_t>(std::lround(clamp_u8(img.at(y, x))))] += 1.0;
      const double count = static_cast<double>((y1 - y0) * (x1 - x0));
      const double clip = std::max(1.0, p.clip_limit * count / 256.0);
      double excess = 0.0;
      for (auto& b : hist)
        if (b > clip) {
          excess += b - clip;
          b = clip;
        }
      const double spread = excess / 256.0;
      double cdf = 0.0;
      auto& map = maps[ty * p.tiles_x + tx];
      for (std::size_t v = 0; v < 256; ++v) {
        cdf += hist[v] + spread;
        map[v] = clamp_u8(255.0 * cdf / count);
      }
    }
  return maps;
}

/// Contrast-limited adaptive histogram equalisation with bilinear blending
/// between the four nearest tile mappings.
inline GrayImage clahe(const GrayImage& img, const ClaheParams& p = {}) {
  const auto maps = clahe_tile_mappings(img, p);
  GrayImage out(img.height, img.width);
  const double tile_h = static_cast<double>(img.height) / static_cast<double>(p.tiles_y);
  const double tile_w = static_cast<double>(img.width) / static_cast<double>(p.tiles_x);
  for (std::size_t y = 0; y < img.height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) / tile_h - 0.5, 0.0, static_cast<double>(p.tiles_y - 1));
    const auto ty0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t ty1 = std::min(ty0 + 1, p.tiles_y - 1);
    const double wy = fy - static_cast<double>(ty0);
    for (std::size_t x = 0; x < img.width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) / tile_w - 0.5, 0.0, static_cast<double>(p.tiles_x - 1));
      const auto tx0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t tx1 = std::min(tx0 + 1, p.tiles_x - 1);
      const double wx = fx - static_cast<double>(tx0);
      const auto v = static_cast<std::size_t>(std::lround(clamp_u8(img.at(y, x))));
      const double top = (1.0 - wx) * maps[ty0 * p.tiles_x + tx0][v] + wx * maps[ty0 * p.tiles_x + tx1][v];
      const double bottom = (1.0 - wx) * maps[ty1 * p.tiles_x + tx0][v] + wx * maps[ty1 * p.tiles_x + tx1][v];
      out.at(y, x) = clamp_u8((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

/// Zeroes intensities below `floor`.
inline GrayImage threshold_suppress(const GrayImage& img, double floor = 20.0) {
  if (floor < 0.0 || floor > 255.0) throw std::invalid_argument("threshold_suppress: floor must lie in [0,255]");
  GrayImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = img.pixels[i] < floor ? 0.0 : clamp_u8(img.pixels[i]);
  return out;
}

struct PreprocessParams {
  double bilateral_sigma_space = 3.0;
  double bilateral_sigma_range = 25.0;
  double sharpen_strength = 0.5;
  std::size_t median_window = 3;
  ClaheParams clahe{};
  double threshold_floor = 20.0;
};

/// Optical pipeline: bilateral filter, then Laplacian sharpening, per channel.
inline RgbImage preprocess_optical(const RgbImage& img, const PreprocessParams& p = {}) {
  RgbImage out(img.height, img.width);
  for (std::size_t c = 0; c < 3; ++c) {
    auto ch = bilateral_filter(channel(img, c), p.bilateral_sigma_space, p.bilateral_sigma_range);
    set_channel(out, c, laplacian_sharpen(ch, p.sharpen_strength));
  }
  return out;
}

/// SAR pipeline: median despeckling, CLAHE, then weak-response suppression.
inline GrayImage preprocess_sar(const GrayImage& img, const PreprocessParams& p = {}) {
  return threshold_suppress(clahe(median_filter(img, p.median_window), p.clahe), p.threshold_floor);
}

}  // namespace geomamba::imgproc
