#pragma once

#include <png.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "geomamba/imgproc.hpp"

namespace geomamba {

/// Raised for unreadable or unwritable files; the CLI maps it to exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace geomamba

namespace geomamba::imgproc {

namespace detail {

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(clamp_u8(v))); }

inline std::vector<std::uint8_t> read_png_raw(const std::string& path, std::uint32_t format, std::size_t& h,
                                              std::size_t& w) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("cannot read PNG '" + path + "': " + image.message);
  image.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path + "': " + image.message);
  }
  h = image.height;
  w = image.width;
  return buf;
}

inline void write_png_raw(const std::string& path, std::uint32_t format, std::size_t h, std::size_t w,
                          const std::vector<std::uint8_t>& buf) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path + "': " + image.message);
}

}  // namespace detail

inline GrayImage read_gray_png(const std::string& path) {
  std::size_t h = 0, w = 0;
  const auto buf = detail::read_png_raw(path, PNG_FORMAT_GRAY, h, w);
  GrayImage img(h, w);
  for (std::size_t i = 0; i < h * w; ++i) img.pixels[i] = buf[i];
  return img;
}

inline RgbImage read_rgb_png(const std::string& path) {
  std::size_t h = 0, w = 0;
  const auto buf = detail::read_png_raw(path, PNG_FORMAT_RGB, h, w);
  RgbImage img(h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i];
  return img;
}

/// Pixel values are rounded and clamped to [0, 255].
inline void write_png(const std::string& path, const GrayImage& img) {
  std::vector<std::uint8_t> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = detail::to_byte(img.pixels[i]);
  detail::write_png_raw(path, PNG_FORMAT_GRAY, img.height, img.width, buf);
}

inline void write_png(const std::string& path, const RgbImage& img) {
  std::vector<std::uint8_t> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = detail::to_byte(img.pixels[i]);
  detail::write_png_raw(path, PNG_FORMAT_RGB, img.height, img.width, buf);
}

/// Masks are stored as 0/255 grayscale.
inline void write_png(const std::string& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> buf(mask.bits.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask.bits[i] ? 255 : 0;
  detail::write_png_raw(path, PNG_FORMAT_GRAY, mask.height, mask.width, buf);
}

inline BinaryMask read_mask_png(const std::string& path) {
  const GrayImage g = read_gray_png(path);
  BinaryMask m(g.height, g.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = g.pixels[i] >= 128.0 ? 1 : 0;
  return m;
}

}  // namespace geomamba::imgproc
