#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "geomamba/imgproc.hpp"
#include "geomamba/png_io.hpp"
#include "geomamba/rng.hpp"

namespace geomamba::synth {

using imgproc::GrayImage;
using imgproc::RgbImage;

struct Point {
  double u = 0.0, v = 0.0;
};

/// A simple polygon of the object silhouette with a brightness multiplier.
struct Part {
  std::vector<Point> vertices;
  double shade = 1.0;
};

struct ScatterCenter {
  Point at;
  double amplitude = 1.0;
};

/// Object geometry in its own frame: length axis u in [-1, 1], nose/bow at u = 1.
struct ObjectSpec {
  int category = 0;
  std::vector<Part> parts;
  std::vector<ScatterCenter> centers;
};

inline constexpr int kNumCategories = 8;

inline const std::array<const char*, kNumCategories>& category_names() {
  static const std::array<const char*, kNumCategories> names{"airliner",  "quadjet",   "delta_fighter", "straight_wing",
                                                             "carrier",   "destroyer", "cargo",         "tanker"};
  return names;
}

namespace detail {

/// Closes a contour given front to back along v >= 0 with its mirror image.
inline std::vector<Point> mirrored(std::initializer_list<Point> upper) {
  std::vector<Point> pts(upper);
  for (auto it = std::rbegin(upper); it != std::rend(upper); ++it)
    if (it->v != 0.0) pts.push_back({it->u, -it->v});
  return pts;
}

struct WingShape {
  double root = 0.0;   // leading-edge u at the root
  double chord = 0.0;  // root chord
  double sweep = 0.0;  // leading-edge setback at the tip
  double span = 0.0;   // half span
  double tip = 0.0;    // tip chord
};

inline Part wing(const WingShape& w, double shade) {
  return {{{w.root, 0.0},
           {w.root - w.sweep, w.span},
           {w.root - w.sweep - w.tip, w.span},
           {w.root - w.chord, 0.0},
           {w.root - w.sweep - w.tip, -w.span},
           {w.root - w.sweep, -w.span}},
          shade};
}

inline Part fuselage(double width) {
  return {mirrored({{1.0, 0.0}, {0.82, width}, {-0.85, width * 0.8}, {-1.0, 0.02}}), 1.0};
}

inline Part hull(double width, double bow) {
  return {mirrored({{1.0, 0.0}, {bow, width}, {-0.92, width}, {-1.0, width * 0.7}}), 1.0};
}

inline Part block(double u0, double u1, double v0, double v1, double shade) {
  return {{{u1, v0}, {u1, v1}, {u0, v1}, {u0, v0}}, shade};
}

inline ObjectSpec base_spec(int category) {
  ObjectSpec s;
  s.category = category;
  auto tips = [&](const WingShape& w, double amp) {
    const double u = w.root - w.sweep - 0.5 * w.tip;
    s.centers.push_back({{u, w.span}, amp});
    s.centers.push_back({{u, -w.span}, amp});
  };
  switch (category) {
    case 0: {  // twin-engine airliner
      const WingShape main{0.25, 0.42, 0.38, 0.85, 0.14}, tail{-0.68, 0.25, 0.18, 0.32, 0.1};
      s.parts = {fuselage(0.08), wing(main, 0.92), wing(tail, 0.92)};
      s.centers = {{{1.0, 0.0}, 1.0}, {{0.02, 0.34}, 0.9}, {{0.02, -0.34}, 0.9}, {{-1.0, 0.0}, 0.7}};
      tips(main, 0.6);
      break;
    }
    case 1: {  // four-engine, longer swept wing
      const WingShape main{0.28, 0.48, 0.5, 0.98, 0.12}, tail{-0.66, 0.26, 0.2, 0.34, 0.1};
      s.parts = {fuselage(0.085), wing(main, 0.92), wing(tail, 0.92)};
      s.centers = {{{1.0, 0.0}, 1.0},         {{0.0, 0.3}, 0.85},  {{0.0, -0.3}, 0.85},
                   {{-0.15, 0.6}, 0.85},      {{-0.15, -0.6}, 0.85}, {{-1.0, 0.0}, 0.7}};
      tips(main, 0.6);
      break;
    }
    case 2: {  // delta wing, no tailplane
      const WingShape main{0.45, 1.3, 1.15, 0.62, 0.08};
      s.parts = {fuselage(0.07), wing(main, 0.92)};
      s.centers = {{{1.0, 0.0}, 1.0}, {{-0.95, 0.0}, 1.0}, {{-0.2, 0.0}, 0.6}};
      tips(main, 0.8);
      break;
    }
    case 3: {  // straight wing, twin props
      const WingShape main{0.18, 0.3, 0.0, 1.0, 0.3}, tail{-0.72, 0.22, 0.0, 0.4, 0.22};
      s.parts = {fuselage(0.075), wing(main, 0.92), wing(tail, 0.92)};
      s.centers = {{{1.0, 0.0}, 1.0}, {{0.3, 0.38}, 0.9}, {{0.3, -0.38}, 0.9}, {{-0.83, 0.4}, 0.6}, {{-0.83, -0.4}, 0.6}};
      tips(main, 0.6);
      break;
    }
    case 4: {  // carrier: wide flat deck, island on one side
      s.parts = {hull(0.27, 0.78), block(-0.2, 0.1, -0.27, -0.17, 1.2), block(-0.9, 0.5, -0.02, 0.02, 1.12)};
      s.centers = {{{1.0, 0.0}, 0.9},  {{-1.0, 0.19}, 0.8}, {{-1.0, -0.19}, 0.8}, {{0.1, -0.22}, 1.0},
                   {{-0.2, -0.22}, 1.0}, {{0.6, 0.27}, 0.6}};
      break;
    }
    case 5: {  // destroyer: narrow hull, fore and aft superstructure
      s.parts = {hull(0.13, 0.55), block(0.15, 0.42, -0.07, 0.07, 1.25), block(-0.5, -0.2, -0.07, 0.07, 1.25)};
      s.centers = {{{1.0, 0.0}, 1.0}, {{0.42, 0.0}, 1.0}, {{0.15, 0.0}, 0.7}, {{-0.2, 0.0}, 0.7}, {{-0.5, 0.0}, 1.0},
                   {{-1.0, 0.0}, 0.6}};
      break;
    }
    case 6: {  // cargo: boxy hull, stern bridge, hatch rows
      s.parts = {hull(0.19, 0.82), block(-0.92, -0.68, -0.16, 0.16, 1.3)};
      for (double u : {0.55, 0.3, 0.05, -0.2, -0.45}) s.parts.push_back(block(u - 0.14, u + 0.06, -0.12, 0.12, 0.82));
      s.centers = {{{1.0, 0.0}, 0.9}, {{-0.68, 0.16}, 1.0}, {{-0.68, -0.16}, 1.0}, {{-0.92, 0.0}, 0.8}};
      break;
    }
    default: {  // tanker: stern bridge, long centre pipeline, bow mast
      s.parts = {hull(0.21, 0.75), block(-0.95, -0.72, -0.17, 0.17, 1.3), block(-0.65, 0.7, -0.025, 0.025, 1.25)};
      s.centers = {{{1.0, 0.0}, 0.9}, {{0.7, 0.0}, 1.0}, {{-0.72, 0.17}, 1.0}, {{-0.72, -0.17}, 1.0}, {{0.1, 0.0}, 0.7}};
      break;
    }
  }
  return s;
}

inline bool inside(const std::vector<Point>& poly, double u, double v) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.v > v) != (b.v > v) && u < (b.u - a.u) * (v - a.v) / (b.v - a.v) + a.u) in = !in;
  }
  return in;
}

}  // namespace detail

/// Category geometry with per-instance vertex jitter drawn from `instance_seed`.
inline ObjectSpec make_object_spec(int category, std::uint64_t instance_seed, double jitter = 0.02) {
  if (category < 0 || category >= kNumCategories) throw std::invalid_argument("make_object_spec: unknown category");
  ObjectSpec s = detail::base_spec(category);
  Rng rng = make_stream(instance_seed, StreamTag::kSynth);
  std::normal_distribution<double> n(0.0, jitter);
  std::uniform_real_distribution<double> aspect(0.92, 1.08);
  const double width_scale = aspect(rng);
  for (auto& p : s.parts)
    for (auto& q : p.vertices) {
      q.u += n(rng);
      q.v = q.v * width_scale + n(rng);
    }
  for (auto& c : s.centers) c.at.v *= width_scale;
  return s;
}

/// Similarity transform from object frame to pixel coordinates.
struct Pose {
  double angle = 0.0;       // radians
  double half_length = 0;   // pixels per object unit
  double cx = 0.0, cy = 0.0;

  std::pair<double, double> to_pixel(Point p) const {
    const double c = std::cos(angle), s = std::sin(angle);
    return {cx + half_length * (c * p.u - s * p.v), cy + half_length * (s * p.u + c * p.v)};
  }
  Point to_object(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = (x - cx) / half_length, dy = (y - cy) / half_length;
    return {c * dx + s * dy, -s * dx + c * dy};
  }
};

struct RenderParams {
  std::size_t image_size = 64;
  double rotation_range_deg = 180.0;  // pose angle drawn uniformly from +-range
  double min_scale = 0.36;            // half length as a fraction of the image side
  double max_scale = 0.44;
  double max_shift = 0.08;            // centre offset as a fraction of the side
  std::size_t clutter = 6;            // optical background shapes
  double optical_noise = 6.0;         // Gaussian noise stddev
  double speckle_looks = 4.0;         // gamma speckle shape; 0 disables speckle
  bool constant_background = false;   // fixed optical background colour
  std::size_t supersample = 4;
};

inline Pose draw_pose(const RenderParams& p, Rng& rng) {
  const double side = static_cast<double>(p.image_size);
  const double range = p.rotation_range_deg * std::numbers::pi / 180.0;
  std::uniform_real_distribution<double> ang(-range, range), sc(p.min_scale, p.max_scale), sh(-p.max_shift, p.max_shift);
  Pose pose;
  pose.angle = ang(rng);
  pose.half_length = sc(rng) * side;
  pose.cx = side / 2.0 + sh(rng) * side;
  pose.cy = side / 2.0 + sh(rng) * side;
  return pose;
}

/// Per-pixel silhouette coverage in [0,1] and the brightest part shade covering each pixel.
struct Coverage {
  GrayImage fraction;
  GrayImage shade;
};

inline Coverage rasterize(const ObjectSpec& spec, const Pose& pose, std::size_t size, std::size_t supersample) {
  Coverage cov{GrayImage(size, size), GrayImage(size, size, 1.0)};
  const double step = 1.0 / static_cast<double>(supersample);
  const double total = static_cast<double>(supersample * supersample);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t hits = 0;
      double shade_sum = 0.0;
      for (std::size_t sy = 0; sy < supersample; ++sy)
        for (std::size_t sx = 0; sx < supersample; ++sx) {
          const Point p = pose.to_object(static_cast<double>(x) + (static_cast<double>(sx) + 0.5) * step,
                                         static_cast<double>(y) + (static_cast<double>(sy) + 0.5) * step);
          double shade = -1.0;
          for (const auto& part : spec.parts)
            if (detail::inside(part.vertices, p.u, p.v)) shade = part.shade;  // later parts paint over earlier ones
          if (shade >= 0.0) {
            ++hits;
            shade_sum += shade;
          }
        }
      cov.fraction.at(y, x) = static_cast<double>(hits) / total;
      if (hits) cov.shade.at(y, x) = shade_sum / static_cast<double>(hits);
    }
  return cov;
}

struct OpticalRender {
  RgbImage image;
  Pose pose;
  Coverage coverage;
};

/// Textured anti-aliased silhouette over a cluttered background with Gaussian noise.
inline OpticalRender render_optical(const ObjectSpec& spec, Rng& rng, const RenderParams& p = {}) {
  const std::size_t n = p.image_size;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  OpticalRender r;
  r.pose = draw_pose(p, rng);
  r.coverage = rasterize(spec, r.pose, n, p.supersample);

  std::array<double, 3> bg{70.0, 80.0, 65.0};
  if (!p.constant_background)
    for (auto& c : bg) c = 40.0 + 70.0 * u01(rng);
  r.image = RgbImage(n, n);
  for (std::size_t i = 0; i < n * n; ++i)
    for (std::size_t c = 0; c < 3; ++c) r.image.pixels[i * 3 + c] = bg[c];

  for (std::size_t k = 0; k < p.clutter; ++k) {
    const double cx = u01(rng) * n, cy = u01(rng) * n;
    const double rx = 2.0 + u01(rng) * n * 0.12, ry = 2.0 + u01(rng) * n * 0.12;
    const double delta = -30.0 + 60.0 * u01(rng);
    const bool ellipse = u01(rng) < 0.5;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = (static_cast<double>(x) - cx) / rx, dy = (static_cast<double>(y) - cy) / ry;
        const bool hit = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (hit)
          for (std::size_t c = 0; c < 3; ++c) r.image.at(y, x, c) = imgproc::clamp_u8(r.image.at(y, x, c) + delta);
      }
  }

  const double base = 165.0 + 45.0 * u01(rng);
  const std::array<double, 3> tint{1.0, 0.97 + 0.06 * u01(rng), 0.94 + 0.06 * u01(rng)};
  const double freq = 0.6 + 0.6 * u01(rng), phase = 2.0 * std::numbers::pi * u01(rng);
  std::normal_distribution<double> noise(0.0, p.optical_noise);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double a = r.coverage.fraction.at(y, x);
      if (a > 0.0) {
        const Point q = r.pose.to_object(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        const double texture = 8.0 * std::sin(freq * r.pose.half_length * q.u + phase);
        for (std::size_t c = 0; c < 3; ++c) {
          const double obj = imgproc::clamp_u8(base * tint[c] * r.coverage.shade.at(y, x) + texture);
          r.image.at(y, x, c) = a * obj + (1.0 - a) * r.image.at(y, x, c);
        }
      }
      if (p.optical_noise > 0.0)
        for (std::size_t c = 0; c < 3; ++c) r.image.at(y, x, c) = imgproc::clamp_u8(r.image.at(y, x, c) + noise(rng));
    }
  return r;
}

struct SarRender {
  GrayImage image;
  Pose pose;
  std::vector<std::pair<double, double>> centers;  // pixel coordinates of the planted scatterers
};

/// Bright Gaussian blobs at the scattering centres over a dim silhouette, with
/// multiplicative gamma speckle. The pose is drawn independently of any optical render.
inline SarRender render_sar(const ObjectSpec& spec, Rng& rng, const RenderParams& p = {}) {
  const std::size_t n = p.image_size;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SarRender r;
  r.pose = draw_pose(p, rng);
  const Coverage cov = rasterize(spec, r.pose, n, 2);
  const double clutter_level = 18.0 + 14.0 * u01(rng);
  const double body_level = 38.0 + 20.0 * u01(rng);
  const double peak = 170.0 + 60.0 * u01(rng);
  const double sigma = 0.9 + 0.03 * static_cast<double>(n) / 16.0;
  r.image = GrayImage(n, n, clutter_level);
  for (std::size_t i = 0; i < n * n; ++i) r.image.pixels[i] += body_level * cov.fraction.pixels[i];
  for (const auto& c : spec.centers) {
    const auto [px, py] = r.pose.to_pixel(c.at);
    r.centers.emplace_back(px, py);
    const double amp = peak * c.amplitude;
    const auto lo_y = static_cast<std::ptrdiff_t>(std::floor(py - 4 * sigma)), hi_y = static_cast<std::ptrdiff_t>(std::ceil(py + 4 * sigma));
    const auto lo_x = static_cast<std::ptrdiff_t>(std::floor(px - 4 * sigma)), hi_x = static_cast<std::ptrdiff_t>(std::ceil(px + 4 * sigma));
    for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, lo_y); y <= std::min<std::ptrdiff_t>(n - 1, hi_y); ++y)
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, lo_x); x <= std::min<std::ptrdiff_t>(n - 1, hi_x); ++x) {
        const double dx = static_cast<double>(x) + 0.5 - px, dy = static_cast<double>(y) + 0.5 - py;
        r.image.at(y, x) += amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
  }
  if (p.speckle_looks > 0.0) {
    std::gamma_distribution<double> speckle(p.speckle_looks, 1.0 / p.speckle_looks);
    for (auto& v : r.image.pixels) v *= speckle(rng);
  }
  for (auto& v : r.image.pixels) v = imgproc::clamp_u8(v);
  return r;
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kTrain, kQuery, kGallery };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kQuery: return "query";
    default: return "gallery";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "query") return Split::kQuery;
  if (s == "gallery") return Split::kGallery;
  throw std::invalid_argument("unknown split '" + s + "'");
}

struct ManifestRecord {
  std::string id;
  std::string path;      // relative to the dataset root
  std::string modality;  // "optical" or "sar"
  int label = 0;
  Split split = Split::kTrain;
  std::size_t width = 0;
  std::size_t height = 0;
};

inline nlohmann::json to_json(const ManifestRecord& r) {
  return {{"id", r.id},       {"path", r.path},        {"modality", r.modality}, {"label", r.label},
          {"split", split_name(r.split)}, {"width", r.width}, {"height", r.height}};
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.path = j.at("path").get<std::string>();
  r.id = j.contains("id") ? j.at("id").get<std::string>() : std::filesystem::path(r.path).stem().string();
  r.modality = j.at("modality").get<std::string>();
  if (r.modality != "optical" && r.modality != "sar") throw std::invalid_argument("manifest: bad modality '" + r.modality + "'");
  r.label = j.at("label").get<int>();
  r.split = parse_split(j.at("split").get<std::string>());
  r.width = j.at("width").get<std::size_t>();
  r.height = j.at("height").get<std::size_t>();
  return r;
}

struct SplitCounts {
  std::size_t train = 384;
  std::size_t query = 128;
  std::size_t gallery = 384;
};

/// Number of samples for each (category, modality) cell of one split: an even
/// share, with the remainder handed out first to the optical cell of each
/// category and then to the SAR cells, so category totals differ by at most one.
inline std::vector<std::size_t> stratify(std::size_t total, std::size_t categories) {
  const std::size_t cells = categories * 2;
  std::vector<std::size_t> out(cells, total / cells);
  for (std::size_t i = 0; i < total % cells; ++i) ++out[i < categories ? 2 * i : 2 * (i - categories) + 1];
  return out;
}

/// Planned records (no rendering). Ids encode split, modality, label and index.
inline std::vector<ManifestRecord> plan_manifest(const SplitCounts& counts, std::size_t image_size,
                                                 int categories = kNumCategories) {
  std::vector<ManifestRecord> out;
  for (Split split : {Split::kTrain, Split::kQuery, Split::kGallery}) {
    const std::size_t total = split == Split::kTrain ? counts.train : split == Split::kQuery ? counts.query : counts.gallery;
    const auto per_cell = stratify(total, static_cast<std::size_t>(categories));
    for (int c = 0; c < categories; ++c)
      for (int m = 0; m < 2; ++m) {
        const std::string mod = m == 0 ? "optical" : "sar";
        for (std::size_t i = 0; i < per_cell[static_cast<std::size_t>(c) * 2 + static_cast<std::size_t>(m)]; ++i) {
          ManifestRecord r;
          char buf[64];
          std::snprintf(buf, sizeof buf, "%s_%s_%d_%04zu", split_name(split), m == 0 ? "opt" : "sar", c, i);
          r.id = buf;
          r.modality = mod;
          r.label = c;
          r.split = split;
          r.width = r.height = image_size;
          r.path = std::string(split_name(split)) + "/" + mod + "/" + std::to_string(c) + "/" + r.id + ".png";
          out.push_back(std::move(r));
        }
      }
  }
  return out;
}

inline std::uint64_t sample_seed(std::uint64_t seed, const std::string& id) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : id) h = (h ^ ch) * 1099511628211ull;
  return mix64(seed ^ h);
}

/// Renders one planned record; the image depends only on (seed, record id).
struct RenderedSample {
  RgbImage optical;  // set for optical records
  GrayImage sar;     // set for SAR records
};

inline RenderedSample render_record(const ManifestRecord& r, std::uint64_t seed, const RenderParams& params) {
  const std::uint64_t s = sample_seed(seed, r.id);
  const ObjectSpec spec = make_object_spec(r.label, s);
  Rng rng = make_stream(s, 0x5e);
  RenderParams p = params;
  p.image_size = r.width;
  RenderedSample out;
  if (r.modality == "optical") out.optical = render_optical(spec, rng, p).image;
  else out.sar = render_sar(spec, rng, p).image;
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest '" + path + "'");
  for (const auto& r : records) f << to_json(r).dump() << '\n';
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read manifest '" + path + "'");
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw IoError("manifest '" + path + "' line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Renders the whole dataset under `root` and writes `root/manifest.jsonl`.
inline std::vector<ManifestRecord> build_manifest(const std::string& root, const SplitCounts& counts, std::uint64_t seed,
                                                  const RenderParams& params = {}) {
  namespace fs = std::filesystem;
  auto records = plan_manifest(counts, params.image_size);
  for (const auto& r : records) {
    const fs::path file = fs::path(root) / r.path;
    std::error_code ec;
    fs::create_directories(file.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + file.parent_path().string() + "': " + ec.message());
    const auto img = render_record(r, seed, params);
    if (r.modality == "optical") imgproc::write_png(file.string(), img.optical);
    else imgproc::write_png(file.string(), img.sar);
  }
  write_manifest((fs::path(root) / "manifest.jsonl").string(), records);
  return records;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  std::size_t pad = 10;
  double erase_prob = 0.5;
  double erase_min_area = 0.02;
  double erase_max_area = 0.2;
  double erase_min_aspect = 0.3;
};

/// One concrete draw, so the same geometric change can be applied to several images.
struct AugmentDraw {
  bool flip = false;
  std::size_t crop_y = 0, crop_x = 0;  // offsets into the padded image
  std::size_t pad = 0;
  bool erase = false;
  std::size_t erase_y = 0, erase_x = 0, erase_h = 0, erase_w = 0;

  static AugmentDraw identity(std::size_t pad) {
    AugmentDraw d;
    d.pad = pad;
    d.crop_y = d.crop_x = pad;
    return d;
  }
};

inline AugmentDraw draw_augment(std::size_t height, std::size_t width, Rng& rng, const AugmentConfig& cfg = {}) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> off(0, 2 * cfg.pad);
  AugmentDraw d;
  d.pad = cfg.pad;
  d.flip = u01(rng) < cfg.flip_prob;
  d.crop_y = off(rng);
  d.crop_x = off(rng);
  if (u01(rng) < cfg.erase_prob) {
    const double area = static_cast<double>(height * width);
    const double log_lo = std::log(cfg.erase_min_aspect), log_hi = -std::log(cfg.erase_min_aspect);
    for (int attempt = 0; attempt < 100 && !d.erase; ++attempt) {
      const double target = area * (cfg.erase_min_area + (cfg.erase_max_area - cfg.erase_min_area) * u01(rng));
      const double aspect = std::exp(log_lo + (log_hi - log_lo) * u01(rng));
      const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      const double frac = static_cast<double>(h * w) / area;
      if (h == 0 || w == 0 || h > height || w > width || frac < cfg.erase_min_area || frac > cfg.erase_max_area) continue;
      d.erase = true;
      d.erase_h = h;
      d.erase_w = w;
      d.erase_y = std::uniform_int_distribution<std::size_t>(0, height - h)(rng);
      d.erase_x = std::uniform_int_distribution<std::size_t>(0, width - w)(rng);
    }
  }
  return d;
}

/// Zero-pad, crop back to size, flip horizontally, then erase one rectangle
/// with the per-channel image mean. Works for GrayImage and RgbImage.
template <class Image>
Image apply_augment(const Image& img, const AugmentDraw& d) {
  const std::size_t h = img.height, w = img.width;
  const std::size_t ch = img.pixels.size() / (h * w);
  Image out = img;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t xs = d.flip ? w - 1 - x : x;
      const auto sy = static_cast<std::ptrdiff_t>(y + d.crop_y) - static_cast<std::ptrdiff_t>(d.pad);
      const auto sx = static_cast<std::ptrdiff_t>(xs + d.crop_x) - static_cast<std::ptrdiff_t>(d.pad);
      const bool valid = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx < static_cast<std::ptrdiff_t>(w);
      for (std::size_t c = 0; c < ch; ++c)
        out.pixels[(y * w + x) * ch + c] =
            valid ? img.pixels[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * ch + c] : 0.0;
    }
  if (d.erase) {
    std::vector<double> mean(ch, 0.0);
    for (std::size_t i = 0; i < h * w; ++i)
      for (std::size_t c = 0; c < ch; ++c) mean[c] += out.pixels[i * ch + c];
    for (auto& m : mean) m /= static_cast<double>(h * w);
    for (std::size_t y = d.erase_y; y < d.erase_y + d.erase_h; ++y)
      for (std::size_t x = d.erase_x; x < d.erase_x + d.erase_w; ++x)
        for (std::size_t c = 0; c < ch; ++c) out.pixels[(y * w + x) * ch + c] = mean[c];
  }
  return out;
}

template <class Image>
Image augment(const Image& img, Rng& rng, const AugmentConfig& cfg = {}) {
  return apply_augment(img, draw_augment(img.height, img.width, rng, cfg));
}

}  // namespace geomamba::synth
