#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "geomamba/png_io.hpp"

namespace geomamba::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

namespace detail {

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
inline constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 60;

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

inline std::string header(const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         "<text x=\"" + num(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) + "</text>\n";
}

inline std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel, bool x_ticks) {
  std::string s;
  const double bottom = kHeight - kBottom;
  s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(bottom) + "\" x2=\"" + num(kWidth - kRight) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 5.0, y = f.py(v);
    s += "<line x1=\"" + num(kLeft - 4) + "\" y1=\"" + num(y) + "\" x2=\"" + num(kWidth - kRight) + "\" y2=\"" + num(y) +
         "\" stroke=\"#ddd\"/>\n";
    s += "<text x=\"" + num(kLeft - 8) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
    if (x_ticks) {
      const double xv = f.x0 + (f.x1 - f.x0) * i / 5.0;
      s += "<text x=\"" + num(f.px(xv)) + "\" y=\"" + num(bottom + 18) + "\" text-anchor=\"middle\">" + num(xv) + "</text>\n";
    }
  }
  s += "<text x=\"" + num((kLeft + kWidth - kRight) / 2) + "\" y=\"" + num(kHeight - 15) + "\" text-anchor=\"middle\">" +
       escape(xlabel) + "</text>\n";
  s += "<text x=\"18\" y=\"" + num((kTop + bottom) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
       num((kTop + bottom) / 2) + ")\">" + escape(ylabel) + "</text>\n";
  return s;
}

/// Expands a degenerate [lo, hi] so the frame has positive extent.
inline void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

}  // namespace detail

/// Multi-series line chart with markers and a legend.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  detail::pad_range(x0, x1);
  detail::pad_range(y0, y1);
  const double margin = 0.05 * (y1 - y0);
  const detail::Frame f{x0, x1, y0 - margin, y1 + margin};

  std::string out = detail::header(title) + detail::axes(f, xlabel, ylabel, true);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const std::string color = detail::kPalette[k % std::size(detail::kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) pts += detail::num(f.px(s.x[i])) + "," + detail::num(f.py(s.y[i])) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    if (s.x.size() <= 50)
      for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i)
        if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
          out += "<circle cx=\"" + detail::num(f.px(s.x[i])) + "\" cy=\"" + detail::num(f.py(s.y[i])) + "\" r=\"3\" fill=\"" +
                 color + "\"/>\n";
    const double ly = detail::kTop + 14 + 16 * static_cast<double>(k);
    out += "<rect x=\"" + detail::num(detail::kWidth - detail::kRight - 150) + "\" y=\"" + detail::num(ly - 9) +
           "\" width=\"10\" height=\"10\" fill=\"" + color + "\"/>\n";
    out += "<text x=\"" + detail::num(detail::kWidth - detail::kRight - 135) + "\" y=\"" + detail::num(ly) + "\">" +
           detail::escape(s.label) + "</text>\n";
  }
  return out + "</svg>\n";
}

/// Bar chart; `errors` (optional, same length as values) draws +-1 error whiskers.
inline std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<std::string>& labels,
                             const std::vector<double>& values, const std::vector<double>& errors = {}) {
  double hi = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i)
    hi = std::max(hi, values[i] + (i < errors.size() ? errors[i] : 0.0));
  if (!(hi > 0)) hi = 1.0;
  const detail::Frame f{0, static_cast<double>(std::max<std::size_t>(values.size(), 1)), 0, hi * 1.1};
  std::string out = detail::header(title) + detail::axes(f, "", ylabel, false);
  const double slot = (detail::kWidth - detail::kLeft - detail::kRight) / f.x1;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = detail::kLeft + slot * (static_cast<double>(i) + 0.2), w = slot * 0.6;
    const double top = f.py(values[i]), bottom = f.py(0);
    out += "<rect x=\"" + detail::num(x) + "\" y=\"" + detail::num(top) + "\" width=\"" + detail::num(w) + "\" height=\"" +
           detail::num(bottom - top) + "\" fill=\"" + detail::kPalette[i % std::size(detail::kPalette)] + "\"/>\n";
    if (i < errors.size() && errors[i] > 0) {
      const double cx = x + w / 2, ya = f.py(values[i] - errors[i]), yb = f.py(values[i] + errors[i]);
      out += "<line x1=\"" + detail::num(cx) + "\" y1=\"" + detail::num(ya) + "\" x2=\"" + detail::num(cx) + "\" y2=\"" +
             detail::num(yb) + "\" stroke=\"black\"/>\n";
    }
    out += "<text x=\"" + detail::num(x + w / 2) + "\" y=\"" + detail::num(top - 6) + "\" text-anchor=\"middle\">" +
           detail::num(values[i]) + "</text>\n";
    out += "<text x=\"" + detail::num(x + w / 2) + "\" y=\"" + detail::num(bottom + 18) + "\" text-anchor=\"middle\">" +
           detail::escape(i < labels.size() ? labels[i] : "") + "</text>\n";
  }
  return out + "</svg>\n";
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << text;
}

}  // namespace geomamba::svg
