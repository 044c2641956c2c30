#include "negsteer/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "negsteer/errors.hpp"

namespace negsteer {
namespace {

constexpr const char* kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
constexpr double kLeft = 64, kRight = 24, kTop = 40, kBottom = 56;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  double w, h;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (w - kLeft - kRight); }
  double py(double y) const { return h - kBottom - (y - y0) / (y1 - y0) * (h - kTop - kBottom); }
};

Frame make_frame(const PlotSpec& spec, const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw InputError("series " + s.label + " has mismatched x/y lengths");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) throw InputError("series " + s.label + " has non-finite values");
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  auto pad = [](double& lo, double& hi) {
    const double span = hi - lo;
    const double p = span > 0 ? 0.05 * span : std::max(0.5, std::abs(lo) * 0.05);
    lo -= p;
    hi += p;
  };
  pad(x0, x1);
  pad(y0, y1);
  return {x0, x1, y0, y1, static_cast<double>(spec.width), static_cast<double>(spec.height)};
}

std::string header(const PlotSpec& spec, const Frame& f) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(spec.width) + "\" height=\"" +
                  std::to_string(spec.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fmt(f.w / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(spec.title) + "</text>\n";
  const double bx = f.h - kBottom;
  s += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(bx) + "\" x2=\"" + fmt(f.w - kRight) + "\" y2=\"" + fmt(bx) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(kTop) + "\" x2=\"" + fmt(kLeft) + "\" y2=\"" + fmt(bx) +
       "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = f.x0 + (f.x1 - f.x0) * t / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * t / 4.0;
    s += "<text x=\"" + fmt(f.px(xv)) + "\" y=\"" + fmt(bx + 16) + "\" text-anchor=\"middle\">" + tick_label(xv) +
         "</text>\n";
    s += "<text x=\"" + fmt(kLeft - 6) + "\" y=\"" + fmt(f.py(yv) + 4) + "\" text-anchor=\"end\">" + tick_label(yv) +
         "</text>\n";
  }
  s += "<text x=\"" + fmt(f.w / 2) + "\" y=\"" + fmt(f.h - 12) + "\" text-anchor=\"middle\">" + escape(spec.x_label) +
       "</text>\n";
  s += "<text x=\"16\" y=\"" + fmt(f.h / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " + fmt(f.h / 2) +
       ")\">" + escape(spec.y_label) + "</text>\n";
  return s;
}

std::string marker(int shape, double x, double y, const char* colour) {
  const double r = 4;
  switch (shape % 3) {
    case 0:
      return "<circle cx=\"" + fmt(x) + "\" cy=\"" + fmt(y) + "\" r=\"" + fmt(r) + "\" fill=\"" + colour + "\"/>\n";
    case 1:
      return "<rect x=\"" + fmt(x - r) + "\" y=\"" + fmt(y - r) + "\" width=\"" + fmt(2 * r) + "\" height=\"" +
             fmt(2 * r) + "\" fill=\"" + colour + "\"/>\n";
    default:
      return "<polygon points=\"" + fmt(x) + "," + fmt(y - r - 1) + " " + fmt(x - r - 1) + "," + fmt(y + r) + " " +
             fmt(x + r + 1) + "," + fmt(y + r) + "\" fill=\"" + colour + "\"/>\n";
  }
}

std::string legend(const std::vector<Series>& series, const Frame& f, bool shapes) {
  std::string s;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 8 + 16.0 * static_cast<double>(i);
    const double x = f.w - kRight - 170;
    const char* colour = kColours[i % std::size(kColours)];
    s += marker(shapes ? static_cast<int>(i) : 0, x, y, colour);
    s += "<text x=\"" + fmt(x + 10) + "\" y=\"" + fmt(y + 4) + "\">" + escape(series[i].label) + "</text>\n";
  }
  return s;
}

}  // namespace

std::string svg_line_chart(const PlotSpec& spec, const std::vector<Series>& series) {
  const auto f = make_frame(spec, series);
  std::string s = header(spec, f);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* colour = kColours[i % std::size(kColours)];
    std::string pts;
    for (std::size_t j = 0; j < series[i].x.size(); ++j)
      pts += (j ? " " : "") + fmt(f.px(series[i].x[j])) + "," + fmt(f.py(series[i].y[j]));
    s += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t j = 0; j < series[i].x.size(); ++j)
      s += marker(0, f.px(series[i].x[j]), f.py(series[i].y[j]), colour);
  }
  s += legend(series, f, false);
  s += "</svg>\n";
  return s;
}

std::string svg_scatter(const PlotSpec& spec, const std::vector<Series>& groups) {
  const auto f = make_frame(spec, groups);
  std::string s = header(spec, f);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const char* colour = kColours[i % std::size(kColours)];
    for (std::size_t j = 0; j < groups[i].x.size(); ++j)
      s += marker(static_cast<int>(i), f.px(groups[i].x[j]), f.py(groups[i].y[j]), colour);
  }
  s += legend(groups, f, true);
  s += "</svg>\n";
  return s;
}

}  // namespace negsteer
