#pragma once

#include <string>
#include <vector>

namespace negsteer {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 640;
  int height = 420;
};

/// Static SVG line chart with circle markers at each point.
std::string svg_line_chart(const PlotSpec& spec, const std::vector<Series>& series);

/// Static SVG scatter; each series gets its own marker shape and colour.
std::string svg_scatter(const PlotSpec& spec, const std::vector<Series>& groups);

}  // namespace negsteer
