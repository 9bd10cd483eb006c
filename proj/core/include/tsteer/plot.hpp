#pragma once

#include <string>
#include <vector>

#include "tsteer/geometry.hpp"

namespace tsteer {

/// Affine map from data coordinates onto a pixel rectangle; y grows downward.
struct Viewport {
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    double left = 0, top = 0, width = 1, height = 1;

    double px(double x) const { return left + (x - x_min) / (x_max - x_min) * width; }
    double py(double y) const { return top + (y_max - y) / (y_max - y_min) * height; }
};

/// "M x,y L x,y ..." with two decimals.
std::string svg_path(const std::vector<double>& xs, const std::vector<double>& ys, const Viewport& vp);

/// Closed polygon: lower edge left to right, upper edge back.
std::string svg_band_path(const std::vector<double>& xs, const std::vector<double>& lo, const std::vector<double>& hi,
                          const Viewport& vp);

struct Bands {
    std::vector<double> median, q5, q25, q75, q95;
};

struct ForecastChart {
    std::string title;
    std::vector<double> context;  // drawn at x = -(n-1) .. 0
    Bands baseline;
    Bands intervened;  // may be empty
};

std::string forecast_chart_svg(const ForecastChart& chart);

/// Fill for value v on a white-to-navy scale over [lo, hi], clamped.
std::string heat_color(double v, double lo, double hi);

std::string heatmap_svg(const SimilarityMatrix& m, const std::string& title, double lo = -1.0, double hi = 1.0);

}  // namespace tsteer
