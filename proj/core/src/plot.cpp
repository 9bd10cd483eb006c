#include "tsteer/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace tsteer {

namespace {

std::string fixed2(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s(buf);
    return s == "-0.00" ? "0.00" : s;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string header(int w, int h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
           std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) + "\">\n" +
           "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
}

void extend(double& lo, double& hi, const std::vector<double>& v) {
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
}

void draw_bands(std::string& out, const std::vector<double>& xs, const Bands& b, const Viewport& vp,
                const std::string& color) {
    if (b.median.empty()) return;
    out += "<path d=\"" + svg_band_path(xs, b.q5, b.q95, vp) + "\" fill=\"" + color + "\" fill-opacity=\"0.15\"/>\n";
    out += "<path d=\"" + svg_band_path(xs, b.q25, b.q75, vp) + "\" fill=\"" + color + "\" fill-opacity=\"0.3\"/>\n";
    out += "<path d=\"" + svg_path(xs, b.median, vp) + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
}

}  // namespace

std::string svg_path(const std::vector<double>& xs, const std::vector<double>& ys, const Viewport& vp) {
    if (xs.size() != ys.size()) throw std::invalid_argument("svg_path: length mismatch");
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out += i == 0 ? "M " : " L ";
        out += fixed2(vp.px(xs[i])) + "," + fixed2(vp.py(ys[i]));
    }
    return out;
}

std::string svg_band_path(const std::vector<double>& xs, const std::vector<double>& lo, const std::vector<double>& hi,
                          const Viewport& vp) {
    if (lo.size() != xs.size() || hi.size() != xs.size()) throw std::invalid_argument("svg_band_path: length mismatch");
    std::vector<double> bx(xs), by(lo);
    for (std::size_t i = xs.size(); i-- > 0;) {
        bx.push_back(xs[i]);
        by.push_back(hi[i]);
    }
    return svg_path(bx, by, vp) + " Z";
}

std::string forecast_chart_svg(const ForecastChart& c) {
    constexpr int W = 720, H = 360;
    const std::size_t n = c.context.size(), h = c.baseline.median.size();
    std::vector<double> cx(n), fx(h);
    for (std::size_t i = 0; i < n; ++i) cx[i] = static_cast<double>(i) - static_cast<double>(n - 1);
    for (std::size_t j = 0; j < h; ++j) fx[j] = static_cast<double>(j + 1);

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    extend(lo, hi, c.context);
    for (const Bands* b : {&c.baseline, &c.intervened}) {
        extend(lo, hi, b->q5);
        extend(lo, hi, b->q95);
        extend(lo, hi, b->median);
    }
    if (!(hi > lo)) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    Viewport vp{n > 0 ? cx.front() : 0.0, static_cast<double>(std::max<std::size_t>(h, 1)), lo - pad, hi + pad,
                60, 30, W - 80, H - 70};
    if (vp.x_max == vp.x_min) vp.x_max = vp.x_min + 1;

    std::string out = header(W, H);
    out += "<text x=\"" + std::to_string(W / 2) + "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"13\">" + escape(c.title) + "</text>\n";
    out += "<rect x=\"60\" y=\"30\" width=\"" + std::to_string(W - 80) + "\" height=\"" + std::to_string(H - 70) +
           "\" fill=\"none\" stroke=\"#999999\"/>\n";
    out += "<line x1=\"" + fixed2(vp.px(0)) + "\" y1=\"30\" x2=\"" + fixed2(vp.px(0)) + "\" y2=\"" +
           std::to_string(H - 40) + "\" stroke=\"#cccccc\" stroke-dasharray=\"4 3\"/>\n";
    for (double y : {lo, 0.5 * (lo + hi), hi})
        out += "<text x=\"55\" y=\"" + fixed2(vp.py(y) + 4) + "\" text-anchor=\"end\" font-family=\"sans-serif\" "
               "font-size=\"10\">" + fixed2(y) + "</text>\n";
    if (n > 0)
        out += "<path d=\"" + svg_path(cx, c.context, vp) + "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1.2\"/>\n";
    draw_bands(out, fx, c.baseline, vp, "#1f77b4");
    draw_bands(out, fx, c.intervened, vp, "#d62728");
    out += "<text x=\"70\" y=\"" + std::to_string(H - 20) + "\" font-family=\"sans-serif\" font-size=\"11\" "
           "fill=\"#1f77b4\">baseline</text>\n";
    if (!c.intervened.median.empty())
        out += "<text x=\"140\" y=\"" + std::to_string(H - 20) + "\" font-family=\"sans-serif\" font-size=\"11\" "
               "fill=\"#d62728\">intervened</text>\n";
    out += "</svg>\n";
    return out;
}

std::string heat_color(double v, double lo, double hi) {
    double t = hi > lo ? (v - lo) / (hi - lo) : 1.0;
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(255 + t * (8 - 255)));
    const int g = static_cast<int>(std::lround(255 + t * (48 - 255)));
    const int b = static_cast<int>(std::lround(255 + t * (107 - 255)));
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

std::string heatmap_svg(const SimilarityMatrix& m, const std::string& title, double lo, double hi) {
    constexpr int cell = 40, left = 90, top = 40;
    const auto rows = static_cast<int>(m.values.rows()), cols = static_cast<int>(m.values.cols());
    const int W = left + cols * cell + 20, H = top + rows * cell + 60;
    std::string out = header(W, H);
    out += "<text x=\"" + std::to_string(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"13\">" + escape(title) + "</text>\n";
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            const double v = m.values(i, j);
            out += "<rect x=\"" + std::to_string(left + j * cell) + "\" y=\"" + std::to_string(top + i * cell) +
                   "\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" +
                   heat_color(v, lo, hi) + "\"><title>" + fixed2(v) + "</title></rect>\n";
        }
        const std::string label = static_cast<std::size_t>(i) < m.row_labels.size() ? m.row_labels[static_cast<std::size_t>(i)] : "";
        out += "<text x=\"" + std::to_string(left - 5) + "\" y=\"" + std::to_string(top + i * cell + cell / 2 + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + escape(label) + "</text>\n";
    }
    for (int j = 0; j < cols; ++j) {
        const std::string label = static_cast<std::size_t>(j) < m.col_labels.size() ? m.col_labels[static_cast<std::size_t>(j)] : "";
        out += "<text x=\"" + std::to_string(left + j * cell + cell / 2) + "\" y=\"" +
               std::to_string(top + rows * cell + 14) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
               "font-size=\"9\">" + escape(label) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace tsteer
