// SPDX-License-Identifier: Apache-2.0

#include "moelab/svg_chart.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace moelab::svg {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string esc(const std::string& s) {
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

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void finish() {
        if (!std::isfinite(lo)) lo = 0, hi = 1;
        if (hi - lo < 1e-12) {
            lo -= 0.5;
            hi += 0.5;
        }
    }
};

}  // namespace

std::string render(const Chart& chart) {
    Range xr, yr;
    for (const auto& s : chart.series) {
        for (double v : s.x) xr.add(v);
        for (double v : s.y) yr.add(v);
    }
    if (chart.bars) {
        yr.add(0.0);
        xr.add(xr.lo - 0.5);
        xr.add(xr.hi + 0.5);
    }
    xr.finish();
    yr.finish();
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto sx = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
    auto sy = [&](double y) { return kTop + (yr.hi - y) / (yr.hi - yr.lo) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";

    nlohmann::json meta;
    meta["title"] = chart.title;
    meta["series"] = nlohmann::json::array();
    for (const auto& s : chart.series)
        meta["series"].push_back({{"name", s.name}, {"x", s.x}, {"y", s.y}});
    o << "<metadata id=\"series\"><![CDATA[" << meta.dump() << "]]></metadata>\n";

    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"15\">"
      << esc(chart.title) << "</text>\n";
    o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#333\"/>\n";

    for (int t = 0; t <= 4; ++t) {
        const double yv = yr.lo + (yr.hi - yr.lo) * t / 4.0;
        const double xv = xr.lo + (xr.hi - xr.lo) * t / 4.0;
        o << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << sy(yv) << "\" y2=\""
          << sy(yv) << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(yv) + 4
          << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(yv)
          << "</text>\n";
        o << "<text x=\"" << sx(xv) << "\" y=\"" << kTop + ph + 16
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << num(xv)
          << "</text>\n";
    }
    if (yr.lo < 0 && yr.hi > 0)
        o << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << sy(0) << "\" y2=\""
          << sy(0) << "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
    o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << esc(chart.x_label) << "</text>\n";
    o << "<text transform=\"translate(16," << kTop + ph / 2
      << ") rotate(-90)\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << esc(chart.y_label) << "</text>\n";

    const std::size_t ns = chart.series.size();
    for (std::size_t si = 0; si < ns; ++si) {
        const auto& s = chart.series[si];
        const char* color = kPalette[si % std::size(kPalette)];
        if (chart.bars) {
            const double slot = pw / (xr.hi - xr.lo) * 0.8;
            const double bw = slot / static_cast<double>(std::max<std::size_t>(ns, 1));
            for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
                const double x0 = sx(s.x[i]) - slot / 2 + bw * static_cast<double>(si);
                const double y0 = sy(std::max(0.0, s.y[i])), y1 = sy(std::min(0.0, s.y[i]));
                o << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << bw << "\" height=\""
                  << y1 - y0 << "\" fill=\"" << color << "\"/>\n";
            }
        } else {
            o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
                if (!std::isfinite(s.y[i])) continue;
                o << sx(s.x[i]) << ',' << sy(s.y[i]) << ' ';
            }
            o << "\"/>\n";
        }
        const double ly = kTop + 14 + 18 * static_cast<double>(si);
        o << "<rect x=\"" << kLeft + pw + 12 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"10\" fill=\""
          << color << "\"/>\n";
        o << "<text x=\"" << kLeft + pw + 30 << "\" y=\"" << ly
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << esc(s.name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

void write(const Chart& chart, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << render(chart);
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace moelab::svg
