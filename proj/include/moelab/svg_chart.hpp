// SPDX-License-Identifier: Apache-2.0
//
// Minimal self-contained SVG charts. The plotted numbers are embedded as
// JSON in a <metadata id="series"> element so files can be checked without
// rendering.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace moelab::svg {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct Chart {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    bool bars = false;  // grouped bars at integer x positions
};

std::string render(const Chart& chart);
/// Throws std::runtime_error when the file cannot be written.
void write(const Chart& chart, const std::filesystem::path& path);

}  // namespace moelab::svg
