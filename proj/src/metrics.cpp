// SPDX-License-Identifier: Apache-2.0

#include "moelab/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "moelab/svg_chart.hpp"

namespace moelab {

std::vector<double> relative_deviation(std::span<const std::int64_t> counts) {
    if (counts.empty()) throw ConfigError("relative_deviation: no experts");
    std::int64_t total = 0;
    for (auto c : counts) total += c;
    if (total <= 0) throw ConfigError("relative_deviation: empty batch");
    const double uniform = static_cast<double>(total) / static_cast<double>(counts.size());
    std::vector<double> dev(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i)
        dev[i] = (static_cast<double>(counts[i]) - uniform) / uniform;
    return dev;
}

DeviationExtremes max_min_deviation(std::span<const std::int64_t> counts) {
    const auto dev = relative_deviation(counts);
    const auto [lo, hi] = std::minmax_element(dev.begin(), dev.end());
    return {*hi, *lo};
}

std::vector<DeviationExtremes> max_min_deviation(std::span<const LoadStats> history) {
    if (history.empty()) throw ConfigError("max_min_deviation: empty history");
    std::vector<DeviationExtremes> out;
    out.reserve(history.size());
    for (const auto& s : history) out.push_back(max_min_deviation(s.counts));
    return out;
}

RunRecord::RunRecord(std::string run_id, std::size_t num_layers, std::size_t num_experts,
                     std::vector<std::size_t> tracked_layers)
    : run_id_(std::move(run_id)),
      num_layers_(num_layers),
      num_experts_(num_experts),
      tracked_(std::move(tracked_layers)) {
    for (auto l : tracked_)
        if (l >= num_layers_) throw ConfigError("tracked layer outside the layer stack");
}

void RunRecord::append(StepRecord rec) {
    if (!steps_.empty() && rec.step <= steps_.back().step)
        throw ConfigError("RunRecord: step indices must be strictly increasing");
    if (rec.layers.size() != num_layers_) throw ConfigError("RunRecord: layer count mismatch");
    steps_.push_back(std::move(rec));
}

void RunRecord::add_snapshot(Snapshot snap) {
    if (std::find(tracked_.begin(), tracked_.end(), snap.layer) == tracked_.end())
        throw ConfigError("RunRecord: snapshot layer " + std::to_string(snap.layer) +
                          " is not tracked");
    snapshots_.push_back(std::move(snap));
}

std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::vector<std::string> metrics_csv_header(std::size_t num_layers) {
    std::vector<std::string> h{"step", "progress", "lr", "batch_size", "task_loss", "balance_loss"};
    for (std::size_t l = 0; l < num_layers; ++l) {
        const std::string p = "L" + std::to_string(l) + "_";
        for (const char* c : {"k", "assignments", "max_dev", "min_dev", "bias_norm"})
            h.push_back(p + c);
    }
    return h;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

void join(std::ostream& o, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) o << (i ? "," : "") << cells[i];
    o << '\n';
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

}  // namespace

void emit_csv(const RunRecord& record, const std::filesystem::path& path) {
    auto out = open_out(path);
    join(out, metrics_csv_header(record.num_layers()));
    for (const auto& s : record.steps()) {
        std::vector<std::string> row{std::to_string(s.step), format_real(s.progress),
                                     format_real(s.lr), std::to_string(s.batch_size),
                                     format_real(s.task_loss), format_real(s.balance_loss)};
        for (const auto& l : s.layers) {
            row.push_back(std::to_string(l.active_k));
            row.push_back(std::to_string(l.assignments));
            row.push_back(format_real(l.max_dev));
            row.push_back(format_real(l.min_dev));
            row.push_back(format_real(l.bias_norm));
        }
        join(out, row);
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void emit_snapshots_csv(const RunRecord& record, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "step,layer,expert,count,f,p\n";
    for (const auto& s : record.snapshots())
        for (std::size_t e = 0; e < s.counts.size(); ++e)
            out << s.step << ',' << s.layer << ',' << e << ',' << s.counts[e] << ','
                << format_real(s.fractions[e]) << ',' << format_real(s.mean_probs[e]) << '\n';
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

RunRecord load_metrics_csv(const std::filesystem::path& path, const std::string& run_id) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing header");
    const auto header = split(line);
    constexpr std::size_t kFixed = 6, kPerLayer = 5;
    if (header.size() < kFixed || (header.size() - kFixed) % kPerLayer != 0)
        throw std::runtime_error(path.string() + ": unrecognized header");
    const std::size_t layers = (header.size() - kFixed) / kPerLayer;
    if (header != metrics_csv_header(layers))
        throw std::runtime_error(path.string() + ": unrecognized header");
    std::vector<std::size_t> all(layers);
    for (std::size_t l = 0; l < layers; ++l) all[l] = l;
    RunRecord rec(run_id, layers, 0, all);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split(line);
        if (c.size() != header.size()) throw std::runtime_error(path.string() + ": ragged row");
        StepRecord s;
        s.step = std::stoll(c[0]);
        s.progress = std::stod(c[1]);
        s.lr = std::stod(c[2]);
        s.batch_size = std::stoll(c[3]);
        s.task_loss = std::stod(c[4]);
        s.balance_loss = std::stod(c[5]);
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t b = kFixed + l * kPerLayer;
            s.layers.push_back({static_cast<std::size_t>(std::stoull(c[b])), std::stoll(c[b + 1]),
                                std::stod(c[b + 2]), std::stod(c[b + 3]), std::stod(c[b + 4])});
        }
        rec.append(std::move(s));
    }
    return rec;
}

namespace {

svg::Chart deviation_chart(std::span<const RunRecord> records, std::size_t layer,
                           const std::string& title) {
    svg::Chart c{title, "step", "relative deviation from uniform", {}, false};
    for (const auto& r : records) {
        svg::Series hi{r.run_id() + " max", {}, {}}, lo{r.run_id() + " min", {}, {}};
        for (const auto& s : r.steps()) {
            hi.x.push_back(static_cast<double>(s.step));
            lo.x.push_back(static_cast<double>(s.step));
            hi.y.push_back(s.layers[layer].max_dev);
            lo.y.push_back(s.layers[layer].min_dev);
        }
        c.series.push_back(std::move(hi));
        c.series.push_back(std::move(lo));
    }
    return c;
}

}  // namespace

std::vector<std::filesystem::path> emit_plots(const RunRecord& record,
                                              const std::filesystem::path& out_dir) {
    if (record.steps().empty() && record.snapshots().empty())
        throw ConfigError("emit_plots: empty record");
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    const std::string id = record.run_id().empty() ? "run" : record.run_id();

    if (record.steps().size() >= 2) {
        const RunRecord one[] = {record};
        for (auto l : record.tracked_layers()) {
            auto p = out_dir / (id + "_deviation_L" + std::to_string(l) + ".svg");
            svg::write(deviation_chart(one, l, id + ": layer " + std::to_string(l) +
                                                   " max/min-loaded expert deviation"),
                       p);
            written.push_back(std::move(p));
        }
    }

    if (!record.snapshots().empty()) {
        const std::int64_t last = record.snapshots().back().step;
        for (const auto& s : record.snapshots()) {
            if (s.step != last) continue;
            svg::Chart c{id + ": layer " + std::to_string(s.layer) + " f and p at step " +
                             std::to_string(last),
                         "expert", "fraction", {}, true};
            svg::Series f{"f (token fraction)", {}, s.fractions};
            svg::Series p{"p (mean gate prob)", {}, s.mean_probs};
            for (std::size_t e = 0; e < s.fractions.size(); ++e) {
                f.x.push_back(static_cast<double>(e));
                p.x.push_back(static_cast<double>(e));
            }
            c.series = {std::move(f), std::move(p)};
            auto path = out_dir / (id + "_distribution_L" + std::to_string(s.layer) + ".svg");
            svg::write(c, path);
            written.push_back(std::move(path));
        }
    }
    return written;
}

std::vector<std::filesystem::path> emit_comparison_plots(std::span<const RunRecord> records,
                                                         std::span<const std::size_t> layers,
                                                         const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    for (auto l : layers) {
        for (const auto& r : records)
            if (l >= r.num_layers()) throw ConfigError("comparison layer outside a run's stack");
        auto p = out_dir / ("compare_deviation_L" + std::to_string(l) + ".svg");
        svg::write(deviation_chart(records, l, "layer " + std::to_string(l) +
                                                   " deviation by strategy"),
                   p);
        written.push_back(std::move(p));
    }
    return written;
}

}  // namespace moelab
