// SPDX-License-Identifier: Apache-2.0

#include "moelab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "moelab/parallel_sim.hpp"

namespace moelab {

namespace {

namespace fs = std::filesystem;

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

// Shortest of %.15g / %.17g that parses back to the same double.
std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.15g", v);
    if (std::strtod(buf, nullptr) != v) std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

[[noreturn]] void bad_value(const std::string& key, std::string_view v) {
    throw ConfigError("invalid value for " + key + ": '" + std::string(v) + "'");
}

template <class T>
T parse_int(const std::string& key, std::string_view v) {
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v);
    return out;
}

double parse_real(const std::string& key, std::string_view v) {
    const std::string s(v);
    try {
        std::size_t used = 0;
        const double d = std::stod(s, &used);
        if (used != s.size()) bad_value(key, v);
        return d;
    } catch (const std::logic_error&) {
        if (s == "inf") return INFINITY;
        bad_value(key, v);
    }
}

bool parse_bool(const std::string& key, std::string_view v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v);
}

template <class T, class F>
std::vector<T> parse_list(std::string_view v, F&& one) {
    std::vector<T> out;
    if (trim(v).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = v.find(',', start);
        out.push_back(one(trim(v.substr(start, comma - start))));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <class T, class F>
std::string join_list(const std::vector<T>& v, F&& one) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + one(v[i]);
    return s;
}

struct Key {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, std::string_view)> set;
};

template <class T>
Key size_key(std::string name, T RunConfig::*outer, std::size_t T::*field) {
    return {std::move(name),
            [=](const RunConfig& c) { return std::to_string(c.*outer.*field); },
            [=](RunConfig& c, const std::string& k, std::string_view v) {
                c.*outer.*field = parse_int<std::size_t>(k, v);
            }};
}

template <class T, class I>
Key int_key(std::string name, T RunConfig::*outer, I T::*field) {
    return {std::move(name),
            [=](const RunConfig& c) { return std::to_string(c.*outer.*field); },
            [=](RunConfig& c, const std::string& k, std::string_view v) {
                c.*outer.*field = parse_int<I>(k, v);
            }};
}

template <class T>
Key real_key(std::string name, T RunConfig::*outer, double T::*field) {
    return {std::move(name), [=](const RunConfig& c) { return real(c.*outer.*field); },
            [=](RunConfig& c, const std::string& k, std::string_view v) {
                c.*outer.*field = parse_real(k, v);
            }};
}

template <class T>
Key bool_key(std::string name, T RunConfig::*outer, bool T::*field) {
    return {std::move(name),
            [=](const RunConfig& c) { return std::string(c.*outer.*field ? "true" : "false"); },
            [=](RunConfig& c, const std::string& k, std::string_view v) {
                c.*outer.*field = parse_bool(k, v);
            }};
}

const std::vector<Key>& keys() {
    static const std::vector<Key> table = [] {
        std::vector<Key> k;
        k.push_back(size_key("lab.num_experts", &RunConfig::lab, &LabConfig::num_experts));
        k.push_back(size_key("lab.top_k", &RunConfig::lab, &LabConfig::top_k));
        k.push_back(size_key("lab.hidden_size", &RunConfig::lab, &LabConfig::hidden_size));
        k.push_back(size_key("lab.expert_intermediate_size", &RunConfig::lab,
                             &LabConfig::expert_intermediate_size));
        k.push_back(size_key("lab.num_layers", &RunConfig::lab, &LabConfig::num_layers));
        k.push_back(size_key("lab.num_parallel_groups", &RunConfig::lab,
                             &LabConfig::num_parallel_groups));
        k.push_back(int_key("lab.seed", &RunConfig::lab, &LabConfig::seed));
        k.push_back(real_key("lab.lbl_coefficient", &RunConfig::lab, &LabConfig::lbl_coefficient));
        k.push_back(real_key("lab.temperature", &RunConfig::lab, &LabConfig::temperature));
        k.push_back(real_key("lab.bias_step", &RunConfig::lab, &LabConfig::bias_step));
        k.push_back(bool_key("lab.renormalize_gates", &RunConfig::lab, &LabConfig::renormalize_gates));
        k.push_back(bool_key("lab.fp32_gating", &RunConfig::lab, &LabConfig::fp32_gating));

        k.push_back({"strategy", [](const RunConfig& c) { return std::string(to_string(c.strategy)); },
                     [](RunConfig& c, const std::string&, std::string_view v) {
                         c.strategy = parse_balance_kind(v);
                     }});
        k.push_back({"sync_probs", [](const RunConfig& c) { return std::string(c.sync_probs ? "true" : "false"); },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.sync_probs = parse_bool(key, v);
                     }});

        k.push_back(size_key("task.num_clusters", &RunConfig::task, &TaskConfig::num_clusters));
        k.push_back(real_key("task.separability", &RunConfig::task, &TaskConfig::separability));
        k.push_back(real_key("task.center_scale", &RunConfig::task, &TaskConfig::center_scale));
        k.push_back(real_key("task.common_scale", &RunConfig::task, &TaskConfig::common_scale));
        k.push_back(real_key("task.target_scale", &RunConfig::task, &TaskConfig::target_scale));
        k.push_back(real_key("task.map_scale", &RunConfig::task, &TaskConfig::map_scale));
        k.push_back(real_key("task.distractor_scale", &RunConfig::task, &TaskConfig::distractor_scale));
        k.push_back({"task.layer_difficulty",
                     [](const RunConfig& c) { return join_list(c.task.layer_difficulty, real); },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.task.layer_difficulty = parse_list<double>(
                             v, [&](const std::string& s) { return parse_real(key, s); });
                     }});

        k.push_back({"sparsity.early_counts",
                     [](const RunConfig& c) {
                         return join_list(c.sparsity.early_counts,
                                          [](std::size_t x) { return std::to_string(x); });
                     },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.sparsity.early_counts = parse_list<std::size_t>(
                             v, [&](const std::string& s) { return parse_int<std::size_t>(key, s); });
                     }});
        k.push_back(size_key("sparsity.default_count", &RunConfig::sparsity,
                             &SparsitySchedule::default_count));
        k.push_back(real_key("sparsity.switch_fraction", &RunConfig::sparsity,
                             &SparsitySchedule::switch_fraction));

        k.push_back(int_key("lr.warmup_steps", &RunConfig::lr, &LrSchedule::warmup_steps));
        k.push_back(real_key("lr.peak", &RunConfig::lr, &LrSchedule::peak_lr));
        k.push_back(real_key("lr.stable_fraction", &RunConfig::lr, &LrSchedule::stable_fraction));
        k.push_back(real_key("lr.mid", &RunConfig::lr, &LrSchedule::mid_lr));
        k.push_back(real_key("lr.mid_fraction", &RunConfig::lr, &LrSchedule::mid_fraction));
        k.push_back(real_key("lr.final", &RunConfig::lr, &LrSchedule::final_lr));

        k.push_back(int_key("batch.start", &RunConfig::batch, &BatchRamp::start_size));
        k.push_back(int_key("batch.end", &RunConfig::batch, &BatchRamp::end_size));
        k.push_back(real_key("batch.ramp_fraction", &RunConfig::batch, &BatchRamp::ramp_fraction));
        k.push_back(int_key("batch.granularity", &RunConfig::batch, &BatchRamp::granularity));

        k.push_back(real_key("optim.beta1", &RunConfig::optimizer, &AdamWConfig::beta1));
        k.push_back(real_key("optim.beta2", &RunConfig::optimizer, &AdamWConfig::beta2));
        k.push_back(real_key("optim.eps", &RunConfig::optimizer, &AdamWConfig::eps));
        k.push_back(real_key("optim.weight_decay", &RunConfig::optimizer, &AdamWConfig::weight_decay));
        k.push_back(real_key("optim.grad_clip", &RunConfig::optimizer, &AdamWConfig::grad_clip));

        k.push_back({"train.steps", [](const RunConfig& c) { return std::to_string(c.steps); },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.steps = parse_int<std::int64_t>(key, v);
                     }});
        k.push_back({"train.stop_after", [](const RunConfig& c) { return std::to_string(c.stop_after); },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.stop_after = parse_int<std::int64_t>(key, v);
                     }});
        k.push_back({"train.init_std", [](const RunConfig& c) { return real(c.init_std); },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.init_std = parse_real(key, v);
                     }});
        k.push_back({"log.snapshot_every",
                     [](const RunConfig& c) { return std::to_string(c.snapshot_every); },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.snapshot_every = parse_int<std::int64_t>(key, v);
                     }});
        k.push_back({"log.tracked_layers",
                     [](const RunConfig& c) {
                         return join_list(c.tracked_layers, [](std::size_t x) { return std::to_string(x); });
                     },
                     [](RunConfig& c, const std::string& key, std::string_view v) {
                         c.tracked_layers = parse_list<std::size_t>(
                             v, [&](const std::string& s) { return parse_int<std::size_t>(key, s); });
                     }});
        k.push_back({"run.id", [](const RunConfig& c) { return c.run_id; },
                     [](RunConfig& c, const std::string&, std::string_view v) { c.run_id = v; }});
        k.push_back({"run.out_dir", [](const RunConfig& c) { return c.out_dir; },
                     [](RunConfig& c, const std::string&, std::string_view v) { c.out_dir = v; }});
        return k;
    }();
    return table;
}

void assign(RunConfig& cfg, const std::string& key, std::string_view value) {
    const auto& t = keys();
    const auto it = std::find_if(t.begin(), t.end(), [&](const Key& k) { return k.name == key; });
    if (it == t.end()) throw ConfigError("unknown key: " + key);
    it->set(cfg, key, value);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ----------------------------------------------------------- commands

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides,
            const std::string& resume, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = parse_config(read_file(config_path));
        for (const auto& o : overrides) apply_override(cfg, o);
        validate_run_config(cfg);
    } catch (const ConfigError& e) {
        err << "moelab run: " << e.what() << '\n';
        return kExitUsage;
    }
    try {
        const fs::path dir = cfg.out_dir;
        fs::create_directories(dir);
        {
            std::ofstream rc(dir / "resolved_config.txt", std::ios::binary);
            rc << dump_config(cfg);
            if (!rc) throw std::runtime_error("cannot write resolved_config.txt");
        }
        Experiment exp = resume.empty() ? Experiment(cfg) : Experiment::load_checkpoint(resume, cfg);
        exp.run();
        emit_csv(exp.record(), dir / "metrics.csv");
        emit_snapshots_csv(exp.record(), dir / "snapshots.csv");
        emit_plots(exp.record(), dir / "plots");
        exp.save_checkpoint(dir / "checkpoint.bin");
        out << "run " << cfg.run_id << ": " << exp.record().steps().size() << " steps -> "
            << dir.string() << '\n';
        if (!exp.record().steps().empty()) {
            const auto& last = exp.record().steps().back();
            out << "final task_loss " << format_real(last.task_loss) << ", balance_loss "
                << format_real(last.balance_loss) << '\n';
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "moelab run: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "moelab run: " << e.what() << '\n';
        return kExitRuntime;
    }
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out_dir,
                std::ostream& out, std::ostream& err) {
    if (dirs.size() < 2) {
        err << "moelab compare: need at least two run directories\n";
        return kExitUsage;
    }
    std::vector<RunRecord> records;
    try {
        for (const auto& d : dirs) {
            std::string id = fs::path(d).filename().string();
            if (id.empty()) id = fs::path(d).parent_path().filename().string();
            records.push_back(load_metrics_csv(fs::path(d) / "metrics.csv", id));
        }
    } catch (const std::exception& e) {
        err << "moelab compare: " << e.what() << '\n';
        return kExitUsage;
    }
    const auto grid = [](const RunRecord& r) {
        std::vector<std::int64_t> s;
        for (const auto& x : r.steps()) s.push_back(x.step);
        return s;
    };
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (grid(records[i]) != grid(records[0]) || records[i].num_layers() != records[0].num_layers()) {
            err << "moelab compare: step grid of " << dirs[i] << " differs from " << dirs[0] << '\n';
            return kExitUsage;
        }
    }
    if (records[0].steps().empty()) {
        err << "moelab compare: runs have no logged steps\n";
        return kExitUsage;
    }
    try {
        std::vector<std::size_t> layers(records[0].num_layers());
        for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
        emit_comparison_plots(records, layers, out_dir);

        const auto& base = records[0].steps().back();
        out << "run,layer,final_max_dev,final_min_dev,final_task_loss,final_balance_loss,"
               "d_max_dev,d_min_dev,d_task_loss,d_balance_loss\n";
        for (const auto& r : records) {
            const auto& s = r.steps().back();
            for (std::size_t l = 0; l < r.num_layers(); ++l) {
                const auto& m = s.layers[l];
                const auto& b = base.layers[l];
                out << r.run_id() << ',' << l << ',' << format_real(m.max_dev) << ','
                    << format_real(m.min_dev) << ',' << format_real(s.task_loss) << ','
                    << format_real(s.balance_loss) << ',' << format_real(m.max_dev - b.max_dev) << ','
                    << format_real(m.min_dev - b.min_dev) << ','
                    << format_real(s.task_loss - base.task_loss) << ','
                    << format_real(s.balance_loss - base.balance_loss) << '\n';
            }
        }
        return kExitOk;
    } catch (const std::exception& e) {
        err << "moelab compare: " << e.what() << '\n';
        return kExitRuntime;
    }
}

constexpr const char* kTrafficUsage =
    "usage: moelab traffic <micro_batch> <top_k> <hidden> <dtype>\n"
    "  dtype: fp16 | bf16 | fp32 | fp64\n";

int cmd_traffic(const std::vector<std::string>& a, std::ostream& out, std::ostream& err) {
    if (a.size() != 4) {
        err << kTrafficUsage;
        return kExitUsage;
    }
    try {
        std::uint64_t bytes = 0;
        if (a[3] == "fp16" || a[3] == "bf16") bytes = 2;
        else if (a[3] == "fp32") bytes = 4;
        else if (a[3] == "fp64") bytes = 8;
        else throw ConfigError("unknown dtype '" + a[3] + "'");
        out << ep_traffic(parse_int<std::uint64_t>("micro_batch", a[0]),
                          parse_int<std::uint64_t>("top_k", a[1]),
                          parse_int<std::uint64_t>("hidden", a[2]), bytes)
            << '\n';
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "moelab traffic: " << e.what() << '\n' << kTrafficUsage;
        return kExitUsage;
    }
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) out.push_back(k.name);
    return out;
}

std::string dump_config(const RunConfig& cfg) {
    std::string s;
    for (const auto& k : keys()) s += k.name + " = " + k.get(cfg) + '\n';
    return s;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        assign(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos)
        throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
    assign(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"moelab: MoE routing and load-balancing lab", "moelab"};
    app.require_subcommand(1);

    std::string config_path, resume;
    std::vector<std::string> overrides;
    auto* run = app.add_subcommand("run", "train one configuration and write its outputs");
    run->add_option("config", config_path, "key = value config file")->required();
    run->add_option("--set", overrides, "override one key (key=value); repeatable");
    run->add_option("--resume", resume, "continue from a checkpoint");

    std::vector<std::string> dirs;
    std::string compare_out = "compare";
    auto* compare = app.add_subcommand("compare", "overlay deviation curves of finished runs");
    compare->add_option("dirs", dirs, "run directories")->required();
    compare->add_option("--out", compare_out, "directory for comparison plots");

    std::vector<std::string> traffic_args;
    auto* traffic = app.add_subcommand("traffic", "bytes moved per token-routing exchange");
    traffic->add_option("args", traffic_args, "<micro_batch> <top_k> <hidden> <dtype>");

    auto* dump = app.add_subcommand("dump-defaults", "print every config key with its default");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (traffic->parsed() && traffic_args.empty()) {
            err << kTrafficUsage;
            return kExitUsage;
        }
        err << "moelab: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    if (run->parsed()) return cmd_run(config_path, overrides, resume, out, err);
    if (compare->parsed()) return cmd_compare(dirs, compare_out, out, err);
    if (traffic->parsed()) return cmd_traffic(traffic_args, out, err);
    if (dump->parsed()) {
        out << dump_config(RunConfig{});
        return kExitOk;
    }
    err << app.help();
    return kExitUsage;
}

}  // namespace moelab
