#include "gatecraft/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "gatecraft/errors.hpp"
#include "gatecraft/pipeline.hpp"

namespace gatecraft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Bad invocation or input file; maps to the usage exit code.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    std::optional<std::uint64_t> seed;
};

void add_run_options(CLI::App* cmd, RunOptions& opts) {
    cmd->add_option("config", opts.config, "Run config JSON (defaults apply when omitted)");
    cmd->add_option("--set", opts.overrides, "Dotted override, e.g. schedule.final_target=0.3");
    cmd->add_option("--out", opts.out, "Output directory (default: $GATECRAFT_OUT or ./gatecraft_out)");
    cmd->add_option("--seed", opts.seed, "Replaces the config seed");
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // The parser message already carries the line and column.
        throw UsageError(path + ": malformed JSON: " + e.what());
    }
}

PruneRunConfig load_config(const RunOptions& opts) {
    json doc = opts.config.empty() ? json::object() : read_json_file(opts.config);
    for (const auto& o : opts.overrides) apply_override(doc, o);
    if (opts.seed) doc["seed"] = *opts.seed;
    return config_from_json(doc);
}

fs::path out_dir(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("GATECRAFT_OUT"); env && *env) return env;
    return "gatecraft_out";
}

ArchDescriptor load_arch(const std::string& what) {
    if (what == "toy") return toy_descriptor();
    if (what == "wav2vec2-base") return wav2vec2_base_descriptor();
    const json doc = read_json_file(what);
    try {
        return arch_from_json(doc);
    } catch (const ConfigError& e) {
        throw UsageError(what + ": " + e.what());
    }
}

Checkpoint load_input(const fs::path& path, const std::string& hint) {
    if (!fs::exists(path)) throw UsageError("no checkpoint at " + path.string() + "; " + hint);
    return load_checkpoint(path);
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

bool report_constraint(const PipelineResult& r, double tolerance, std::ostream& out, std::ostream& err) {
    if (r.target.separate()) {
        out << "terminal sparsity cnn " << fixed(r.terminal_sparsity_cnn, 4) << " (target "
            << fixed(r.target.value, 4) << "), transformer " << fixed(r.terminal_sparsity_trans, 4)
            << " (target " << fixed(*r.target.transformer, 4) << ")\n";
    } else {
        out << "terminal sparsity " << fixed(r.terminal_sparsity, 4) << " (target " << fixed(r.target.value, 4)
            << ")\n";
    }
    if (!r.constraint_met) {
        err << "sparsity constraint not met: achieved " << fixed(r.terminal_sparsity, 4) << " (cnn "
            << fixed(r.terminal_sparsity_cnn, 4) << ", transformer " << fixed(r.terminal_sparsity_trans, 4)
            << "), tolerance " << tolerance << "\n";
    }
    return r.constraint_met;
}

void print_extraction(const PipelineResult& r, std::ostream& out) {
    for (const auto& w : r.warnings) out << "warning: " << w << "\n";
    out << "extracted MACs " << r.extracted_macs << " of " << r.dense_macs << " (budget " << r.mac_budget
        << ", ratio " << fixed(static_cast<double>(r.extracted_macs) / static_cast<double>(r.mac_budget), 4)
        << ")\n";
    out << "extracted params " << r.extracted_params << " of " << r.dense_params << "\n";
}

int cmd_profile(const std::string& arch_arg, double seconds, const std::string& csv_flag, const std::string& out_flag,
                std::ostream& out) {
    const auto arch = load_arch(arch_arg);
    const auto p = exact_profile(arch, seconds);
    const fs::path csv = csv_flag.empty() ? out_dir(out_flag) / "profile.csv" : fs::path(csv_flag);
    write_file(csv, profile_csv(p));
    out << "seconds " << p.seconds << ", samples " << p.samples << ", frames " << p.frames << "\n";
    out << "total MACs " << p.macs << " (" << fixed(static_cast<double>(p.macs) / 1e9, 2) << " GMAC)\n";
    out << "total params " << p.params << " (" << fixed(static_cast<double>(p.params) / 1e6, 2) << " M)\n";
    out << "MAC share cnn " << fixed(p.cnn_mac_share(), 4) << ", transformer " << fixed(1.0 - p.cnn_mac_share(), 4)
        << "\n";
    out << "param share cnn " << fixed(p.cnn_param_share(), 4) << ", transformer "
        << fixed(1.0 - p.cnn_param_share(), 4) << "\n";
    out << "per-block CSV " << csv.string() << "\n";
    return kExitOk;
}

int cmd_train(const RunOptions& opts, std::ostream& out) {
    const auto config = load_config(opts);
    const RunFiles files{out_dir(opts.out)};
    const auto model = run_train(config, files);
    out << "dense accuracy " << fixed(evaluate(model.network(), nullptr, evaluation_set(config)), 4) << "\n";
    out << "checkpoint " << files.train_checkpoint().string() << "\n";
    return kExitOk;
}

int cmd_prune(const RunOptions& opts, bool from_scratch, std::ostream& out, std::ostream& err) {
    const auto config = load_config(opts);
    const RunFiles files{out_dir(opts.out)};
    std::optional<GatedModel> model;
    if (from_scratch) {
        model.emplace(run_train(config, files));
    } else {
        auto ckpt = load_input(files.train_checkpoint(), "run `gatecraft train` first or pass --from-scratch");
        if (!ckpt.gated) throw UsageError(files.train_checkpoint().string() + " does not hold a gated model");
        model.emplace(std::move(*ckpt.gated));
    }
    PipelineResult result;
    result.dense_accuracy = evaluate(model->network(), nullptr, evaluation_set(config));
    run_prune(config, *model, files, result);
    write_file(files.summary(), to_json(result).dump(2) + "\n");
    out << "pruned accuracy " << fixed(result.pruned_accuracy, 4) << " (dense " << fixed(result.dense_accuracy, 4)
        << ")\n";
    print_extraction(result, out);
    return report_constraint(result, config.sparsity_tolerance, out, err) ? kExitOk : kExitConstraint;
}

int cmd_extract(const RunOptions& opts, std::ostream& out) {
    const auto config = load_config(opts);
    const RunFiles files{out_dir(opts.out)};
    auto ckpt = load_input(files.prune_checkpoint(), "run `gatecraft prune` first");
    if (!ckpt.gated) throw UsageError(files.prune_checkpoint().string() + " does not hold a gated model");
    PipelineResult r;
    const auto mask = binarize(*ckpt.gated, config.threshold, config.gate_rule, &r.warnings);
    const auto extracted = extract(*ckpt.gated, mask);
    const double seconds = config.regime.virtual_seconds;
    const auto dense = exact_profile(extracted.original, seconds);
    const auto small = exact_profile(extracted.descriptor(), seconds);
    r.dense_macs = dense.macs;
    r.dense_params = dense.params;
    r.extracted_macs = small.macs;
    r.extracted_params = small.params;
    r.mac_budget = mac_budget_from_sparsity(extracted.original, config.target.value, seconds);
    Checkpoint out_ckpt;
    out_ckpt.extracted.emplace(extracted);
    out_ckpt.meta = {{"stage", "extract"}, {"config", to_json(config)}};
    save_checkpoint(files.extracted_checkpoint(), out_ckpt);
    write_file(files.report(), report_csv(architecture_report(extracted, seconds)));
    print_extraction(r, out);
    out << "checkpoint " << files.extracted_checkpoint().string() << "\n";
    return kExitOk;
}

int cmd_finetune(const RunOptions& opts, std::ostream& out) {
    const auto config = load_config(opts);
    const RunFiles files{out_dir(opts.out)};
    auto ckpt = load_input(files.extracted_checkpoint(), "run `gatecraft prune` or `gatecraft extract` first");
    if (!ckpt.extracted) throw UsageError(files.extracted_checkpoint().string() + " does not hold an extracted model");
    const double acc = run_finetune(config, *ckpt.extracted, files);
    out << "finetuned accuracy " << fixed(acc, 4) << "\n";
    out << "checkpoint " << files.finetune_checkpoint().string() << "\n";
    return kExitOk;
}

int cmd_report(const std::string& checkpoint, std::optional<double> seconds, const std::string& out_flag,
               std::ostream& out) {
    const RunFiles files{out_dir(out_flag)};
    const fs::path path = checkpoint.empty() ? files.extracted_checkpoint() : fs::path(checkpoint);
    auto ckpt = load_input(path, "pass --checkpoint or run `gatecraft prune` first");
    if (!ckpt.extracted) throw UsageError(path.string() + " does not hold an extracted model");
    // Without --seconds, use the virtual length the run was configured with.
    double length = 10.0;
    if (seconds) {
        length = *seconds;
    } else if (ckpt.meta.is_object() && ckpt.meta.contains("config")) {
        length = ckpt.meta["config"]["regime"].value("virtual_seconds", length);
    }
    const auto csv = report_csv(architecture_report(*ckpt.extracted, length));
    write_file(files.report(), csv);
    out << csv;
    return kExitOk;
}

int cmd_sweep(const RunOptions& opts, const std::vector<std::string>& grid, std::size_t max_cells,
              std::ostream& out) {
    const auto base = load_config(opts);
    if (base.regime.kind != RegimeKind::size_separate) {
        throw UsageError("sweep needs the size_separate regime (set regime.kind=size_separate)");
    }
    std::vector<double> t_cnn, t_trans;
    for (const auto& axis : grid) {
        auto [name, values] = parse_grid_axis(axis);
        if (name == "t_cnn") {
            t_cnn = std::move(values);
        } else if (name == "t_trans") {
            t_trans = std::move(values);
        } else {
            throw UsageError("unknown grid axis '" + name + "' (t_cnn, t_trans)");
        }
    }
    if (t_cnn.empty() || t_trans.empty()) throw UsageError("--grid needs both t_cnn and t_trans");
    const std::size_t cells = t_cnn.size() * t_trans.size();
    if (cells > max_cells) {
        throw UsageError("grid has " + std::to_string(cells) + " cells, above the cap of " +
                         std::to_string(max_cells) + " (raise --max-cells)");
    }

    const fs::path dir = out_dir(opts.out);
    struct Cell {
        std::uint64_t seed;
        double t_cnn, t_trans;
        PipelineResult result;
    };
    std::vector<Cell> rows;
    std::vector<SweepPoint> points;
    for (std::size_t i = 0; i < t_cnn.size(); ++i) {
        for (std::size_t j = 0; j < t_trans.size(); ++j) {
            const std::size_t index = rows.size();
            PruneRunConfig cfg = base;
            cfg.seed = base.seed + index;
            cfg.target = SparsityTarget::pair(t_cnn[i], t_trans[j]);
            cfg.validate();
            auto r = run_pipeline(cfg, dir / ("cell" + std::to_string(index)));
            points.push_back({static_cast<double>(r.extracted_macs), r.final_accuracy});
            rows.push_back({cfg.seed, t_cnn[i], t_trans[j], std::move(r)});
        }
    }
    const auto flags = pareto_flags(points);
    std::ostringstream csv;
    csv << "cell,seed,t_cnn,t_trans,sparsity_cnn,sparsity_trans,constraint_met,macs,params,accuracy,pareto\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& c = rows[k];
        char line[256];
        std::snprintf(line, sizeof line, "%zu,%llu,%.10g,%.10g,%.10g,%.10g,%d,%llu,%llu,%.10g,%d\n", k,
                      static_cast<unsigned long long>(c.seed), c.t_cnn, c.t_trans, c.result.terminal_sparsity_cnn,
                      c.result.terminal_sparsity_trans, c.result.constraint_met ? 1 : 0,
                      static_cast<unsigned long long>(c.result.extracted_macs),
                      static_cast<unsigned long long>(c.result.extracted_params), c.result.final_accuracy,
                      flags[k] ? 1 : 0);
        csv << line;
    }
    write_file(dir / "sweep.csv", csv.str());
    out << csv.str();
    return kExitOk;
}

}  // namespace

std::vector<bool> pareto_flags(const std::vector<SweepPoint>& points) {
    std::vector<bool> flags(points.size(), true);
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = 0; j < points.size() && flags[i]; ++j) {
            const auto& a = points[i];
            const auto& b = points[j];
            const bool no_worse = b.macs <= a.macs && b.metric >= a.metric;
            const bool better = b.macs < a.macs || b.metric > a.metric;
            if (j != i && no_worse && better) flags[i] = false;
        }
    }
    return flags;
}

std::pair<std::string, std::vector<double>> parse_grid_axis(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == text.size()) {
        throw ConfigError("grid", "expected name=v1,v2,... but got '" + text + "'");
    }
    std::vector<double> values;
    std::stringstream rest(text.substr(eq + 1));
    std::string item;
    while (std::getline(rest, item, ',')) {
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("grid", "target " + item + " is outside [0, 1]");
            values.push_back(v);
        } catch (const std::logic_error&) {
            throw ConfigError("grid", "'" + item + "' is not a number");
        }
    }
    return {text.substr(0, eq), values};
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Structured pruning of conv + transformer encoders with Hard Concrete gates", "gatecraft"};
    app.require_subcommand(1);

    std::string arch = "toy";
    double seconds = 10.0;
    std::string csv, profile_out;
    auto* profile = app.add_subcommand("profile", "Exact MAC and parameter profile of an architecture");
    profile->add_option("arch", arch, "Descriptor JSON path, or toy / wav2vec2-base")->capture_default_str();
    profile->add_option("--seconds", seconds, "Virtual input length")->capture_default_str();
    profile->add_option("--csv", csv, "Per-block CSV path (default: <out>/profile.csv)");
    profile->add_option("--out", profile_out, "Output directory");

    RunOptions train_opts, prune_opts, extract_opts, finetune_opts, sweep_opts;
    add_run_options(app.add_subcommand("train", "Dense training stage"), train_opts);
    auto* prune = app.add_subcommand("prune", "Pruning stage, then binarize and extract");
    add_run_options(prune, prune_opts);
    bool from_scratch = false;
    prune->add_flag("--from-scratch", from_scratch, "Run the train stage first instead of loading train.ckpt");
    add_run_options(app.add_subcommand("extract", "Re-extract from prune.ckpt with the configured gate rule"),
                    extract_opts);
    add_run_options(app.add_subcommand("finetune", "Finetune the extracted model"), finetune_opts);

    std::string report_ckpt, report_out;
    std::optional<double> report_seconds;
    auto* report = app.add_subcommand("report", "Per-layer kept units of an extracted model");
    report->add_option("--checkpoint", report_ckpt, "Extracted checkpoint (default: <out>/extracted.ckpt)");
    report->add_option("--seconds", report_seconds, "Virtual input length for MAC shares (default: the run's)");
    report->add_option("--out", report_out, "Output directory");

    auto* sweep = app.add_subcommand("sweep", "Grid over (t_cnn, t_trans) with a Pareto flag per cell");
    add_run_options(sweep, sweep_opts);
    std::vector<std::string> grid;
    std::size_t max_cells = 16;
    sweep->add_option("--grid", grid, "Axis as name=v1,v2 (t_cnn and t_trans)")->required();
    sweep->add_option("--max-cells", max_cells, "Refuse grids larger than this")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*profile) return cmd_profile(arch, seconds, csv, profile_out, out);
        if (app.got_subcommand("train")) return cmd_train(train_opts, out);
        if (*prune) return cmd_prune(prune_opts, from_scratch, out, err);
        if (app.got_subcommand("extract")) return cmd_extract(extract_opts, out);
        if (app.got_subcommand("finetune")) return cmd_finetune(finetune_opts, out);
        if (*report) return cmd_report(report_ckpt, report_seconds, report_out, out);
        if (*sweep) return cmd_sweep(sweep_opts, grid, max_cells, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const MaskError& e) {
        err << "mask error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace gatecraft
