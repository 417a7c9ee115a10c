#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "gatecraft/cli.hpp"
#include "gatecraft/pipeline.hpp"
#include "support/tempdir.hpp"

using namespace gatecraft;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    args.insert(args.begin(), "gatecraft");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

// A run small enough for unit tests.
fs::path tiny_config(const fs::path& dir) {
    const nlohmann::json doc = {
        {"stages",
         {{"train", {{"epochs", 1}, {"lr_warmup_steps", 1}}},
          {"prune", {{"epochs", 2}, {"lr_warmup_steps", 1}}},
          {"finetune", {{"epochs", 1}, {"lr_warmup_steps", 1}}}}},
        {"schedule", {{"warmup_epochs", 1}}},
        {"steps_per_epoch", 2},
        {"batch_size", 4},
        {"eval_examples", 8}};
    const auto path = dir / "tiny.json";
    std::ofstream(path) << doc.dump(2);
    return path;
}

}  // namespace

TEST_CASE("profile matches the library and writes a CSV") {
    testing::TempDir dir("cli_profile");
    const auto r = cli({"profile", "toy", "--seconds", "0.4", "--out", dir.path().string()});
    REQUIRE(r.code == kExitOk);
    const auto p = exact_profile(toy_descriptor(), 0.4);
    CHECK(r.out.find("total MACs " + std::to_string(p.macs)) != std::string::npos);
    CHECK(r.out.find("total params " + std::to_string(p.params)) != std::string::npos);
    CHECK(slurp(dir.path() / "profile.csv") == profile_csv(p));

    const auto w = cli({"profile", "wav2vec2-base", "--csv", (dir.path() / "w.csv").string()});
    CHECK(w.code == kExitOk);
    CHECK(w.out.find("(74.06 GMAC)") != std::string::npos);
}

TEST_CASE("usage and config errors exit with 2") {
    testing::TempDir dir("cli_errors");
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"bogus"}).code == kExitUsage);
    CHECK(cli({"--help"}).code == kExitOk);
    CHECK(cli({"prune", "--set", "regime=not_a_regime", "--out", dir.path().string()}).code == kExitUsage);

    const auto bad = dir.path() / "bad.json";
    std::ofstream(bad) << "{\n  \"seed\": 1,\n  \"regime\": \n}\n";
    const auto r = cli({"train", bad.string(), "--out", dir.path().string()});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("line 4") != std::string::npos);

    const auto typo = cli({"train", "--set", "stages.train.epohcs=3", "--out", dir.path().string()});
    CHECK(typo.code == kExitUsage);
    CHECK(typo.err.find("stages.train.epohcs") != std::string::npos);

    const auto arch = dir.path() / "arch.json";
    std::ofstream(arch) << R"({"conv_layers": [], "hidden": 4, "transformer_layers": []})";
    CHECK(cli({"profile", arch.string(), "--out", dir.path().string()}).code == kExitUsage);

    CHECK(cli({"prune", "--out", (dir.path() / "empty").string()}).code == kExitUsage);
    CHECK(cli({"finetune", "--out", (dir.path() / "empty").string()}).code == kExitUsage);
}

TEST_CASE("train, prune, extract, finetune, report through the CLI") {
    testing::TempDir dir("cli_stages");
    const auto cfg = tiny_config(dir.path()).string();
    const auto out = (dir.path() / "run").string();
    REQUIRE(cli({"train", cfg, "--out", out}).code == kExitOk);
    CHECK(fs::exists(fs::path(out) / "train.ckpt"));

    // A few steps cannot reach 50% sparsity.
    const auto unmet = cli({"prune", cfg, "--out", out});
    CHECK(unmet.code == kExitConstraint);
    CHECK(unmet.err.find("achieved") != std::string::npos);
    CHECK(fs::exists(fs::path(out) / "extracted.ckpt"));

    // Gates that start nearly always open satisfy a zero target immediately.
    const auto zero = cli({"prune", cfg, "--out", out, "--from-scratch", "--set", "schedule.final_target=0",
                           "--set", "init_log_alpha=6"});
    CHECK_MESSAGE(zero.code == kExitOk, zero.out << zero.err);

    CHECK(cli({"extract", cfg, "--out", out, "--set", "gate_rule=expected_count"}).code == kExitOk);
    CHECK(cli({"finetune", cfg, "--out", out}).code == kExitOk);
    CHECK(fs::exists(fs::path(out) / "finetuned.ckpt"));

    const auto rep = cli({"report", "--out", out});
    REQUIRE(rep.code == kExitOk);
    CHECK(rep.out.rfind("layer_kind,index,kept,original,kept_mac_share\n", 0) == 0);
    CHECK(std::count(rep.out.begin(), rep.out.end(), '\n') == 1 + 3 + 2 * 2 + 1);

    // Stage rows are replaced, not duplicated, when a stage is re-run.
    const auto metrics = slurp(fs::path(out) / "metrics.csv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 2 + 4 + 2);
}

TEST_CASE("GATECRAFT_OUT picks the output directory and seeded runs repeat") {
    testing::TempDir dir("cli_env");
    const auto cfg = tiny_config(dir.path()).string();
    const auto env_dir = dir.path() / "from_env";
    ::setenv("GATECRAFT_OUT", env_dir.c_str(), 1);
    const auto r = cli({"train", cfg, "--seed", "9"});
    ::unsetenv("GATECRAFT_OUT");
    REQUIRE(r.code == kExitOk);
    const auto first = slurp(env_dir / "metrics.csv");
    CHECK(cli({"train", cfg, "--seed", "9", "--out", (dir.path() / "again").string()}).code == kExitOk);
    CHECK(first == slurp(dir.path() / "again" / "metrics.csv"));
    CHECK(slurp(env_dir / "train.ckpt") == slurp(dir.path() / "again" / "train.ckpt"));
}

TEST_CASE("sweep grid handling") {
    testing::TempDir dir("cli_sweep");
    const auto cfg = tiny_config(dir.path()).string();
    const auto out = (dir.path() / "sweep").string();
    CHECK(cli({"sweep", cfg, "--grid", "t_cnn=0.1", "--grid", "t_trans=0.1", "--out", out}).code == kExitUsage);
    const auto big = cli({"sweep", cfg, "--set", "regime=size_separate", "--grid", "t_cnn=0.1,0.2,0.3",
                          "--grid", "t_trans=0.1,0.2", "--max-cells", "4", "--out", out});
    CHECK(big.code == kExitUsage);
    CHECK(big.err.find("cap") != std::string::npos);

    const auto one = cli({"sweep", cfg, "--set", "regime=size_separate", "--grid", "t_cnn=0.1", "--grid",
                          "t_trans=0.2", "--out", out});
    REQUIRE(one.code == kExitOk);
    const auto csv = slurp(fs::path(out) / "sweep.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
    CHECK(csv.substr(csv.size() - 3) == ",1\n");
    CHECK(fs::exists(fs::path(out) / "cell0" / "summary.json"));
}

TEST_CASE("grid axis parsing") {
    const auto [name, values] = parse_grid_axis("t_cnn=0.1,0.25");
    CHECK(name == "t_cnn");
    CHECK(values == std::vector<double>{0.1, 0.25});
    CHECK_THROWS(parse_grid_axis("t_cnn"));
    CHECK_THROWS(parse_grid_axis("t_cnn=0.1,x"));
    CHECK_THROWS(parse_grid_axis("t_cnn=1.5"));
}

TEST_CASE("pareto flags") {
    CHECK(pareto_flags({{10.0, 0.9}}) == std::vector<bool>{true});
    // 2x2 grid where only cell 3 is dominated (more MACs than cell 0, lower accuracy).
    const std::vector<SweepPoint> grid{{100.0, 0.95}, {60.0, 0.90}, {80.0, 0.93}, {120.0, 0.93}};
    CHECK(pareto_flags(grid) == std::vector<bool>{true, true, true, false});
    CHECK(pareto_flags({{100.0, 0.95}, {60.0, 0.90}, {80.0, 0.92}, {120.0, 0.96}}) ==
          std::vector<bool>{true, true, true, true});

    // Brute force: sorted by MACs, the frontier's metric never increases as MACs fall.
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<SweepPoint> pts;
        for (int i = 0; i < 9; ++i) pts.push_back({std::floor(rng.uniform() * 10.0), std::floor(rng.uniform() * 10.0)});
        const auto flags = pareto_flags(pts);
        std::vector<SweepPoint> front;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (flags[i]) front.push_back(pts[i]);
            bool dominated = false;
            for (const auto& q : pts) {
                dominated |= q.macs <= pts[i].macs && q.metric >= pts[i].metric &&
                             (q.macs < pts[i].macs || q.metric > pts[i].metric);
            }
            CHECK(flags[i] == !dominated);
        }
        std::sort(front.begin(), front.end(), [](auto a, auto b) { return a.macs < b.macs; });
        for (std::size_t i = 1; i < front.size(); ++i) CHECK(front[i].metric >= front[i - 1].metric);
    }
}
