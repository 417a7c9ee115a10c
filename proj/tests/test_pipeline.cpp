#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "gatecraft/errors.hpp"
#include "gatecraft/pipeline.hpp"
#include "support/tempdir.hpp"

using namespace gatecraft;
namespace fs = std::filesystem;

namespace {

PruneRunConfig tiny_config() {
    PruneRunConfig c;
    c.train = {1, 2e-3, 1};
    c.prune = {2, 2e-3, 1};
    c.finetune = {1, 5e-4, 1};
    c.target_warmup_epochs = 1;
    c.steps_per_epoch = 3;
    c.batch_size = 4;
    c.eval_examples = 8;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

bool same_values(const Network& a, const Network& b) {
    const auto pa = a.named_parameters();
    const auto pb = b.named_parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto x = pa[i].tensor.values();
        const auto y = pb[i].tensor.values();
        if (pa[i].name != pb[i].name || !std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config JSON round trip and strictness") {
    auto c = tiny_config();
    c.seed = 17;
    c.target = SparsityTarget::single(0.3);
    const auto back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));

    CHECK_THROWS_AS(config_from_json({{"sed", 1}}), ConfigError);
    try {
        config_from_json({{"stages", {{"prune", {{"epochz", 3}}}}}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "stages.prune.epochz");
    }
    try {
        config_from_json({{"gate_lr", 0.03}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "gate_lr");
    }
    CHECK_THROWS_AS(config_from_json({{"regime", "size_sepratate"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json({{"regime", "size_overall"}, {"schedule", {{"final_target", {{"cnn", 0.1}, {"trans", 0.2}}}}}}),
                    ConfigError);

    const auto sep = config_from_json({{"regime", "size_separate"}, {"schedule", {{"final_target", 0.4}}}});
    CHECK(sep.target == SparsityTarget::pair(0.4, 0.4));
    CHECK(config_from_json({{"arch", "wav2vec2-base"}}).arch == wav2vec2_base_descriptor());
}

TEST_CASE("dotted overrides") {
    nlohmann::json doc = {{"schedule", {{"final_target", 0.5}}}};
    apply_override(doc, "schedule.final_target=0.3");
    apply_override(doc, "regime.kind=size_overall");
    apply_override(doc, "stages.train.epochs=7");
    CHECK(doc["schedule"]["final_target"] == 0.3);
    CHECK(doc["regime"]["kind"] == "size_overall");
    const auto c = config_from_json(doc);
    CHECK(c.train.epochs == 7);
    CHECK(c.regime.kind == RegimeKind::size_overall);
    CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "schedule.final_target.x=1"), ConfigError);
}

TEST_CASE("metrics CSV schema") {
    CHECK(metrics_header() ==
          "step,stage,loss,accuracy,sparsity_overall,sparsity_cnn,sparsity_trans,macs_expected,lambda1,lambda2,lr\n");
    MetricsRow r;
    r.step = 3;
    r.stage = Stage::prune;
    r.loss = 0.5;
    CHECK(format_row(r) == "3,prune,0.5,0,0,0,0,0,0,0,0\n");
}

TEST_CASE("a zero-epoch train stage leaves the model unchanged") {
    testing::TempDir dir("zero_epoch");
    auto c = tiny_config();
    c.train.epochs = 0;
    const auto model = run_train(c, RunFiles{dir.path()});
    const GatedModel fresh(c.arch, c.task.num_classes, c.seed);
    CHECK(same_values(model.network(), fresh.network()));
    const auto loaded = load_checkpoint(RunFiles{dir.path()}.train_checkpoint());
    REQUIRE(loaded.gated);
    CHECK(same_values(loaded.gated->network(), fresh.network()));
    CHECK(slurp(RunFiles{dir.path()}.metrics()) == metrics_header());
}

TEST_CASE("checkpoint round trip resumes bitwise-identically") {
    testing::TempDir dir("resume");
    const auto c = tiny_config();
    GatedModel model(c.arch, c.task.num_classes, c.seed);
    LagrangeState lagrange;
    StageModel sm{&model, nullptr, &lagrange, nullptr};
    StageRun run(c, Stage::prune, sm);
    run.step();
    run.step();

    Checkpoint ckpt;
    ckpt.gated.emplace(model.clone());
    ckpt.lagrange.emplace(lagrange);
    ckpt.run_header = run.state_header();
    ckpt.run_values = run.state_values();
    const auto path = dir.path() / "mid.ckpt";
    save_checkpoint(path, ckpt);
    CHECK(fs::file_size(path) < 10u * 1024 * 1024);

    ControllerRow ca;
    const auto a = run.step(&ca);

    auto loaded = load_checkpoint(path);
    REQUIRE(loaded.gated);
    REQUIRE(loaded.lagrange);
    StageModel sm2{&*loaded.gated, nullptr, &*loaded.lagrange, nullptr};
    StageRun resumed(c, Stage::prune, sm2);
    resumed.load_state(loaded.run_header, loaded.run_values);
    CHECK(resumed.step_index() == 2);
    ControllerRow cb;
    const auto b = resumed.step(&cb);

    CHECK(format_row(a) == format_row(b));
    CHECK(format_row(ca) == format_row(cb));
    CHECK(same_values(model.network(), loaded.gated->network()));
    const auto ga = model.gate_groups();
    const auto gb = loaded.gated->gate_groups();
    for (std::size_t g = 0; g < ga.size(); ++g) {
        const auto x = ga[g]->log_alpha().values();
        const auto y = gb[g]->log_alpha().values();
        CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    }
}

TEST_CASE("damaged checkpoints are rejected") {
    testing::TempDir dir("damaged");
    const auto c = tiny_config();
    Checkpoint ckpt;
    ckpt.gated.emplace(c.arch, c.task.num_classes, c.seed);
    const auto path = dir.path() / "m.ckpt";
    save_checkpoint(path, ckpt);
    const std::string good = slurp(path);
    CHECK_NOTHROW(load_checkpoint(path));

    auto write = [&](const std::string& bytes) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bytes;
    };
    std::string bad = good;
    bad[0] = 'X';
    write(bad);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    write(good.substr(0, good.size() - 9));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    write(good + "x");
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), CheckpointError);
}

TEST_CASE("extracted checkpoints keep their mask and original shape") {
    testing::TempDir dir("extracted");
    const auto c = tiny_config();
    GatedModel model(c.arch, c.task.num_classes, c.seed);
    auto mask = PruneMask::all_ones(c.arch);
    mask.heads[0][1] = false;
    mask.ffn[1][5] = false;
    mask.hidden[3] = false;
    const auto ex = extract(model, mask);
    Checkpoint ckpt;
    ckpt.extracted.emplace(ex);
    save_checkpoint(dir.path() / "e.ckpt", ckpt);
    const auto back = load_checkpoint(dir.path() / "e.ckpt");
    REQUIRE(back.extracted);
    CHECK(back.extracted->mask == mask);
    CHECK(back.extracted->original == c.arch);
    CHECK(same_values(back.extracted->network, ex.network));
}

TEST_CASE("non-finite weights abort the step") {
    const auto c = tiny_config();
    GatedModel model(c.arch, c.task.num_classes, c.seed);
    model.network().weights().layers[0].w1.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
    StageModel sm{&model, nullptr, nullptr, nullptr};
    StageRun run(c, Stage::train, sm);
    CHECK_THROWS_AS(run.step(), NonFiniteError);
}

TEST_CASE("identical seeded runs write identical CSVs") {
    testing::TempDir a("repro_a");
    testing::TempDir b("repro_b");
    const auto c = tiny_config();
    const auto ra = run_pipeline(c, a.path());
    const auto rb = run_pipeline(c, b.path());
    const RunFiles fa{a.path()}, fb{b.path()};
    CHECK(slurp(fa.metrics()) == slurp(fb.metrics()));
    CHECK(slurp(fa.controller()) == slurp(fb.controller()));
    CHECK(slurp(fa.summary()) == slurp(fb.summary()));
    CHECK(slurp(fa.report()) == slurp(fb.report()));
    for (const auto& p : {fa.train_checkpoint(), fa.prune_checkpoint(), fa.extracted_checkpoint(),
                          fa.finetune_checkpoint()}) {
        CHECK(fs::exists(p));
    }
    // Header plus one row per step of each stage.
    const auto metrics = slurp(fa.metrics());
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 3 + 6 + 3);
    CHECK(ra.dense_macs == exact_profile(c.arch, c.regime.virtual_seconds).macs);
}

TEST_CASE("single-sample losses average like independent draws") {
    const auto c = tiny_config();
    GatedModel model(c.arch, c.task.num_classes, c.seed);
    for (auto* g : model.gate_groups()) {
        for (double& v : g->log_alpha().mutable_values()) v = -0.5;
    }
    Rng data(1);
    const auto batch = generate_batch(c.task, 8, data);
    ad::NoGradGuard guard;
    auto draw = [&](Rng& rng) {
        std::vector<double> v;
        for (int i = 0; i < 64; ++i) {
            const auto gates = model.sample_gates(rng);
            v.push_back(cross_entropy(model.network().classify(model.network().encode(batch.inputs, &gates)),
                                      batch.labels)
                            .item());
        }
        double mean = 0.0, var = 0.0;
        for (double x : v) mean += x / 64.0;
        for (double x : v) var += (x - mean) * (x - mean) / 63.0;
        return std::pair{mean, var};
    };
    Rng r1(10), r2(11);
    const auto [m1, v1] = draw(r1);
    const auto [m2, v2] = draw(r2);
    CHECK(v1 > 0.0);
    // Two 64-sample means differ by about sqrt(2 var / 64); allow 4 standard errors.
    CHECK(std::abs(m1 - m2) < 4.0 * std::sqrt((v1 + v2) / 64.0));
}
