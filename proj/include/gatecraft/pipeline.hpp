#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gatecraft/arch.hpp"
#include "gatecraft/controller.hpp"
#include "gatecraft/extract.hpp"
#include "gatecraft/gates.hpp"
#include "gatecraft/model.hpp"
#include "gatecraft/optim.hpp"
#include "gatecraft/sparsity.hpp"
#include "gatecraft/task.hpp"
#include "json.hpp"

namespace gatecraft {

enum class Stage { train, prune, finetune };

std::string_view to_string(Stage stage);

struct StageConfig {
    std::size_t epochs = 1;
    double lr = 2e-3;
    std::size_t lr_warmup_steps = 0;
};

/// Full experiment specification. Epoch counts are converted to steps with
/// `steps_per_epoch`; the target warmup is given in prune-stage epochs.
struct PruneRunConfig {
    std::uint64_t seed = 0;
    ArchDescriptor arch = toy_descriptor();
    SyntheticTask task;
    /// Toy clips are 0.4 s at 1 kHz, so MACs are counted at that length by default.
    SparsityRegime regime{RegimeKind::mac_overall, 0.4};
    SparsityTarget target = SparsityTarget::single(0.5);
    std::size_t target_warmup_epochs = 10;
    StageConfig train{25, 2e-3, 50};
    StageConfig prune{30, 2e-3, 50};
    StageConfig finetune{10, 5e-4, 20};
    std::size_t steps_per_epoch = 40;
    std::size_t batch_size = 8;
    double gate_lr = 0.05;
    double weight_decay = 0.01;
    std::size_t eval_examples = 512;
    double threshold = 0.5;
    GateRule gate_rule = GateRule::threshold;
    HardConcreteParams hard_concrete;
    double init_log_alpha = 0.0;
    /// Accepted distance between the terminal expected sparsity and the target.
    double sparsity_tolerance = 0.02;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    TargetSchedule schedule() const;
    std::size_t stage_steps(Stage stage) const;
};

nlohmann::json to_json(const PruneRunConfig& config);
/// Missing fields keep their defaults; unknown keys are rejected.
PruneRunConfig config_from_json(const nlohmann::json& doc);
/// Applies "a.b.c=value" to a JSON document; the value is parsed as JSON when
/// possible, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// One row of the metrics CSV.
struct MetricsRow {
    std::size_t step = 0;
    Stage stage = Stage::train;
    double loss = 0.0;
    double accuracy = 0.0;
    double sparsity_overall = 0.0;
    double sparsity_cnn = 0.0;
    double sparsity_trans = 0.0;
    double macs_expected = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double lr = 0.0;
};

/// One row of the controller CSV (prune stage only).
struct ControllerRow {
    std::size_t step = 0;
    SparsityTarget target;
    double sparsity = 0.0;
    double sparsity_cnn = 0.0;
    double sparsity_trans = 0.0;
    /// Per component: (lambda1, lambda2).
    std::vector<std::pair<double, double>> lambdas;
    double task_loss = 0.0;
    double penalty = 0.0;
};

std::string metrics_header();
std::string format_row(const MetricsRow& row);
std::string controller_header(bool separate);
std::string format_row(const ControllerRow& row);

/// Classification accuracy over a fixed evaluation set.
double evaluate(const Network& network, const GateValues* gates, const Batch& eval);
/// The evaluation set of a run (independent of the training streams).
Batch evaluation_set(const PruneRunConfig& config);

/// The model being trained in one stage.
struct StageModel {
    GatedModel* gated = nullptr;      // train, prune
    Network* network = nullptr;       // finetune
    LagrangeState* lagrange = nullptr;  // prune
    /// Dense descriptor the finetuned network was extracted from.
    const ArchDescriptor* original = nullptr;
};

/// Stepwise driver for one stage. Holds the optimizer and random streams so a
/// stage can be checkpointed mid-way and resumed bitwise-identically.
class StageRun {
public:
    StageRun(const PruneRunConfig& config, Stage stage, StageModel model);

    Stage stage() const noexcept { return stage_; }
    std::size_t step_index() const noexcept { return step_; }
    std::size_t total_steps() const noexcept { return total_; }
    bool done() const noexcept { return step_ >= total_; }

    /// One optimizer step. Throws NonFiniteError / NonFiniteGradientError on
    /// NaN or Inf, leaving parameters untouched by the failed step.
    MetricsRow step(ControllerRow* controller_row = nullptr);

    /// Optimizer moments, step counter and random stream states.
    nlohmann::json state_header() const;
    std::vector<double> state_values() const;
    void load_state(const nlohmann::json& header, std::span<const double> values);

private:
    const PruneRunConfig& config_;
    Stage stage_;
    StageModel model_;
    AdamW optimizer_;
    LinearWarmupDecay schedule_;
    Rng data_rng_;
    Rng gate_rng_;
    std::size_t step_ = 0;
    std::size_t total_ = 0;
};

struct StageResult {
    Stage stage = Stage::train;
    std::size_t steps = 0;
    double final_loss = 0.0;
    double eval_accuracy = 0.0;
    double sparsity = 0.0;
    double sparsity_cnn = 0.0;
    double sparsity_trans = 0.0;
    double expected_macs = 0.0;
};

/// Where stage rows go; null members are skipped.
struct MetricsSink {
    std::vector<MetricsRow>* metrics = nullptr;
    std::vector<ControllerRow>* controller = nullptr;
};

/// Runs the remaining steps of `run`, then evaluates.
StageResult run_stage(StageRun& run, const PruneRunConfig& config, StageModel model,
                      const MetricsSink& sink);

/// Everything a checkpoint can hold.
struct Checkpoint {
    std::optional<GatedModel> gated;
    std::optional<ExtractedModel> extracted;
    std::optional<LagrangeState> lagrange;
    /// Stage-run state (optimizer moments, random streams) when saved mid-stage.
    nlohmann::json run_header;
    std::vector<double> run_values;
    /// Free-form metadata (stage name, config).
    nlohmann::json meta;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, version, truncation, or shape mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct PipelineResult {
    double dense_accuracy = 0.0;
    double pruned_accuracy = 0.0;  // gated model, deterministic gates
    double final_accuracy = 0.0;   // extracted and finetuned
    double terminal_sparsity = 0.0;
    double terminal_sparsity_cnn = 0.0;
    double terminal_sparsity_trans = 0.0;
    SparsityTarget target;
    double expected_macs = 0.0;
    std::uint64_t dense_macs = 0;
    std::uint64_t extracted_macs = 0;
    std::uint64_t mac_budget = 0;
    std::uint64_t dense_params = 0;
    std::uint64_t extracted_params = 0;
    bool constraint_met = false;
    std::vector<std::string> warnings;
    std::vector<ReportRow> architecture;
};

/// Paths of the artifacts a run writes under its output directory.
struct RunFiles {
    std::filesystem::path dir;

    std::filesystem::path metrics() const { return dir / "metrics.csv"; }
    std::filesystem::path controller() const { return dir / "controller.csv"; }
    std::filesystem::path train_checkpoint() const { return dir / "train.ckpt"; }
    std::filesystem::path prune_checkpoint() const { return dir / "prune.ckpt"; }
    std::filesystem::path extracted_checkpoint() const { return dir / "extracted.ckpt"; }
    std::filesystem::path finetune_checkpoint() const { return dir / "finetuned.ckpt"; }
    std::filesystem::path report() const { return dir / "architecture.csv"; }
    std::filesystem::path summary() const { return dir / "summary.json"; }
};

/// Dense training from the config seed. Writes metrics and train.ckpt.
GatedModel run_train(const PruneRunConfig& config, const RunFiles& files);
/// Prune `model` (modified in place), binarize and extract. Writes metrics,
/// controller log, prune.ckpt, extracted.ckpt and the architecture report.
ExtractedModel run_prune(const PruneRunConfig& config, GatedModel& model, const RunFiles& files,
                         PipelineResult& result);
/// Finetunes the extracted network in place. Writes metrics and finetuned.ckpt.
double run_finetune(const PruneRunConfig& config, ExtractedModel& model, const RunFiles& files);
/// train -> prune -> extract -> finetune, plus summary.json.
PipelineResult run_pipeline(const PruneRunConfig& config, const std::filesystem::path& out_dir);

nlohmann::json to_json(const PipelineResult& result);

}  // namespace gatecraft
