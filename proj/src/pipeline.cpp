#include "gatecraft/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "gatecraft/errors.hpp"

namespace gatecraft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamData = 10;
constexpr std::uint64_t kStreamGates = 20;
constexpr std::uint64_t kStreamEval = 30;

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// Rejects keys outside `allowed` so typos in configs surface as errors.
void check_keys(const json& doc, const std::string& where, std::initializer_list<const char*> allowed) {
    const std::set<std::string> keys(allowed.begin(), allowed.end());
    for (const auto& [key, value] : doc.items()) {
        if (!keys.contains(key)) {
            throw ConfigError(where.empty() ? key : where + "." + key, "unknown field");
        }
    }
}

template <class T>
void read(const json& doc, const char* key, T& out, const std::string& where) {
    const auto it = doc.find(key);
    if (it == doc.end()) return;
    const std::string path = where.empty() ? key : where + "." + key;
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path, "wrong type (" + std::string(it->type_name()) + ")");
    }
}

StageConfig stage_from_json(const json& doc, StageConfig out, const std::string& where) {
    if (!doc.is_object()) throw ConfigError(where, "expected an object");
    check_keys(doc, where, {"epochs", "lr", "lr_warmup_steps"});
    read(doc, "epochs", out.epochs, where);
    read(doc, "lr", out.lr, where);
    read(doc, "lr_warmup_steps", out.lr_warmup_steps, where);
    return out;
}

json stage_json(const StageConfig& s) {
    return {{"epochs", s.epochs}, {"lr", s.lr}, {"lr_warmup_steps", s.lr_warmup_steps}};
}

std::vector<NamedTensor> network_params(const StageModel& m) {
    return m.gated ? m.gated->network().named_parameters() : m.network->named_parameters();
}

const Network& network_of(const StageModel& m) { return m.gated ? m.gated->network() : *m.network; }

void check_finite_loss(const ad::Tensor& loss, Stage stage, std::size_t step) {
    if (!std::isfinite(loss.item())) throw NonFiniteError(std::string(to_string(stage)) + " loss at step", step);
}

// Share of the regime's measure removed, for a concrete (extracted) architecture.
struct ExactSparsity {
    double overall = 0.0, cnn = 0.0, trans = 0.0;
    double macs = 0.0;
};

ExactSparsity exact_sparsity(const ArchDescriptor& original, const ArchDescriptor& now,
                             const SparsityRegime& regime) {
    const auto a = exact_profile(original, regime.virtual_seconds);
    const auto b = exact_profile(now, regime.virtual_seconds);
    const bool by_macs = regime.kind == RegimeKind::mac_overall;
    const auto frac = [](std::uint64_t kept, std::uint64_t total) {
        return total == 0 ? 0.0 : 1.0 - static_cast<double>(kept) / static_cast<double>(total);
    };
    ExactSparsity s;
    if (by_macs) {
        s.overall = frac(b.macs, a.macs);
        s.cnn = frac(b.cnn_macs, a.cnn_macs);
        s.trans = frac(b.macs - b.cnn_macs, a.macs - a.cnn_macs);
    } else {
        s.overall = frac(b.params, a.params);
        s.cnn = frac(b.cnn_params, a.cnn_params);
        s.trans = frac(b.params - b.cnn_params, a.params - a.cnn_params);
    }
    s.macs = static_cast<double>(b.macs);
    return s;
}

void write_rows(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << header;
    for (const auto& r : rows) out << r;
}

// Rows of stages before `stage` are kept, so re-running a stage replaces its
// own rows instead of appending duplicates.
void write_metrics(const RunFiles& files, const std::vector<MetricsRow>& rows, Stage stage) {
    std::vector<std::string> lines;
    if (stage != Stage::train) {
        std::ifstream in(files.metrics());
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            const auto a = line.find(',');
            const auto b = line.find(',', a + 1);
            if (a == std::string::npos || b == std::string::npos) continue;
            const auto name = std::string_view(line).substr(a + 1, b - a - 1);
            const bool earlier = name == "train" || (name == "prune" && stage == Stage::finetune);
            if (earlier) lines.push_back(line + "\n");
        }
    }
    for (const auto& r : rows) lines.push_back(format_row(r));
    write_rows(files.metrics(), metrics_header(), lines);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// Checkpoint layout: magic, u32 version, u64 header length, JSON header,
// u64 value count, raw little-endian doubles.
constexpr char kMagic[8] = {'G', 'A', 'T', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void append_tensor(json& list, std::vector<double>& data, const std::string& name, const ad::Tensor& t) {
    list.push_back({{"name", name}, {"shape", t.shape()}});
    data.insert(data.end(), t.values().begin(), t.values().end());
}

json hard_concrete_json(const HardConcreteParams& p) {
    return {{"beta", p.beta}, {"stretch_lo", p.stretch_lo}, {"stretch_hi", p.stretch_hi}};
}

HardConcreteParams hard_concrete_from(const json& doc, HardConcreteParams p, const std::string& where) {
    if (!doc.is_object()) throw ConfigError(where, "expected an object");
    check_keys(doc, where, {"beta", "stretch_lo", "stretch_hi"});
    read(doc, "beta", p.beta, where);
    read(doc, "stretch_lo", p.stretch_lo, where);
    read(doc, "stretch_hi", p.stretch_hi, where);
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where, e.what());
    }
    return p;
}

// Reads tensors by name into the parameters of `targets`, checking shapes.
class TensorReader {
public:
    TensorReader(const json& list, std::span<const double> data) : data_(data) {
        std::size_t at = 0;
        for (const auto& e : list) {
            const auto shape = e.at("shape").get<ad::Shape>();
            const std::size_t n = ad::numel(shape);
            entries_.push_back({e.at("name").get<std::string>(), shape, at});
            at += n;
        }
        if (at > data_.size()) throw CheckpointError("checkpoint data is truncated");
        end_ = at;
    }

    void fill(const std::string& name, ad::Tensor& t) const {
        for (const auto& e : entries_) {
            if (e.name != name) continue;
            if (e.shape != t.shape()) {
                throw CheckpointError("tensor " + name + " has shape " + ad::shape_string(e.shape) +
                                      ", expected " + ad::shape_string(t.shape()));
            }
            auto dst = t.mutable_values();
            std::copy_n(data_.begin() + e.offset, dst.size(), dst.begin());
            return;
        }
        throw CheckpointError("tensor " + name + " missing from checkpoint");
    }

    std::size_t end() const noexcept { return end_; }

private:
    struct Entry {
        std::string name;
        ad::Shape shape;
        std::size_t offset;
    };
    std::span<const double> data_;
    std::vector<Entry> entries_;
    std::size_t end_ = 0;
};

Network read_network(const ArchDescriptor& arch, std::size_t classes, const TensorReader& reader) {
    Rng scratch(0);
    Network net(arch, classes, scratch);
    for (auto& p : net.named_parameters()) reader.fill(p.name, p.tensor);
    return net;
}

}  // namespace

std::string_view to_string(Stage stage) {
    switch (stage) {
        case Stage::train: return "train";
        case Stage::prune: return "prune";
        case Stage::finetune: return "finetune";
    }
    return "unknown";
}

void PruneRunConfig::validate() const {
    arch.validate();
    task.validate();
    regime.validate();
    if (regime.separate() != target.separate()) {
        throw ConfigError("schedule.final_target", regime.separate()
                                                       ? "size_separate needs {\"cnn\", \"trans\"} targets"
                                                       : "this regime takes a single target");
    }
    schedule().validate();
    for (const auto& [name, s] : {std::pair{"stages.train", train}, std::pair{"stages.prune", prune},
                                  std::pair{"stages.finetune", finetune}}) {
        if (!(s.lr > 0.0) || !std::isfinite(s.lr)) throw ConfigError(std::string(name) + ".lr", "must be positive");
    }
    if (prune.epochs == 0) throw ConfigError("stages.prune.epochs", "must be positive");
    if (target_warmup_epochs == 0 || target_warmup_epochs > prune.epochs) {
        throw ConfigError("schedule.warmup_epochs", "must lie in [1, prune epochs]");
    }
    if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch", "must be positive");
    if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
    if (gate_lr != 0.02 && gate_lr != 0.05) throw ConfigError("gate_lr", "must be 0.02 or 0.05");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be non-negative");
    if (eval_examples == 0) throw ConfigError("eval_examples", "must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold", "must lie in (0, 1)");
    if (!(sparsity_tolerance >= 0.0)) throw ConfigError("sparsity_tolerance", "must be non-negative");
    if (task.seq_len < arch.conv_layers.front().kernel || frame_count(arch, task.seq_len) == 0) {
        throw ConfigError("task.seq_len", "too short for the conv stack");
    }
    try {
        hard_concrete.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("hard_concrete", e.what());
    }
}

TargetSchedule PruneRunConfig::schedule() const {
    return {target, target_warmup_epochs * steps_per_epoch, prune.epochs * steps_per_epoch};
}

std::size_t PruneRunConfig::stage_steps(Stage stage) const {
    switch (stage) {
        case Stage::train: return train.epochs * steps_per_epoch;
        case Stage::prune: return prune.epochs * steps_per_epoch;
        case Stage::finetune: return finetune.epochs * steps_per_epoch;
    }
    return 0;
}

json to_json(const PruneRunConfig& c) {
    json target = c.target.separate() ? json{{"cnn", c.target.value}, {"trans", *c.target.transformer}}
                                      : json(c.target.value);
    return {{"seed", c.seed},
            {"arch", to_json(c.arch)},
            {"task", to_json(c.task)},
            {"regime", {{"kind", to_string(c.regime.kind)}, {"virtual_seconds", c.regime.virtual_seconds}}},
            {"schedule", {{"final_target", target}, {"warmup_epochs", c.target_warmup_epochs}}},
            {"stages",
             {{"train", stage_json(c.train)}, {"prune", stage_json(c.prune)}, {"finetune", stage_json(c.finetune)}}},
            {"steps_per_epoch", c.steps_per_epoch},
            {"batch_size", c.batch_size},
            {"gate_lr", c.gate_lr},
            {"weight_decay", c.weight_decay},
            {"eval_examples", c.eval_examples},
            {"threshold", c.threshold},
            {"gate_rule", to_string(c.gate_rule)},
            {"hard_concrete", hard_concrete_json(c.hard_concrete)},
            {"init_log_alpha", c.init_log_alpha},
            {"sparsity_tolerance", c.sparsity_tolerance}};
}

PruneRunConfig config_from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("", "run config must be a JSON object");
    check_keys(doc, "", {"seed", "arch", "task", "regime", "schedule", "stages", "steps_per_epoch",
                         "batch_size", "gate_lr", "weight_decay", "eval_examples", "threshold",
                         "gate_rule", "hard_concrete", "init_log_alpha", "sparsity_tolerance"});
    PruneRunConfig c;
    read(doc, "seed", c.seed, "");
    if (const auto it = doc.find("arch"); it != doc.end()) {
        if (it->is_string()) {
            const auto name = it->get<std::string>();
            if (name == "toy") {
                c.arch = toy_descriptor();
            } else if (name == "wav2vec2-base") {
                c.arch = wav2vec2_base_descriptor();
            } else {
                throw ConfigError("arch", "unknown builtin '" + name + "' (toy, wav2vec2-base)");
            }
        } else {
            try {
                c.arch = arch_from_json(*it);
            } catch (const ConfigError& e) {
                throw ConfigError(e.field().empty() ? "arch" : "arch." + e.field(), e.what());
            }
        }
    }
    if (const auto it = doc.find("task"); it != doc.end()) c.task = task_from_json(*it, c.task);
    if (const auto it = doc.find("regime"); it != doc.end()) {
        if (it->is_string()) {
            c.regime.kind = regime_from_string(it->get<std::string>());
        } else if (it->is_object()) {
            check_keys(*it, "regime", {"kind", "virtual_seconds"});
            std::string kind(to_string(c.regime.kind));
            read(*it, "kind", kind, "regime");
            c.regime.kind = regime_from_string(kind);
            read(*it, "virtual_seconds", c.regime.virtual_seconds, "regime");
        } else {
            throw ConfigError("regime", "expected a name or an object");
        }
    }
    const bool separate = c.regime.separate();
    c.target = separate ? SparsityTarget::pair(0.5, 0.5) : SparsityTarget::single(0.5);
    if (const auto it = doc.find("schedule"); it != doc.end()) {
        if (!it->is_object()) throw ConfigError("schedule", "expected an object");
        check_keys(*it, "schedule", {"final_target", "warmup_epochs"});
        if (const auto t = it->find("final_target"); t != it->end()) {
            if (t->is_number()) {
                c.target = SparsityTarget::single(t->get<double>());
            } else if (t->is_object()) {
                check_keys(*t, "schedule.final_target", {"cnn", "trans"});
                if (!t->contains("cnn") || !t->contains("trans")) {
                    throw ConfigError("schedule.final_target", "needs both cnn and trans");
                }
                double cnn = 0.0, trans = 0.0;
                read(*t, "cnn", cnn, "schedule.final_target");
                read(*t, "trans", trans, "schedule.final_target");
                c.target = SparsityTarget::pair(cnn, trans);
            } else {
                throw ConfigError("schedule.final_target", "expected a number or {cnn, trans}");
            }
        }
        read(*it, "warmup_epochs", c.target_warmup_epochs, "schedule");
    }
    // A single number for size_separate means the same target for both parts.
    if (separate && !c.target.separate()) c.target = SparsityTarget::pair(c.target.value, c.target.value);
    if (const auto it = doc.find("stages"); it != doc.end()) {
        if (!it->is_object()) throw ConfigError("stages", "expected an object");
        check_keys(*it, "stages", {"train", "prune", "finetune"});
        if (it->contains("train")) c.train = stage_from_json(it->at("train"), c.train, "stages.train");
        if (it->contains("prune")) c.prune = stage_from_json(it->at("prune"), c.prune, "stages.prune");
        if (it->contains("finetune")) {
            c.finetune = stage_from_json(it->at("finetune"), c.finetune, "stages.finetune");
        }
    }
    read(doc, "steps_per_epoch", c.steps_per_epoch, "");
    read(doc, "batch_size", c.batch_size, "");
    read(doc, "gate_lr", c.gate_lr, "");
    read(doc, "weight_decay", c.weight_decay, "");
    read(doc, "eval_examples", c.eval_examples, "");
    read(doc, "threshold", c.threshold, "");
    if (const auto it = doc.find("gate_rule"); it != doc.end()) {
        try {
            c.gate_rule = gate_rule_from_string(it->get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError("gate_rule", e.what());
        }
    }
    if (const auto it = doc.find("hard_concrete"); it != doc.end()) {
        c.hard_concrete = hard_concrete_from(*it, c.hard_concrete, "hard_concrete");
    }
    read(doc, "init_log_alpha", c.init_log_alpha, "");
    read(doc, "sparsity_tolerance", c.sparsity_tolerance, "");
    c.validate();
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError(assignment, "override must look like key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) throw ConfigError(path, "empty path segment");
        if (!node->is_object()) {
            if (!node->is_null()) throw ConfigError(path, "cannot descend into a non-object");
            *node = json::object();
        }
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

std::string metrics_header() {
    return "step,stage,loss,accuracy,sparsity_overall,sparsity_cnn,sparsity_trans,macs_expected,"
           "lambda1,lambda2,lr\n";
}

std::string format_row(const MetricsRow& r) {
    std::ostringstream o;
    o << r.step << ',' << to_string(r.stage) << ',' << num(r.loss) << ',' << num(r.accuracy) << ','
      << num(r.sparsity_overall) << ',' << num(r.sparsity_cnn) << ',' << num(r.sparsity_trans) << ','
      << num(r.macs_expected) << ',' << num(r.lambda1) << ',' << num(r.lambda2) << ',' << num(r.lr)
      << '\n';
    return o.str();
}

std::string controller_header(bool separate) {
    std::string h = "step,target,sparsity,sparsity_cnn,sparsity_trans,lambda1,lambda2,task_loss,penalty";
    if (separate) h += ",target_trans,lambda1_trans,lambda2_trans";
    return h + "\n";
}

std::string format_row(const ControllerRow& r) {
    std::ostringstream o;
    o << r.step << ',' << num(r.target.value) << ',' << num(r.sparsity) << ',' << num(r.sparsity_cnn)
      << ',' << num(r.sparsity_trans) << ',' << num(r.lambdas.at(0).first) << ','
      << num(r.lambdas.at(0).second) << ',' << num(r.task_loss) << ',' << num(r.penalty);
    if (r.target.separate()) {
        o << ',' << num(*r.target.transformer) << ',' << num(r.lambdas.at(1).first) << ','
          << num(r.lambdas.at(1).second);
    }
    o << '\n';
    return o.str();
}

Batch evaluation_set(const PruneRunConfig& config) {
    Rng rng = Rng::derive(config.seed, kStreamEval);
    return generate_batch(config.task, config.eval_examples, rng);
}

double evaluate(const Network& network, const GateValues* gates, const Batch& eval) {
    ad::NoGradGuard guard;
    const std::size_t n = eval.labels.size();
    const std::size_t len = eval.inputs.dim(1);
    const std::size_t chunk = 64;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t b = std::min(chunk, n - start);
        const auto values = eval.inputs.values().subspan(start * len, b * len);
        const auto x = ad::Tensor::constant({b, len}, {values.begin(), values.end()});
        const std::span<const std::size_t> labels(eval.labels.data() + start, b);
        const auto logits = network.classify(network.encode(x, gates));
        correct += static_cast<std::size_t>(std::llround(accuracy(logits, labels) * static_cast<double>(b)));
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

StageRun::StageRun(const PruneRunConfig& config, Stage stage, StageModel model)
    : config_(config),
      stage_(stage),
      model_(model),
      data_rng_(Rng::derive(config.seed, kStreamData + static_cast<std::uint64_t>(stage))),
      gate_rng_(Rng::derive(config.seed, kStreamGates + static_cast<std::uint64_t>(stage))) {
    if (stage == Stage::finetune ? !model.network : !model.gated) {
        throw std::invalid_argument("StageRun: stage " + std::string(to_string(stage)) +
                                    " needs " + (stage == Stage::finetune ? "an extracted network" : "a gated model"));
    }
    if (stage == Stage::prune && !model.lagrange) {
        throw std::invalid_argument("StageRun: the prune stage needs a controller");
    }
    total_ = config.stage_steps(stage);
    const StageConfig& sc = stage == Stage::train ? config.train
                            : stage == Stage::prune ? config.prune
                                                    : config.finetune;
    schedule_ = {sc.lr, sc.lr_warmup_steps, total_};

    std::vector<ad::Tensor> decay, no_decay;
    for (const auto& p : network_params(model_)) (p.decay ? decay : no_decay).push_back(p.tensor);
    optimizer_.add_group("weights", decay, config.weight_decay);
    optimizer_.add_group("norms_biases", no_decay, 0.0);
    if (stage == Stage::prune) {
        std::vector<ad::Tensor> gates;
        for (auto* g : model_.gated->gate_groups()) gates.push_back(g->log_alpha());
        optimizer_.add_group("gates", gates, 0.0, config.gate_lr);
    }
}

MetricsRow StageRun::step(ControllerRow* controller_row) {
    if (done()) throw std::logic_error("StageRun::step past the end of the stage");
    const Network& net = network_of(model_);
    const Batch batch = generate_batch(config_.task, config_.batch_size, data_rng_);
    const double lr = schedule_.at(step_);

    MetricsRow row;
    row.step = step_;
    row.stage = stage_;
    row.lr = lr;

    if (stage_ == Stage::prune) {
        GatedModel& model = *model_.gated;
        LagrangeState& lagrange = *model_.lagrange;
        const auto gates = model.sample_gates(gate_rng_);
        const auto logits = net.classify(net.encode(batch.inputs, &gates));
        const auto task_loss = cross_entropy(logits, batch.labels);
        check_finite_loss(task_loss, stage_, step_);
        const auto report = expected_sparsity(model, config_.regime);
        const auto target = current_target(config_.schedule(), step_);
        const auto pen = penalty(lagrange, report, target, config_.regime);
        ad::backward(task_loss + pen);

        row.loss = task_loss.item();
        row.accuracy = accuracy(logits, batch.labels);
        row.sparsity_overall = report.overall.item();
        row.sparsity_cnn = report.cnn.item();
        row.sparsity_trans = report.transformer.item();
        row.macs_expected = report.expected_macs.item();
        row.lambda1 = lagrange.lambda1().item();
        row.lambda2 = lagrange.lambda2().item();
        if (controller_row) {
            controller_row->step = step_;
            controller_row->target = target;
            controller_row->sparsity = row.sparsity_overall;
            controller_row->sparsity_cnn = row.sparsity_cnn;
            controller_row->sparsity_trans = row.sparsity_trans;
            controller_row->lambdas.clear();
            for (std::size_t c = 0; c < lagrange.components(); ++c) {
                controller_row->lambdas.emplace_back(lagrange.lambda1(c).item(), lagrange.lambda2(c).item());
            }
            controller_row->task_loss = row.loss;
            controller_row->penalty = pen.item();
        }
        adversarial_step(lagrange, optimizer_, lr, config_.gate_lr);
    } else {
        const auto logits = net.classify(net.encode(batch.inputs));
        const auto loss = cross_entropy(logits, batch.labels);
        check_finite_loss(loss, stage_, step_);
        ad::backward(loss);
        row.loss = loss.item();
        row.accuracy = accuracy(logits, batch.labels);
        if (stage_ == Stage::finetune && model_.original) {
            const auto s = exact_sparsity(*model_.original, net.descriptor(), config_.regime);
            row.sparsity_overall = s.overall;
            row.sparsity_cnn = s.cnn;
            row.sparsity_trans = s.trans;
            row.macs_expected = s.macs;
        } else {
            row.macs_expected =
                static_cast<double>(exact_profile(net.descriptor(), config_.regime.virtual_seconds).macs);
        }
        // No multipliers outside pruning; reuse the finite-gradient guard with an empty state.
        LagrangeState none;
        adversarial_step(none, optimizer_, lr, 0.0);
    }
    ++step_;
    return row;
}

json StageRun::state_header() const {
    return {{"stage", to_string(stage_)},
            {"step", step_},
            {"optimizer", optimizer_.state_header()},
            {"data_rng", data_rng_.state()},
            {"gate_rng", gate_rng_.state()}};
}

std::vector<double> StageRun::state_values() const { return optimizer_.state_values(); }

void StageRun::load_state(const json& header, std::span<const double> values) {
    try {
        if (header.at("stage").get<std::string>() != to_string(stage_)) {
            throw CheckpointError("checkpoint was saved in stage " + header.at("stage").get<std::string>());
        }
        const auto step = header.at("step").get<std::size_t>();
        if (step > total_) throw CheckpointError("checkpoint step is past the end of the stage");
        optimizer_.load_state(header.at("optimizer"), values);
        data_rng_.set_state(header.at("data_rng").get<std::string>());
        gate_rng_.set_state(header.at("gate_rng").get<std::string>());
        step_ = step;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed stage state: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(e.what());
    }
}

StageResult run_stage(StageRun& run, const PruneRunConfig& config, StageModel model,
                      const MetricsSink& sink) {
    StageResult result;
    result.stage = run.stage();
    while (!run.done()) {
        ControllerRow crow;
        const auto row = run.step(sink.controller ? &crow : nullptr);
        if (sink.metrics) sink.metrics->push_back(row);
        if (sink.controller && run.stage() == Stage::prune) sink.controller->push_back(crow);
        result.final_loss = row.loss;
        ++result.steps;
    }
    const Batch eval = evaluation_set(config);
    if (run.stage() == Stage::prune) {
        const auto report = expected_sparsity(*model.gated, config.regime);
        result.sparsity = report.overall.item();
        result.sparsity_cnn = report.cnn.item();
        result.sparsity_trans = report.transformer.item();
        result.expected_macs = report.expected_macs.item();
        const auto mask = binarize(*model.gated, config.threshold, config.gate_rule);
        const auto gates = mask.as_gates();
        result.eval_accuracy = evaluate(model.gated->network(), &gates, eval);
    } else {
        result.eval_accuracy = evaluate(network_of(model), nullptr, eval);
    }
    return result;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    if (ckpt.gated.has_value() == ckpt.extracted.has_value()) {
        throw CheckpointError("a checkpoint holds exactly one of a gated or an extracted model");
    }
    json header;
    json tensors = json::array();
    std::vector<double> data;
    if (ckpt.gated) {
        const auto& m = *ckpt.gated;
        header["kind"] = "gated";
        header["pruned"] = false;
        header["arch"] = to_json(m.descriptor());
        header["classes"] = m.network().num_classes();
        header["hard_concrete"] = hard_concrete_json(m.hard_concrete());
        for (const auto& p : m.network().named_parameters()) append_tensor(tensors, data, p.name, p.tensor);
        for (const auto* g : m.gate_groups()) append_tensor(tensors, data, "gate." + g->name(), g->log_alpha());
    } else {
        const auto& e = *ckpt.extracted;
        header["kind"] = "extracted";
        header["pruned"] = true;
        header["arch"] = to_json(e.descriptor());
        header["classes"] = e.network.num_classes();
        header["original_arch"] = to_json(e.original);
        header["mask"] = to_json(e.mask);
        for (const auto& p : e.network.named_parameters()) append_tensor(tensors, data, p.name, p.tensor);
    }
    header["tensors"] = tensors;
    header["lagrange"] = ckpt.lagrange ? ckpt.lagrange->to_json() : json(nullptr);
    header["run"] = ckpt.run_header;
    header["run_values"] = ckpt.run_values.size();
    header["meta"] = ckpt.meta;
    data.insert(data.end(), ckpt.run_values.begin(), ckpt.run_values.end());

    const std::string text = header.dump();
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        const std::uint64_t hlen = text.size();
        const std::uint64_t count = data.size();
        out.write(kMagic, sizeof kMagic);
        out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
        out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.write(reinterpret_cast<const char*>(&count), sizeof count);
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)));
        if (!out) throw CheckpointError("short write to " + tmp.string());
    }
    // Replace atomically so an interrupted save never clobbers the last good file.
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    char magic[sizeof kMagic];
    std::uint32_t version = 0;
    std::uint64_t hlen = 0;
    in.read(magic, sizeof magic);
    if (!in || !std::equal(magic, magic + sizeof magic, kMagic)) {
        throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
    }
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (!in || version != kVersion) {
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    if (!in || hlen > (std::uint64_t{1} << 32)) throw CheckpointError(path.string() + ": bad header length");
    std::string text(hlen, '\0');
    in.read(text.data(), static_cast<std::streamsize>(hlen));
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!in || count > (std::uint64_t{1} << 34)) throw CheckpointError(path.string() + ": truncated header");
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw CheckpointError(path.string() + ": truncated data");
    if (in.peek() != std::ifstream::traits_type::eof()) throw CheckpointError(path.string() + ": trailing bytes");

    const json header = json::parse(text, nullptr, false);
    if (header.is_discarded()) throw CheckpointError(path.string() + ": corrupt header");

    Checkpoint ckpt;
    try {
        const TensorReader reader(header.at("tensors"), data);
        const auto arch = arch_from_json(header.at("arch"));
        const auto classes = header.at("classes").get<std::size_t>();
        const auto kind = header.at("kind").get<std::string>();
        if (kind == "gated") {
            const auto hc = hard_concrete_from(header.at("hard_concrete"), {}, "hard_concrete");
            GatedModel model(read_network(arch, classes, reader), hc);
            for (auto* g : model.gate_groups()) reader.fill("gate." + g->name(), g->log_alpha());
            ckpt.gated.emplace(std::move(model));
        } else if (kind == "extracted") {
            const auto original = arch_from_json(header.at("original_arch"));
            const auto mask = mask_from_json(header.at("mask"));
            if (mask.shrink(original) != arch) throw CheckpointError("mask does not match the stored architecture");
            ckpt.extracted.emplace(ExtractedModel{read_network(arch, classes, reader), original, mask});
        } else {
            throw CheckpointError("unknown checkpoint kind '" + kind + "'");
        }
        if (!header.at("lagrange").is_null()) {
            LagrangeState st(header.at("lagrange").size() == 2);
            st.load_json(header.at("lagrange"));
            ckpt.lagrange.emplace(std::move(st));
        }
        const auto run_values = header.at("run_values").get<std::size_t>();
        if (reader.end() + run_values != data.size()) throw CheckpointError("value count mismatch");
        ckpt.run_header = header.at("run");
        ckpt.run_values.assign(data.begin() + static_cast<std::ptrdiff_t>(reader.end()), data.end());
        ckpt.meta = header.value("meta", json(nullptr));
    } catch (const json::exception& e) {
        throw CheckpointError(path.string() + ": malformed header: " + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    } catch (const MaskError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    } catch (const ad::ShapeError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
    return ckpt;
}

namespace {

template <class F>
auto with_metrics(const RunFiles& files, Stage stage, std::vector<MetricsRow>& rows, F&& body) {
    try {
        return body();
    } catch (...) {
        // Keep the rows leading up to a failure for diagnosis; checkpoints stay untouched.
        write_metrics(files, rows, stage);
        throw;
    }
}

json stage_meta(const PruneRunConfig& config, Stage stage) {
    return {{"stage", to_string(stage)}, {"config", to_json(config)}};
}

}  // namespace

GatedModel run_train(const PruneRunConfig& config, const RunFiles& files) {
    config.validate();
    fs::create_directories(files.dir);
    GatedModel model(config.arch, config.task.num_classes, config.seed, config.hard_concrete,
                     config.init_log_alpha);
    std::vector<MetricsRow> rows;
    with_metrics(files, Stage::train, rows, [&] {
        StageModel sm{&model, nullptr, nullptr, nullptr};
        StageRun run(config, Stage::train, sm);
        return run_stage(run, config, sm, {&rows, nullptr});
    });
    write_metrics(files, rows, Stage::train);
    Checkpoint ckpt;
    ckpt.gated.emplace(model);
    ckpt.meta = stage_meta(config, Stage::train);
    save_checkpoint(files.train_checkpoint(), ckpt);
    return model;
}

ExtractedModel run_prune(const PruneRunConfig& config, GatedModel& model, const RunFiles& files,
                         PipelineResult& result) {
    config.validate();
    if (model.descriptor() != config.arch) {
        throw ConfigError("arch", "the model does not have the configured architecture");
    }
    fs::create_directories(files.dir);
    LagrangeState lagrange(config.regime.separate());
    std::vector<MetricsRow> rows;
    std::vector<ControllerRow> crows;
    const StageModel sm{&model, nullptr, &lagrange, nullptr};
    const auto stage = with_metrics(files, Stage::prune, rows, [&] {
        StageRun run(config, Stage::prune, sm);
        return run_stage(run, config, sm, {&rows, &crows});
    });
    write_metrics(files, rows, Stage::prune);
    std::vector<std::string> lines;
    for (const auto& r : crows) lines.push_back(format_row(r));
    write_rows(files.controller(), controller_header(config.regime.separate()), lines);

    result.target = config.target;
    result.pruned_accuracy = stage.eval_accuracy;
    result.terminal_sparsity = stage.sparsity;
    result.terminal_sparsity_cnn = stage.sparsity_cnn;
    result.terminal_sparsity_trans = stage.sparsity_trans;
    result.expected_macs = stage.expected_macs;
    if (config.target.separate()) {
        result.constraint_met =
            std::abs(stage.sparsity_cnn - config.target.value) <= config.sparsity_tolerance &&
            std::abs(stage.sparsity_trans - *config.target.transformer) <= config.sparsity_tolerance;
    } else {
        result.constraint_met = std::abs(stage.sparsity - config.target.value) <= config.sparsity_tolerance;
    }

    Checkpoint pruned;
    pruned.gated.emplace(model);
    pruned.lagrange.emplace(lagrange);
    pruned.meta = stage_meta(config, Stage::prune);
    save_checkpoint(files.prune_checkpoint(), pruned);

    const auto mask = binarize(model, config.threshold, config.gate_rule, &result.warnings);
    ExtractedModel extracted = extract(model, mask);
    const auto dense = exact_profile(config.arch, config.regime.virtual_seconds);
    const auto small = exact_profile(extracted.descriptor(), config.regime.virtual_seconds);
    result.dense_macs = dense.macs;
    result.dense_params = dense.params;
    result.extracted_macs = small.macs;
    result.extracted_params = small.params;
    result.mac_budget = mac_budget_from_sparsity(config.arch, config.target.value, config.regime.virtual_seconds);
    result.architecture = architecture_report(extracted, config.regime.virtual_seconds);

    Checkpoint ex;
    ex.extracted.emplace(extracted);
    ex.meta = stage_meta(config, Stage::prune);
    save_checkpoint(files.extracted_checkpoint(), ex);
    write_text(files.report(), report_csv(result.architecture));
    return extracted;
}

double run_finetune(const PruneRunConfig& config, ExtractedModel& model, const RunFiles& files) {
    config.validate();
    fs::create_directories(files.dir);
    std::vector<MetricsRow> rows;
    const StageModel sm{nullptr, &model.network, nullptr, &model.original};
    const auto stage = with_metrics(files, Stage::finetune, rows, [&] {
        StageRun run(config, Stage::finetune, sm);
        return run_stage(run, config, sm, {&rows, nullptr});
    });
    write_metrics(files, rows, Stage::finetune);
    Checkpoint ckpt;
    ckpt.extracted.emplace(model);
    ckpt.meta = stage_meta(config, Stage::finetune);
    save_checkpoint(files.finetune_checkpoint(), ckpt);
    return stage.eval_accuracy;
}

PipelineResult run_pipeline(const PruneRunConfig& config, const fs::path& out_dir) {
    const RunFiles files{out_dir};
    PipelineResult result;
    GatedModel model = run_train(config, files);
    result.dense_accuracy = evaluate(model.network(), nullptr, evaluation_set(config));
    ExtractedModel extracted = run_prune(config, model, files, result);
    result.final_accuracy = run_finetune(config, extracted, files);
    write_text(files.summary(), to_json(result).dump(2) + "\n");
    return result;
}

json to_json(const PipelineResult& r) {
    json target = r.target.separate() ? json{{"cnn", r.target.value}, {"trans", *r.target.transformer}}
                                      : json(r.target.value);
    json arch = json::array();
    for (const auto& row : r.architecture) {
        arch.push_back({{"layer_kind", row.layer_kind},
                        {"index", row.index},
                        {"kept", row.kept},
                        {"original", row.original},
                        {"kept_mac_share", row.kept_mac_share}});
    }
    return {{"dense_accuracy", r.dense_accuracy},
            {"pruned_accuracy", r.pruned_accuracy},
            {"final_accuracy", r.final_accuracy},
            {"target", target},
            {"terminal_sparsity", r.terminal_sparsity},
            {"terminal_sparsity_cnn", r.terminal_sparsity_cnn},
            {"terminal_sparsity_trans", r.terminal_sparsity_trans},
            {"constraint_met", r.constraint_met},
            {"expected_macs", r.expected_macs},
            {"dense_macs", r.dense_macs},
            {"extracted_macs", r.extracted_macs},
            {"mac_budget", r.mac_budget},
            {"dense_params", r.dense_params},
            {"extracted_params", r.extracted_params},
            {"warnings", r.warnings},
            {"architecture", arch}};
}

}  // namespace gatecraft
