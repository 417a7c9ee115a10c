#include "gatecraft/controller.hpp"

#include <algorithm>
#include <cmath>

#include "gatecraft/errors.hpp"

namespace gatecraft {

namespace {

void check_target(double t, const std::string& field) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(field, "target sparsity must lie in [0, 1]");
}

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

void TargetSchedule::validate() const {
    check_target(final_target.value, "schedule.final_target");
    if (final_target.transformer) check_target(*final_target.transformer, "schedule.final_target.trans");
    if (warmup_steps == 0) throw ConfigError("schedule.warmup_steps", "must be positive");
    if (total_steps == 0) throw ConfigError("schedule.total_steps", "must be positive");
    if (warmup_steps > total_steps) {
        throw ConfigError("schedule.warmup_steps", "must not exceed total_steps");
    }
}

SparsityTarget current_target(const TargetSchedule& schedule, std::size_t step) {
    const double ramp = schedule.warmup_steps == 0
                            ? 1.0
                            : std::min(1.0, static_cast<double>(step) /
                                                static_cast<double>(schedule.warmup_steps));
    SparsityTarget t = schedule.final_target;
    t.value *= ramp;
    if (t.transformer) *t.transformer *= ramp;
    return t;
}

LagrangeState::LagrangeState(bool separate) {
    const std::size_t n = separate ? 2 : 1;
    for (std::size_t i = 0; i < n; ++i) {
        pairs_.emplace_back(ad::Tensor::parameter({}, {0.0}), ad::Tensor::parameter({}, {0.0}));
    }
}

std::vector<ad::Tensor> LagrangeState::parameters() const {
    std::vector<ad::Tensor> out;
    for (const auto& [l1, l2] : pairs_) {
        out.push_back(l1);
        out.push_back(l2);
    }
    return out;
}

void LagrangeState::zero_grad() {
    for (auto& [l1, l2] : pairs_) {
        l1.zero_grad();
        l2.zero_grad();
    }
}

void LagrangeState::ascend(double lr) {
    for (auto& [l1, l2] : pairs_) {
        for (ad::Tensor* l : {&l1, &l2}) {
            const auto g = l->grad();
            if (!g.empty()) l->mutable_values()[0] += lr * g[0];
        }
    }
}

nlohmann::json LagrangeState::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& [l1, l2] : pairs_) arr.push_back({l1.item(), l2.item()});
    return arr;
}

void LagrangeState::load_json(const nlohmann::json& doc) {
    if (!doc.is_array() || doc.size() != pairs_.size()) {
        throw CheckpointError("controller state has the wrong number of multiplier pairs");
    }
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
        const auto& p = doc[i];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw CheckpointError("controller state entries must be [lambda1, lambda2]");
        }
        pairs_[i].first.mutable_values()[0] = p[0].get<double>();
        pairs_[i].second.mutable_values()[0] = p[1].get<double>();
    }
}

ad::Tensor penalty(const LagrangeState& state, const SparsityReport& report,
                   const SparsityTarget& target, const SparsityRegime& regime) {
    const bool sep = regime.separate();
    if (sep != target.separate()) {
        throw ConfigError("schedule.final_target", std::string(to_string(regime.kind)) +
                                                       (sep ? " needs a (cnn, trans) target pair"
                                                            : " needs a single target"));
    }
    if (sep != state.separate()) {
        throw ConfigError("regime", "Lagrange state arity does not match the regime");
    }
    const auto term = [](const ad::Tensor& l1, const ad::Tensor& l2, const ad::Tensor& s, double t) {
        const auto gap = s - t;
        return l1 * gap + l2 * (gap * gap);
    };
    if (!sep) return term(state.lambda1(), state.lambda2(), report.overall, target.value);
    return term(state.lambda1(0), state.lambda2(0), report.cnn, target.value) +
           term(state.lambda1(1), state.lambda2(1), report.transformer, *target.transformer);
}

void adversarial_step(LagrangeState& state, AdamW& optimizer, double lr, double lambda_lr) {
    const auto check = [&](const ad::Tensor& p, const char* what) {
        if (all_finite(p.grad())) return;
        optimizer.zero_grad();
        state.zero_grad();
        throw NonFiniteGradientError(std::string("non-finite gradient on ") + what + "; step skipped");
    };
    for (const auto& p : optimizer.parameters()) check(p, "a model or gate parameter");
    for (const auto& l : state.parameters()) check(l, "a Lagrange multiplier");
    optimizer.step(lr);
    state.ascend(lambda_lr);
    optimizer.zero_grad();
    state.zero_grad();
}

}  // namespace gatecraft
