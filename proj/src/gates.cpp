#include "gatecraft/gates.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gatecraft {

void HardConcreteParams::validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("hard concrete: beta must be positive");
    if (!(stretch_lo < 0.0)) throw std::invalid_argument("hard concrete: stretch_lo must be < 0");
    if (!(stretch_hi > 1.0)) throw std::invalid_argument("hard concrete: stretch_hi must be > 1");
}

double HardConcreteParams::keep_offset() const { return beta * std::log(-stretch_lo / stretch_hi); }

std::string_view to_string(UnitKind kind) {
    switch (kind) {
        case UnitKind::conv_channel: return "conv_channel";
        case UnitKind::attn_head: return "attn_head";
        case UnitKind::ffn_intermediate: return "ffn_intermediate";
        case UnitKind::hidden_dim: return "hidden_dim";
    }
    return "unknown";
}

std::string_view to_string(GateRule rule) {
    return rule == GateRule::threshold ? "threshold" : "expected_count";
}

GateRule gate_rule_from_string(std::string_view name) {
    if (name == "threshold") return GateRule::threshold;
    if (name == "expected_count") return GateRule::expected_count;
    throw std::invalid_argument("unknown gate rule '" + std::string(name) + "'");
}

GateGroup::GateGroup(std::string name, UnitKind kind, std::size_t size,
                     std::size_t params_per_gate, HardConcreteParams params,
                     double init_log_alpha)
    : name_(std::move(name)), kind_(kind), params_per_gate_(params_per_gate), params_(params) {
    if (size == 0) throw std::invalid_argument("gate group '" + name_ + "' must have n >= 1");
    params_.validate();
    log_alpha_ = ad::Tensor::parameter({size}, std::vector<double>(size, init_log_alpha));
}

ad::Tensor GateGroup::sample(Rng& rng) const {
    std::vector<double> u(size());
    for (double& v : u) v = rng.uniform_open(kGateNoiseEps);
    return sample_with_noise(u);
}

ad::Tensor GateGroup::sample_with_noise(std::span<const double> u) const {
    if (u.size() != size()) {
        throw ad::ShapeError("sample_gates", {{size()}, {u.size()}}, "noise length mismatch");
    }
    std::vector<double> logits(u.size());
    std::transform(u.begin(), u.end(), logits.begin(),
                   [](double x) { return std::log(x / (1.0 - x)); });
    const auto noise = ad::Tensor::constant({u.size()}, std::move(logits));
    const auto v = ad::sigmoid(ad::scale(noise + log_alpha_, 1.0 / params_.beta));
    const auto stretched = ad::scale(v, params_.stretch_hi - params_.stretch_lo) + params_.stretch_lo;
    return ad::clamp(stretched, 0.0, 1.0);
}

ad::Tensor GateGroup::keep_probability() const {
    return ad::sigmoid(log_alpha_ - params_.keep_offset());
}

std::vector<double> GateGroup::keep_probability_values() const {
    ad::NoGradGuard guard;
    const auto p = keep_probability();
    return {p.values().begin(), p.values().end()};
}

ad::Tensor GateGroup::deterministic(double threshold, GateRule rule) const {
    const auto p = keep_probability_values();
    return ad::Tensor::constant({size()}, binary_gates(p, threshold, rule));
}

std::vector<double> threshold_gates(std::span<const double> keep_prob, double threshold) {
    std::vector<double> out(keep_prob.size());
    std::transform(keep_prob.begin(), keep_prob.end(), out.begin(),
                   [threshold](double p) { return p >= threshold ? 1.0 : 0.0; });
    return out;
}

std::vector<double> expected_count_gates(std::span<const double> keep_prob) {
    const double expected = std::accumulate(keep_prob.begin(), keep_prob.end(), 0.0);
    const auto keep = static_cast<std::size_t>(
        std::clamp(std::llround(expected), 0LL, static_cast<long long>(keep_prob.size())));
    std::vector<std::size_t> order(keep_prob.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return keep_prob[a] > keep_prob[b]; });
    std::vector<double> out(keep_prob.size(), 0.0);
    for (std::size_t i = 0; i < keep; ++i) out[order[i]] = 1.0;
    return out;
}

std::vector<double> binary_gates(std::span<const double> keep_prob, double threshold,
                                 GateRule rule) {
    return rule == GateRule::threshold ? threshold_gates(keep_prob, threshold)
                                       : expected_count_gates(keep_prob);
}

}  // namespace gatecraft
