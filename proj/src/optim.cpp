#include "gatecraft/optim.hpp"

#include <algorithm>
#include <cmath>

#include "gatecraft/errors.hpp"

namespace gatecraft {

AdamW::AdamW(AdamWConfig config) : config_(config) {}

void AdamW::add_group(std::string name, std::vector<ad::Tensor> params, double weight_decay,
                      std::optional<double> fixed_lr) {
    Group g{std::move(name), std::move(params), weight_decay, fixed_lr, {}, {}};
    for (const auto& p : g.params) {
        if (!p.is_leaf() || !p.requires_grad()) {
            throw std::invalid_argument("AdamW: group '" + g.name + "' holds a non-parameter tensor");
        }
        g.m.emplace_back(p.numel(), 0.0);
        g.v.emplace_back(p.numel(), 0.0);
    }
    groups_.push_back(std::move(g));
}

void AdamW::step(double lr) {
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (auto& g : groups_) {
        const double rate = g.fixed_lr.value_or(lr);
        for (std::size_t i = 0; i < g.params.size(); ++i) {
            auto& p = g.params[i];
            const auto grad = p.grad();
            auto w = p.mutable_values();
            auto& m = g.m[i];
            auto& v = g.v[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = grad.empty() ? 0.0 : grad[k];
                m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
                v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
                const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
                w[k] -= rate * (update + g.weight_decay * w[k]);
            }
        }
    }
}

void AdamW::zero_grad() {
    for (auto& g : groups_) {
        for (auto& p : g.params) p.zero_grad();
    }
}

std::vector<ad::Tensor> AdamW::parameters() const {
    std::vector<ad::Tensor> out;
    for (const auto& g : groups_) out.insert(out.end(), g.params.begin(), g.params.end());
    return out;
}

nlohmann::json AdamW::state_header() const {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : groups_) {
        std::vector<std::size_t> sizes;
        for (const auto& p : g.params) sizes.push_back(p.numel());
        groups.push_back({{"name", g.name}, {"sizes", sizes}});
    }
    return {{"steps", steps_}, {"groups", groups}};
}

std::vector<double> AdamW::state_values() const {
    std::vector<double> out;
    for (const auto& g : groups_) {
        for (std::size_t i = 0; i < g.params.size(); ++i) {
            out.insert(out.end(), g.m[i].begin(), g.m[i].end());
            out.insert(out.end(), g.v[i].begin(), g.v[i].end());
        }
    }
    return out;
}

void AdamW::load_state(const nlohmann::json& header, std::span<const double> values) {
    const auto mine = state_header()["groups"];
    if (!header.contains("groups") || header["groups"] != mine) {
        throw CheckpointError("optimizer state does not match the parameter groups");
    }
    if (values.size() != state_values().size()) {
        throw CheckpointError("optimizer state has the wrong length");
    }
    std::size_t at = 0;
    for (auto& g : groups_) {
        for (std::size_t i = 0; i < g.params.size(); ++i) {
            const std::size_t n = g.m[i].size();
            std::copy_n(values.begin() + at, n, g.m[i].begin());
            at += n;
            std::copy_n(values.begin() + at, n, g.v[i].begin());
            at += n;
        }
    }
    steps_ = header.at("steps").get<std::size_t>();
}

double LinearWarmupDecay::at(std::size_t step) const {
    if (step < warmup) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
    }
    if (total <= warmup) return peak;
    const double remaining = static_cast<double>(total > step ? total - step : 0);
    return peak * std::max(0.0, remaining / static_cast<double>(total - warmup));
}

}  // namespace gatecraft
