#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "gatecraft/autodiff.hpp"
#include "gatecraft/optim.hpp"
#include "gatecraft/sparsity.hpp"
#include "json.hpp"

namespace gatecraft {

/// One overall target, or a (cnn, transformer) pair for size_separate.
struct SparsityTarget {
    double value = 0.0;
    std::optional<double> transformer;

    static SparsityTarget single(double t) { return {t, std::nullopt}; }
    static SparsityTarget pair(double cnn, double trans) { return {cnn, trans}; }

    bool separate() const noexcept { return transformer.has_value(); }
    bool operator==(const SparsityTarget&) const = default;
};

struct TargetSchedule {
    SparsityTarget final_target;
    std::size_t warmup_steps = 1;
    std::size_t total_steps = 1;

    /// Throws ConfigError for targets outside [0, 1] or warmup > total.
    void validate() const;
};

/// final * min(1, step / warmup).
SparsityTarget current_target(const TargetSchedule& schedule, std::size_t step);

/// Lagrange multipliers: one (lambda1, lambda2) pair, or one per component
/// (cnn first, then transformer) for size_separate. Each is a scalar leaf.
class LagrangeState {
public:
    explicit LagrangeState(bool separate = false);

    bool separate() const noexcept { return pairs_.size() == 2; }
    std::size_t components() const noexcept { return pairs_.size(); }

    ad::Tensor& lambda1(std::size_t component = 0) { return pairs_.at(component).first; }
    ad::Tensor& lambda2(std::size_t component = 0) { return pairs_.at(component).second; }
    const ad::Tensor& lambda1(std::size_t component = 0) const { return pairs_.at(component).first; }
    const ad::Tensor& lambda2(std::size_t component = 0) const { return pairs_.at(component).second; }

    std::vector<ad::Tensor> parameters() const;
    void zero_grad();

    /// Gradient ascent: lambda += lr * d(objective)/d(lambda).
    void ascend(double lr);

    nlohmann::json to_json() const;
    void load_json(const nlohmann::json& doc);

private:
    std::vector<std::pair<ad::Tensor, ad::Tensor>> pairs_;
};

/// lambda1 (s - t) + lambda2 (s - t)^2, summed over components for size_separate.
/// Throws ConfigError when the regime, target, and state arities disagree.
ad::Tensor penalty(const LagrangeState& state, const SparsityReport& report,
                   const SparsityTarget& target, const SparsityRegime& regime);

/// Checks every gradient is finite (NonFiniteGradientError otherwise, with no
/// update applied), descends on theta and alpha through `optimizer` at `lr`,
/// ascends on lambda at `lambda_lr`, then clears all gradients.
void adversarial_step(LagrangeState& state, AdamW& optimizer, double lr, double lambda_lr);

}  // namespace gatecraft
