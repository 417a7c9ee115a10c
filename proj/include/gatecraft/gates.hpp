#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gatecraft/autodiff.hpp"
#include "gatecraft/rng.hpp"

namespace gatecraft {

/// Temperature and stretch interval of the Hard Concrete distribution.
struct HardConcreteParams {
    double beta = 2.0 / 3.0;
    double stretch_lo = -0.1;
    double stretch_hi = 1.1;

    /// Throws std::invalid_argument unless lo < 0 < 1 < hi and beta > 0.
    void validate() const;
    /// Offset subtracted from log alpha in the keep-probability closed form.
    double keep_offset() const;
};

enum class UnitKind { conv_channel, attn_head, ffn_intermediate, hidden_dim };

std::string_view to_string(UnitKind kind);

/// How evaluation-time gates are made binary.
enum class GateRule {
    /// keep iff P(z != 0) >= threshold
    threshold,
    /// keep the round(E[kept]) units with the highest keep probability
    expected_count,
};

std::string_view to_string(GateRule rule);
GateRule gate_rule_from_string(std::string_view name);

/// Lower edge of the uniform noise interval; u is drawn from (eps, 1 - eps).
inline constexpr double kGateNoiseEps = 1e-8;

/// One family of Hard Concrete gates (all channels of a conv layer, all heads
/// of an attention block, ...). log alpha is a trainable leaf tensor of shape [n].
class GateGroup {
public:
    GateGroup(std::string name, UnitKind kind, std::size_t size, std::size_t params_per_gate,
              HardConcreteParams params = {}, double init_log_alpha = 0.0);

    const std::string& name() const noexcept { return name_; }
    UnitKind kind() const noexcept { return kind_; }
    std::size_t size() const noexcept { return log_alpha_.numel(); }
    std::size_t params_per_gate() const noexcept { return params_per_gate_; }
    const HardConcreteParams& params() const noexcept { return params_; }

    ad::Tensor& log_alpha() noexcept { return log_alpha_; }
    const ad::Tensor& log_alpha() const noexcept { return log_alpha_; }

    /// z = clamp((r - l) * sigmoid((logit(u) + log alpha) / beta) + l, 0, 1).
    ad::Tensor sample(Rng& rng) const;
    /// Same transform with caller-supplied u in (0, 1).
    ad::Tensor sample_with_noise(std::span<const double> u) const;

    /// P(z_j != 0) = sigmoid(log alpha_j - beta * log(-l / r)).
    ad::Tensor keep_probability() const;
    std::vector<double> keep_probability_values() const;

    /// Binary gates as a constant tensor.
    ad::Tensor deterministic(double threshold, GateRule rule = GateRule::threshold) const;

private:
    std::string name_;
    UnitKind kind_;
    std::size_t params_per_gate_;
    HardConcreteParams params_;
    ad::Tensor log_alpha_;
};

/// 1 where p >= threshold (inclusive), else 0.
std::vector<double> threshold_gates(std::span<const double> keep_prob, double threshold);

/// Keeps the round(sum p) highest-probability units; ties go to the lower index.
std::vector<double> expected_count_gates(std::span<const double> keep_prob);

/// Dispatches on `rule`.
std::vector<double> binary_gates(std::span<const double> keep_prob, double threshold,
                                 GateRule rule);

}  // namespace gatecraft
