#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gatecraft/autodiff.hpp"
#include "json.hpp"

namespace gatecraft {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

/// Adam with decoupled weight decay. Parameters are organized in named groups;
/// a group either follows the learning rate passed to step() or has its own
/// constant rate.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {});

    void add_group(std::string name, std::vector<ad::Tensor> params, double weight_decay,
                   std::optional<double> fixed_lr = std::nullopt);

    /// One update from the gradients currently stored on the parameters.
    void step(double lr);
    void zero_grad();

    std::size_t steps() const noexcept { return steps_; }
    std::vector<ad::Tensor> parameters() const;

    /// Moments and step count. Parameter values are not included.
    nlohmann::json state_header() const;
    std::vector<double> state_values() const;
    /// Restores into an optimizer with identically shaped groups; throws CheckpointError otherwise.
    void load_state(const nlohmann::json& header, std::span<const double> values);

private:
    struct Group {
        std::string name;
        std::vector<ad::Tensor> params;
        double weight_decay;
        std::optional<double> fixed_lr;
        std::vector<std::vector<double>> m;
        std::vector<std::vector<double>> v;
    };

    AdamWConfig config_;
    std::vector<Group> groups_;
    std::size_t steps_ = 0;
};

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `total`.
struct LinearWarmupDecay {
    double peak = 1e-3;
    std::size_t warmup = 0;
    std::size_t total = 1;

    double at(std::size_t step) const;
};

}  // namespace gatecraft
