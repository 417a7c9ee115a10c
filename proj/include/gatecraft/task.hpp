#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gatecraft/autodiff.hpp"
#include "gatecraft/rng.hpp"
#include "json.hpp"

namespace gatecraft {

/// Waveform classification: class k is a tone at DFT bin planted_channels[k]
/// (random phase and a random amplitude in [0.75, 1.25]) plus white Gaussian noise.
struct SyntheticTask {
    std::size_t num_classes = 4;
    std::size_t seq_len = 400;
    std::vector<std::size_t> planted_channels{9, 15, 23, 33};
    double noise_std = 0.5;

    /// Throws ConfigError naming the bad field.
    void validate() const;
};

nlohmann::json to_json(const SyntheticTask& task);
SyntheticTask task_from_json(const nlohmann::json& doc, const SyntheticTask& defaults = {});

struct Batch {
    ad::Tensor inputs;  // [B, seq_len]
    std::vector<std::size_t> labels;
};

/// Labels cycle through the classes and are then shuffled, so every class
/// appears floor(B/K) or ceil(B/K) times.
Batch generate_batch(const SyntheticTask& task, std::size_t batch_size, Rng& rng);

/// Spectral power of one waveform at each planted bin.
std::vector<double> planted_features(const SyntheticTask& task, std::span<const double> waveform);

}  // namespace gatecraft
