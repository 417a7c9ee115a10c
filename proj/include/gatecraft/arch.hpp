#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "json.hpp"

namespace gatecraft {

struct ConvLayerSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;

    bool operator==(const ConvLayerSpec&) const = default;
};

struct TransformerLayerSpec {
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    std::size_t ffn_intermediate = 1;

    bool operator==(const TransformerLayerSpec&) const = default;
};

/// Grouped convolutional positional embedding (hidden -> hidden, same-length output).
/// Profiled only; the trainable model does not build one.
struct PositionalConvSpec {
    std::size_t kernel = 1;
    std::size_t groups = 1;

    bool operator==(const PositionalConvSpec&) const = default;
};

/// Weight-free shape of a conv frontend followed by a transformer encoder.
struct ArchDescriptor {
    std::vector<ConvLayerSpec> conv_layers;
    std::size_t hidden = 1;
    std::vector<TransformerLayerSpec> transformer_layers;
    std::size_t sample_rate = 16000;
    std::optional<PositionalConvSpec> pos_conv;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    std::size_t last_conv_channels() const { return conv_layers.back().out_channels; }

    bool operator==(const ArchDescriptor&) const = default;
};

nlohmann::json to_json(const ArchDescriptor& desc);
/// Parses and validates; errors carry the JSON path of the bad field.
ArchDescriptor arch_from_json(const nlohmann::json& doc);

/// 3 conv layers (1->16->16->16, kernels 5/3/3, strides 3/2/2), hidden 32,
/// 2 transformer layers of 8 heads x 4 dims with FFN 64, 1 kHz.
ArchDescriptor toy_descriptor();
/// 7x512-channel conv frontend, 12 layers of 12 heads x 64 dims, FFN 3072, 16 kHz.
ArchDescriptor wav2vec2_base_descriptor();

/// Output length after each conv layer for `samples` input samples.
std::vector<std::size_t> conv_lengths(const ArchDescriptor& desc, std::size_t samples);
/// Frames entering the transformer; 0 when the input is too short.
std::size_t frame_count(const ArchDescriptor& desc, std::size_t samples);
/// round(seconds * sample_rate).
std::size_t samples_for(const ArchDescriptor& desc, double seconds);

}  // namespace gatecraft
