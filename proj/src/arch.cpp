#include "gatecraft/arch.hpp"

#include <cmath>
#include <string>

#include "gatecraft/errors.hpp"
#include "gatecraft/kernels.hpp"

namespace gatecraft {
namespace {

using nlohmann::json;

std::size_t positive_field(const json& obj, const std::string& key, const std::string& path) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!obj.is_object()) throw ConfigError(path, "expected an object");
    const auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError(where, "missing field");
    if (!it->is_number_integer() && !it->is_number_unsigned()) {
        throw ConfigError(where, "expected a positive integer, got " + it->dump());
    }
    const auto value = it->get<long long>();
    if (value <= 0) throw ConfigError(where, "must be positive, got " + std::to_string(value));
    return static_cast<std::size_t>(value);
}

void require_positive(std::size_t value, const std::string& where) {
    if (value == 0) throw ConfigError(where, "must be positive");
}

}  // namespace

void ArchDescriptor::validate() const {
    if (conv_layers.empty()) throw ConfigError("conv_layers", "at least one conv layer required");
    for (std::size_t i = 0; i < conv_layers.size(); ++i) {
        const auto& c = conv_layers[i];
        const std::string where = "conv_layers[" + std::to_string(i) + "]";
        require_positive(c.in_channels, where + ".in");
        require_positive(c.out_channels, where + ".out");
        require_positive(c.kernel, where + ".kernel");
        require_positive(c.stride, where + ".stride");
        const std::size_t expected_in = i == 0 ? 1 : conv_layers[i - 1].out_channels;
        if (c.in_channels != expected_in) {
            throw ConfigError(where + ".in", "expected " + std::to_string(expected_in) +
                                                 " input channels, got " +
                                                 std::to_string(c.in_channels));
        }
    }
    require_positive(hidden, "hidden");
    require_positive(sample_rate, "sample_rate");
    for (std::size_t i = 0; i < transformer_layers.size(); ++i) {
        const auto& t = transformer_layers[i];
        const std::string where = "transformer_layers[" + std::to_string(i) + "]";
        require_positive(t.heads, where + ".heads");
        require_positive(t.head_dim, where + ".head_dim");
        require_positive(t.ffn_intermediate, where + ".ffn_intermediate");
    }
    if (pos_conv) {
        require_positive(pos_conv->kernel, "pos_conv.kernel");
        require_positive(pos_conv->groups, "pos_conv.groups");
        if (hidden % pos_conv->groups != 0) {
            throw ConfigError("pos_conv.groups", "must divide hidden");
        }
    }
}

nlohmann::json to_json(const ArchDescriptor& desc) {
    json conv = json::array();
    for (const auto& c : desc.conv_layers) {
        conv.push_back({{"in", c.in_channels},
                        {"out", c.out_channels},
                        {"kernel", c.kernel},
                        {"stride", c.stride}});
    }
    json layers = json::array();
    for (const auto& t : desc.transformer_layers) {
        layers.push_back(
            {{"heads", t.heads}, {"head_dim", t.head_dim}, {"ffn_intermediate", t.ffn_intermediate}});
    }
    json doc = {{"sample_rate", desc.sample_rate},
                {"conv_layers", std::move(conv)},
                {"hidden", desc.hidden},
                {"transformer_layers", std::move(layers)}};
    if (desc.pos_conv) {
        doc["pos_conv"] = {{"kernel", desc.pos_conv->kernel}, {"groups", desc.pos_conv->groups}};
    }
    return doc;
}

ArchDescriptor arch_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("", "architecture must be a JSON object");
    ArchDescriptor desc;
    desc.sample_rate = positive_field(doc, "sample_rate", "");
    desc.hidden = positive_field(doc, "hidden", "");
    const auto conv = doc.find("conv_layers");
    if (conv == doc.end() || !conv->is_array()) throw ConfigError("conv_layers", "expected an array");
    for (std::size_t i = 0; i < conv->size(); ++i) {
        const std::string path = "conv_layers[" + std::to_string(i) + "]";
        const json& c = (*conv)[i];
        desc.conv_layers.push_back({positive_field(c, "in", path), positive_field(c, "out", path),
                                    positive_field(c, "kernel", path),
                                    positive_field(c, "stride", path)});
    }
    const auto layers = doc.find("transformer_layers");
    if (layers == doc.end() || !layers->is_array()) {
        throw ConfigError("transformer_layers", "expected an array");
    }
    for (std::size_t i = 0; i < layers->size(); ++i) {
        const std::string path = "transformer_layers[" + std::to_string(i) + "]";
        const json& t = (*layers)[i];
        desc.transformer_layers.push_back({positive_field(t, "heads", path),
                                           positive_field(t, "head_dim", path),
                                           positive_field(t, "ffn_intermediate", path)});
    }
    if (const auto pc = doc.find("pos_conv"); pc != doc.end()) {
        desc.pos_conv = PositionalConvSpec{positive_field(*pc, "kernel", "pos_conv"),
                                           positive_field(*pc, "groups", "pos_conv")};
    }
    desc.validate();
    return desc;
}

ArchDescriptor toy_descriptor() {
    ArchDescriptor d;
    d.conv_layers = {{1, 16, 5, 3}, {16, 16, 3, 2}, {16, 16, 3, 2}};
    d.hidden = 32;
    d.transformer_layers = {{8, 4, 64}, {8, 4, 64}};
    d.sample_rate = 1000;
    return d;
}

ArchDescriptor wav2vec2_base_descriptor() {
    ArchDescriptor d;
    const std::size_t kernels[] = {10, 3, 3, 3, 3, 2, 2};
    const std::size_t strides[] = {5, 2, 2, 2, 2, 2, 2};
    for (std::size_t i = 0; i < 7; ++i) {
        d.conv_layers.push_back({i == 0 ? 1u : 512u, 512, kernels[i], strides[i]});
    }
    d.hidden = 768;
    d.transformer_layers.assign(12, {12, 64, 3072});
    d.sample_rate = 16000;
    d.pos_conv = PositionalConvSpec{128, 16};
    return d;
}

std::vector<std::size_t> conv_lengths(const ArchDescriptor& desc, std::size_t samples) {
    std::vector<std::size_t> lengths;
    std::size_t t = samples;
    for (const auto& c : desc.conv_layers) {
        t = kernels::conv_output_length(t, c.kernel, c.stride);
        lengths.push_back(t);
    }
    return lengths;
}

std::size_t frame_count(const ArchDescriptor& desc, std::size_t samples) {
    const auto lengths = conv_lengths(desc, samples);
    return lengths.empty() ? samples : lengths.back();
}

std::size_t samples_for(const ArchDescriptor& desc, double seconds) {
    return static_cast<std::size_t>(std::llround(seconds * static_cast<double>(desc.sample_rate)));
}

}  // namespace gatecraft
