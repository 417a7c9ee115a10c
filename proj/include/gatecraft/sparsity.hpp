#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gatecraft/arch.hpp"
#include "gatecraft/autodiff.hpp"
#include "gatecraft/model.hpp"

namespace gatecraft {

enum class RegimeKind { size_overall, size_separate, mac_overall };

std::string_view to_string(RegimeKind kind);
/// Throws ConfigError("regime", ...) for unknown names.
RegimeKind regime_from_string(std::string_view name);

struct SparsityRegime {
    RegimeKind kind = RegimeKind::mac_overall;
    /// Audio length used only inside MAC accounting.
    double virtual_seconds = 10.0;

    void validate() const;
    /// size_separate carries two targets (cnn, transformer).
    bool separate() const noexcept { return kind == RegimeKind::size_separate; }
};

/// Kept-unit counts per gate group as scalar tensors (expected or pinned).
struct KeptCounts {
    std::vector<ad::Tensor> conv;
    std::vector<ad::Tensor> heads;
    std::vector<ad::Tensor> ffn;
    ad::Tensor hidden;
};

/// Sum of keep probabilities per group; differentiable w.r.t. every log alpha.
KeptCounts expected_counts(const GatedModel& model);
/// Constant counts from binary gates (1 = kept).
KeptCounts pinned_counts(const GateValues& binary_gates);

struct BlockExpectation {
    std::string block_id;
    ad::Tensor kept_units;
    ad::Tensor params;
    ad::Tensor macs;
};

struct SparsityReport {
    /// In [0, 1]; measured in parameters for the size regimes, in MACs for mac_overall.
    ad::Tensor overall;
    ad::Tensor cnn;
    ad::Tensor transformer;
    ad::Tensor expected_macs;
    ad::Tensor expected_params;
    std::vector<BlockExpectation> per_block;
};

/// Sparsity of `dense` shrunk to `counts`. Conv output lengths are those of
/// the dense model at the regime's virtual length.
SparsityReport sparsity_from_counts(const ArchDescriptor& dense, const KeptCounts& counts,
                                    const SparsityRegime& regime);
SparsityReport expected_sparsity(const GatedModel& model, const SparsityRegime& regime);

struct BlockProfile {
    std::string block_id;
    /// conv, projection, pos_conv, mha, ffn, layernorm
    std::string kind;
    bool cnn = false;
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
};

/// Counts cover conv kernels and biases, the projection, the optional
/// positional conv, attention and FFN weights with biases, and every
/// LayerNorm. The classifier head is excluded. Conv layers form the CNN part;
/// everything else is the transformer part.
struct Profile {
    double seconds = 0.0;
    std::size_t samples = 0;
    std::size_t frames = 0;
    std::uint64_t macs = 0;
    std::uint64_t params = 0;
    std::uint64_t cnn_macs = 0;
    std::uint64_t cnn_params = 0;
    std::vector<BlockProfile> blocks;

    double cnn_mac_share() const;
    double cnn_param_share() const;
};

/// Throws ConfigError when seconds <= 0 or the input is shorter than the conv stack.
Profile exact_profile(const ArchDescriptor& desc, double seconds);

/// round((1 - t) * exact MACs).
std::uint64_t mac_budget_from_sparsity(const ArchDescriptor& desc, double target_sparsity,
                                       double seconds);

/// block_id,kind,params,macs,mac_share
std::string profile_csv(const Profile& profile);

/// Closed forms for one block.
std::uint64_t mha_macs(std::uint64_t t, std::uint64_t heads, std::uint64_t hidden,
                       std::uint64_t head_dim);
std::uint64_t ffn_macs(std::uint64_t t, std::uint64_t hidden, std::uint64_t intermediate);
std::uint64_t conv_macs(std::uint64_t t_out, std::uint64_t c_out, std::uint64_t c_in,
                        std::uint64_t kernel);

}  // namespace gatecraft
