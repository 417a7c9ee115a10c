#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gatecraft/arch.hpp"
#include "gatecraft/autodiff.hpp"
#include "gatecraft/gates.hpp"
#include "gatecraft/rng.hpp"

namespace gatecraft {

struct ConvWeights {
    ad::Tensor weight;  // [K, C_in, C_out]
    ad::Tensor bias;    // [C_out]
};

struct EncoderLayerWeights {
    ad::Tensor ln1_gamma, ln1_beta;  // [d]
    ad::Tensor wq, wk, wv;           // [d, h*d_head], head k owns columns [k*d_head, (k+1)*d_head)
    ad::Tensor bq, bk, bv;           // [h*d_head]
    ad::Tensor wo;                   // [h*d_head, d]
    ad::Tensor bo;                   // [d]
    ad::Tensor ln2_gamma, ln2_beta;  // [d]
    ad::Tensor w1;                   // [d, d_int]
    ad::Tensor b1;                   // [d_int]
    ad::Tensor w2;                   // [d_int, d]
    ad::Tensor b2;                   // [d]
};

struct NetworkWeights {
    std::vector<ConvWeights> conv;
    ad::Tensor proj_w;  // [C_last, d]
    ad::Tensor proj_b;  // [d]
    std::vector<EncoderLayerWeights> layers;
    ad::Tensor final_gamma, final_beta;  // [d]
    ad::Tensor cls_w;                    // [d, classes]
    ad::Tensor cls_b;                    // [classes]
};

struct NamedTensor {
    std::string name;
    ad::Tensor tensor;
    /// Weight decay applies (matrices and conv kernels only).
    bool decay = false;
};

/// Gate values for one forward pass. An undefined tensor leaves that site ungated.
struct GateValues {
    std::vector<ad::Tensor> conv;   // [C_out] per conv layer
    std::vector<ad::Tensor> heads;  // [h] per transformer layer
    std::vector<ad::Tensor> ffn;    // [d_int] per transformer layer
    ad::Tensor hidden;              // [d], shared by every layer

    static GateValues ones(const ArchDescriptor& desc);
};

/// Conv frontend (conv -> bias -> GeLU per layer), linear projection to the
/// hidden size, pre-LN transformer encoder, final LayerNorm, and a mean-pool
/// linear classifier. Channels-last activations throughout.
///
/// Gating sites: each conv output channel; each attention head's context
/// before the output projection; each FFN intermediate unit after GeLU; and
/// the hidden dimension at the projection output, at every layer input, and
/// on every LayerNorm output. With hidden gates present, LayerNorm statistics
/// are gate-weighted so a zero gate removes that dimension exactly.
class Network {
public:
    Network(ArchDescriptor desc, std::size_t num_classes, Rng& init);
    /// Adopts existing weights; throws ShapeError when they do not fit `desc`.
    Network(ArchDescriptor desc, std::size_t num_classes, NetworkWeights weights);

    const ArchDescriptor& descriptor() const noexcept { return desc_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    const NetworkWeights& weights() const noexcept { return weights_; }
    NetworkWeights& weights() noexcept { return weights_; }

    /// [B, T_in] waveform -> [B, T_out, hidden]. Null `gates` runs ungated.
    /// Throws NonFiniteError naming the block where NaN/Inf first appears.
    ad::Tensor encode(const ad::Tensor& waveform, const GateValues* gates = nullptr) const;
    /// [B, T_out, hidden] -> [B, classes].
    ad::Tensor classify(const ad::Tensor& encoded) const;

    /// Stable order; names are checkpoint keys.
    std::vector<NamedTensor> named_parameters() const;

    /// Deep copy with fresh leaves.
    Network clone() const;

private:
    void check_shapes() const;

    ArchDescriptor desc_;
    std::size_t num_classes_;
    NetworkWeights weights_;
};

enum class ForwardMode { train, eval };

/// A Network with Hard Concrete gates at the four pruning granularities.
class GatedModel {
public:
    GatedModel(ArchDescriptor desc, std::size_t num_classes, std::uint64_t seed,
               HardConcreteParams hc = {}, double init_log_alpha = 0.0);
    GatedModel(Network network, HardConcreteParams hc = {}, double init_log_alpha = 0.0);

    const Network& network() const noexcept { return network_; }
    Network& network() noexcept { return network_; }
    const ArchDescriptor& descriptor() const noexcept { return network_.descriptor(); }
    const HardConcreteParams& hard_concrete() const noexcept { return hc_; }

    std::vector<GateGroup>& conv_gates() noexcept { return conv_gates_; }
    const std::vector<GateGroup>& conv_gates() const noexcept { return conv_gates_; }
    std::vector<GateGroup>& head_gates() noexcept { return head_gates_; }
    const std::vector<GateGroup>& head_gates() const noexcept { return head_gates_; }
    std::vector<GateGroup>& ffn_gates() noexcept { return ffn_gates_; }
    const std::vector<GateGroup>& ffn_gates() const noexcept { return ffn_gates_; }
    GateGroup& hidden_gate() noexcept { return hidden_gate_; }
    const GateGroup& hidden_gate() const noexcept { return hidden_gate_; }

    /// conv..., heads..., ffn..., hidden.
    std::vector<const GateGroup*> gate_groups() const;
    std::vector<GateGroup*> gate_groups();

    GateValues sample_gates(Rng& rng) const;
    /// Deep copy; plain copies share weight and gate storage.
    GatedModel clone() const;
    GateValues deterministic_gates(double threshold, GateRule rule = GateRule::threshold) const;

private:
    void build_gates(double init_log_alpha);

    Network network_;
    HardConcreteParams hc_;
    std::vector<GateGroup> conv_gates_;
    std::vector<GateGroup> head_gates_;
    std::vector<GateGroup> ffn_gates_;
    GateGroup hidden_gate_;
};

/// Train mode samples gates from `rng` (required); eval mode uses binary gates.
ad::Tensor gated_forward(const GatedModel& model, const ad::Tensor& waveform, ForwardMode mode,
                         Rng* rng, double threshold = 0.5, GateRule rule = GateRule::threshold);

/// Mean cross-entropy of logits [B, C] against integer labels.
ad::Tensor cross_entropy(const ad::Tensor& logits, std::span<const std::size_t> labels);
/// Fraction of rows whose argmax equals the label.
double accuracy(const ad::Tensor& logits, std::span<const std::size_t> labels);

}  // namespace gatecraft
