#include "gatecraft/sparsity.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <type_traits>

#include "gatecraft/errors.hpp"

namespace gatecraft {

namespace {

// Arithmetic shared by the exact (integer) and expected (tensor) accounting.
std::uint64_t mulc(std::uint64_t v, std::uint64_t c) { return v * c; }
ad::Tensor mulc(const ad::Tensor& v, std::uint64_t c) { return v * static_cast<double>(c); }

template <class V>
struct Counts {
    std::vector<V> conv;
    std::vector<V> heads;
    std::vector<V> ffn;
    V hidden;
};

template <class V>
struct BlockCost {
    std::string id;
    std::string kind;
    bool cnn = false;
    V kept;
    V params;
    V macs;
};

// Walks the architecture with unit counts replaced by `n`. Conv lengths and
// the frame count come from the dense descriptor.
template <class V>
std::vector<BlockCost<V>> account(const ArchDescriptor& desc, const Counts<V>& n,
                                  const std::vector<std::size_t>& lengths, V zero) {
    std::vector<BlockCost<V>> blocks;
    const std::uint64_t frames = lengths.back();
    for (std::size_t i = 0; i < desc.conv_layers.size(); ++i) {
        const auto& c = desc.conv_layers[i];
        // Kernel entries per output channel; the first layer's input is the raw waveform.
        const V fan = i == 0 ? mulc(n.conv[i], c.kernel * c.in_channels)
                             : mulc(n.conv[i] * n.conv[i - 1], c.kernel);
        blocks.push_back({"conv" + std::to_string(i), "conv", true, n.conv[i],
                          fan + n.conv[i], mulc(fan, lengths[i])});
    }
    const V proj = n.conv.back() * n.hidden;
    blocks.push_back({"proj", "projection", false, n.hidden, proj + n.hidden,
                      mulc(proj, frames)});
    if (desc.pos_conv) {
        if constexpr (std::is_same_v<V, std::uint64_t>) {
            const auto& pc = *desc.pos_conv;
            const std::uint64_t w = n.hidden * (n.hidden / pc.groups) * pc.kernel;
            blocks.push_back({"pos_conv", "pos_conv", false, n.hidden, w + n.hidden, w * frames});
        } else {
            throw ConfigError("pos_conv", "expected accounting does not model a positional conv");
        }
    }
    for (std::size_t j = 0; j < desc.transformer_layers.size(); ++j) {
        const auto& l = desc.transformer_layers[j];
        const std::string p = "layer" + std::to_string(j);
        const V h = n.heads[j];
        const V d = n.hidden;
        const V hd = h * d;
        // LN1 (2d), Q/K/V with biases, output projection with bias.
        const V mha_params =
            mulc(d, 2) + mulc(hd, 4 * l.head_dim) + mulc(h, 3 * l.head_dim) + d;
        const V mha = mulc(hd, 4 * frames * l.head_dim) + mulc(h, 2 * frames * frames * l.head_dim);
        blocks.push_back({p + ".mha", "mha", false, h, mha_params, mha});
        const V di = n.ffn[j];
        const V dd = d * di;
        // LN2 (2d), W1 + b1, W2 + b2.
        const V ffn_params = mulc(d, 2) + mulc(dd, 2) + di + d;
        blocks.push_back({p + ".ffn", "ffn", false, di, ffn_params, mulc(dd, 2 * frames)});
    }
    blocks.push_back({"final_ln", "layernorm", false, n.hidden, mulc(n.hidden, 2), zero});
    return blocks;
}

std::vector<std::size_t> dense_lengths(const ArchDescriptor& desc, double seconds) {
    if (!(seconds > 0.0) || !std::isfinite(seconds)) {
        throw ConfigError("virtual_seconds", "must be a positive finite number");
    }
    const auto lengths = conv_lengths(desc, samples_for(desc, seconds));
    if (lengths.back() == 0) {
        throw ConfigError("virtual_seconds", "too short for the conv stack");
    }
    return lengths;
}

Counts<std::uint64_t> dense_counts(const ArchDescriptor& desc) {
    Counts<std::uint64_t> n;
    for (const auto& c : desc.conv_layers) n.conv.push_back(c.out_channels);
    for (const auto& l : desc.transformer_layers) {
        n.heads.push_back(l.heads);
        n.ffn.push_back(l.ffn_intermediate);
    }
    n.hidden = desc.hidden;
    return n;
}

ad::Tensor count_of(const ad::Tensor& gates) { return ad::sum(gates); }

}  // namespace

std::string_view to_string(RegimeKind kind) {
    switch (kind) {
        case RegimeKind::size_overall: return "size_overall";
        case RegimeKind::size_separate: return "size_separate";
        case RegimeKind::mac_overall: return "mac_overall";
    }
    return "unknown";
}

RegimeKind regime_from_string(std::string_view name) {
    if (name == "size_overall") return RegimeKind::size_overall;
    if (name == "size_separate") return RegimeKind::size_separate;
    if (name == "mac_overall") return RegimeKind::mac_overall;
    throw ConfigError("regime", "unknown regime '" + std::string(name) +
                                    "' (expected size_overall, size_separate or mac_overall)");
}

void SparsityRegime::validate() const {
    if (!(virtual_seconds > 0.0) || !std::isfinite(virtual_seconds)) {
        throw ConfigError("regime.virtual_seconds", "must be a positive finite number");
    }
}

KeptCounts expected_counts(const GatedModel& model) {
    KeptCounts k;
    for (const auto& g : model.conv_gates()) k.conv.push_back(count_of(g.keep_probability()));
    for (const auto& g : model.head_gates()) k.heads.push_back(count_of(g.keep_probability()));
    for (const auto& g : model.ffn_gates()) k.ffn.push_back(count_of(g.keep_probability()));
    k.hidden = count_of(model.hidden_gate().keep_probability());
    return k;
}

KeptCounts pinned_counts(const GateValues& gates) {
    KeptCounts k;
    const auto constant_count = [](const ad::Tensor& g) {
        double s = 0.0;
        for (double v : g.values()) s += v;
        return ad::Tensor::scalar(s);
    };
    for (const auto& g : gates.conv) k.conv.push_back(constant_count(g));
    for (const auto& g : gates.heads) k.heads.push_back(constant_count(g));
    for (const auto& g : gates.ffn) k.ffn.push_back(constant_count(g));
    k.hidden = constant_count(gates.hidden);
    return k;
}

SparsityReport sparsity_from_counts(const ArchDescriptor& dense, const KeptCounts& counts,
                                    const SparsityRegime& regime) {
    regime.validate();
    if (counts.conv.size() != dense.conv_layers.size() ||
        counts.heads.size() != dense.transformer_layers.size() ||
        counts.ffn.size() != dense.transformer_layers.size() || !counts.hidden.defined()) {
        throw ad::ShapeError("expected_sparsity", {}, "kept counts do not match the descriptor");
    }
    const auto lengths = dense_lengths(dense, regime.virtual_seconds);
    const Counts<ad::Tensor> n{counts.conv, counts.heads, counts.ffn, counts.hidden};
    const auto blocks = account<ad::Tensor>(dense, n, lengths, ad::Tensor::scalar(0.0));
    const auto full = account<std::uint64_t>(dense, dense_counts(dense), lengths, 0);

    const bool by_macs = regime.kind == RegimeKind::mac_overall;
    ad::Tensor cnn_kept = ad::Tensor::scalar(0.0);
    ad::Tensor trans_kept = ad::Tensor::scalar(0.0);
    ad::Tensor macs = ad::Tensor::scalar(0.0);
    ad::Tensor params = ad::Tensor::scalar(0.0);
    std::uint64_t cnn_total = 0;
    std::uint64_t trans_total = 0;
    SparsityReport report;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& blk = blocks[b];
        macs = macs + blk.macs;
        params = params + blk.params;
        const ad::Tensor& measure = by_macs ? blk.macs : blk.params;
        const std::uint64_t dense_measure = by_macs ? full[b].macs : full[b].params;
        if (blk.cnn) {
            cnn_kept = cnn_kept + measure;
            cnn_total += dense_measure;
        } else {
            trans_kept = trans_kept + measure;
            trans_total += dense_measure;
        }
        report.per_block.push_back({blk.id, blk.kept, blk.params, blk.macs});
    }
    const auto fraction_removed = [](const ad::Tensor& kept, std::uint64_t total) {
        if (total == 0) return ad::Tensor::scalar(0.0);
        return 1.0 - kept * (1.0 / static_cast<double>(total));
    };
    report.overall = fraction_removed(cnn_kept + trans_kept, cnn_total + trans_total);
    report.cnn = fraction_removed(cnn_kept, cnn_total);
    report.transformer = fraction_removed(trans_kept, trans_total);
    report.expected_macs = macs;
    report.expected_params = params;
    return report;
}

SparsityReport expected_sparsity(const GatedModel& model, const SparsityRegime& regime) {
    return sparsity_from_counts(model.descriptor(), expected_counts(model), regime);
}

double Profile::cnn_mac_share() const {
    return macs == 0 ? 0.0 : static_cast<double>(cnn_macs) / static_cast<double>(macs);
}

double Profile::cnn_param_share() const {
    return params == 0 ? 0.0 : static_cast<double>(cnn_params) / static_cast<double>(params);
}

Profile exact_profile(const ArchDescriptor& desc, double seconds) {
    desc.validate();
    const auto lengths = dense_lengths(desc, seconds);
    Profile p;
    p.seconds = seconds;
    p.samples = samples_for(desc, seconds);
    p.frames = lengths.back();
    for (const auto& b : account<std::uint64_t>(desc, dense_counts(desc), lengths, 0)) {
        p.macs += b.macs;
        p.params += b.params;
        if (b.cnn) {
            p.cnn_macs += b.macs;
            p.cnn_params += b.params;
        }
        p.blocks.push_back({b.id, b.kind, b.cnn, b.params, b.macs});
    }
    return p;
}

std::uint64_t mac_budget_from_sparsity(const ArchDescriptor& desc, double target_sparsity,
                                       double seconds) {
    if (!(target_sparsity >= 0.0 && target_sparsity <= 1.0)) {
        throw ConfigError("target", "sparsity target must lie in [0, 1]");
    }
    const auto macs = exact_profile(desc, seconds).macs;
    return static_cast<std::uint64_t>(std::llround((1.0 - target_sparsity) * static_cast<double>(macs)));
}

std::string profile_csv(const Profile& profile) {
    std::ostringstream out;
    out << "block_id,kind,params,macs,mac_share\n";
    for (const auto& b : profile.blocks) {
        const double share =
            profile.macs == 0 ? 0.0 : static_cast<double>(b.macs) / static_cast<double>(profile.macs);
        out << b.block_id << ',' << b.kind << ',' << b.params << ',' << b.macs << ','
            << std::fixed << std::setprecision(6) << share << std::defaultfloat << '\n';
    }
    return out.str();
}

std::uint64_t mha_macs(std::uint64_t t, std::uint64_t heads, std::uint64_t hidden,
                       std::uint64_t head_dim) {
    return 4 * t * heads * hidden * head_dim + 2 * t * t * heads * head_dim;
}

std::uint64_t ffn_macs(std::uint64_t t, std::uint64_t hidden, std::uint64_t intermediate) {
    return 2 * t * hidden * intermediate;
}

std::uint64_t conv_macs(std::uint64_t t_out, std::uint64_t c_out, std::uint64_t c_in,
                        std::uint64_t kernel) {
    return t_out * c_out * c_in * kernel;
}

}  // namespace gatecraft
