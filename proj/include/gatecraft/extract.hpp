#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gatecraft/arch.hpp"
#include "gatecraft/gates.hpp"
#include "gatecraft/model.hpp"
#include "json.hpp"

namespace gatecraft {

/// Keep flags for every gate group of a model, in gate-group order.
struct PruneMask {
    std::vector<std::vector<bool>> conv;
    std::vector<std::vector<bool>> heads;
    std::vector<std::vector<bool>> ffn;
    std::vector<bool> hidden;

    static PruneMask all_ones(const ArchDescriptor& desc);

    /// 0/1 constant gates for pinned forward passes.
    GateValues as_gates() const;
    /// `desc` with every unit count replaced by its kept count.
    ArchDescriptor shrink(const ArchDescriptor& desc) const;
    /// Throws MaskError naming the first weight the mask cannot be applied to.
    void validate(const ArchDescriptor& desc) const;

    std::size_t kept_units() const;
    std::size_t total_units() const;

    bool operator==(const PruneMask&) const = default;
};

nlohmann::json to_json(const PruneMask& mask);
PruneMask mask_from_json(const nlohmann::json& doc);

/// keep iff keep_probability >= threshold (or the expected-count rule). A group
/// that would be emptied keeps its most probable unit; each such event appends
/// a message to `warnings` when given.
PruneMask binarize(const GatedModel& model, double threshold, GateRule rule = GateRule::threshold,
                   std::vector<std::string>* warnings = nullptr);

/// Gate-free network with pruned units physically removed.
struct ExtractedModel {
    Network network;
    ArchDescriptor original;
    PruneMask mask;

    const ArchDescriptor& descriptor() const noexcept { return network.descriptor(); }
};

ExtractedModel extract(const GatedModel& model, const PruneMask& mask);
/// Extraction from a plain network (e.g. re-extracting an already pruned one).
ExtractedModel extract(const Network& network, const PruneMask& mask);

struct ReportRow {
    /// conv, heads, ffn, hidden
    std::string layer_kind;
    std::size_t index = 0;
    std::size_t kept = 0;
    std::size_t original = 0;
    /// Kept MACs over original MACs of the block; the hidden row uses model totals.
    double kept_mac_share = 0.0;
};

/// One row per conv layer, two per transformer layer (heads, ffn), one for the hidden size.
std::vector<ReportRow> architecture_report(const ExtractedModel& extracted, double seconds = 10.0);
/// layer_kind,index,kept,original,kept_mac_share
std::string report_csv(const std::vector<ReportRow>& rows);

}  // namespace gatecraft
