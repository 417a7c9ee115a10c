#include "gatecraft/extract.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "gatecraft/errors.hpp"
#include "gatecraft/sparsity.hpp"

namespace gatecraft {

namespace {

using Index = std::vector<std::size_t>;

Index kept_indices(const std::vector<bool>& keep) {
    Index out;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) out.push_back(i);
    }
    return out;
}

// Column indices of the kept heads in a [.., heads * head_dim] layout.
Index head_columns(const std::vector<bool>& keep, std::size_t head_dim) {
    Index out;
    for (std::size_t h = 0; h < keep.size(); ++h) {
        if (!keep[h]) continue;
        for (std::size_t c = 0; c < head_dim; ++c) out.push_back(h * head_dim + c);
    }
    return out;
}

// Copies the sub-tensor at the kept indices; a null selection keeps the whole axis.
ad::Tensor gather(const ad::Tensor& t, const std::vector<const Index*>& select) {
    const auto& shape = t.shape();
    const std::size_t rank = shape.size();
    std::vector<Index> idx(rank);
    ad::Shape out_shape(rank);
    for (std::size_t a = 0; a < rank; ++a) {
        if (a < select.size() && select[a]) {
            idx[a] = *select[a];
        } else {
            idx[a].resize(shape[a]);
            for (std::size_t i = 0; i < shape[a]; ++i) idx[a][i] = i;
        }
        out_shape[a] = idx[a].size();
    }
    std::vector<std::size_t> stride(rank, 1);
    for (std::size_t a = rank; a-- > 1;) stride[a - 1] = stride[a] * shape[a];

    const auto src = t.values();
    std::vector<double> out(ad::numel(out_shape));
    std::vector<std::size_t> pos(rank, 0);
    for (std::size_t n = 0; n < out.size(); ++n) {
        std::size_t offset = 0;
        for (std::size_t a = 0; a < rank; ++a) offset += idx[a][pos[a]] * stride[a];
        out[n] = src[offset];
        for (std::size_t a = rank; a-- > 0;) {
            if (++pos[a] < out_shape[a]) break;
            pos[a] = 0;
        }
    }
    return ad::Tensor::parameter(std::move(out_shape), std::move(out));
}

void check_group(const std::vector<bool>& keep, std::size_t expected, const std::string& tensor) {
    if (keep.size() != expected) {
        throw MaskError(tensor, "mask has " + std::to_string(keep.size()) + " entries, weight has " +
                                    std::to_string(expected) + " units");
    }
    if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; })) {
        throw MaskError(tensor, "mask removes every unit");
    }
}

std::size_t count(const std::vector<bool>& keep) {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
}

std::vector<bool> keep_mask(const GateGroup& g, double threshold, GateRule rule,
                            std::vector<std::string>* warnings) {
    const auto p = g.keep_probability_values();
    const auto gates = binary_gates(p, threshold, rule);
    std::vector<bool> keep(gates.size());
    for (std::size_t i = 0; i < gates.size(); ++i) keep[i] = gates[i] != 0.0;
    if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; })) {
        const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        keep[best] = true;
        if (warnings) {
            warnings->push_back("gate group " + g.name() + " would be emptied; keeping unit " +
                                std::to_string(best));
        }
    }
    return keep;
}

nlohmann::json bools_json(const std::vector<bool>& keep) {
    auto arr = nlohmann::json::array();
    for (bool b : keep) arr.push_back(b ? 1 : 0);
    return arr;
}

std::vector<bool> bools_from(const nlohmann::json& arr, const std::string& path) {
    if (!arr.is_array()) throw ConfigError(path, "expected an array of 0/1");
    std::vector<bool> out;
    for (const auto& v : arr) {
        if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1)) {
            throw ConfigError(path, "entries must be 0 or 1");
        }
        out.push_back(v.get<int>() == 1);
    }
    return out;
}

std::vector<std::vector<bool>> groups_from(const nlohmann::json& doc, const std::string& key) {
    const auto it = doc.find(key);
    if (it == doc.end() || !it->is_array()) throw ConfigError("mask." + key, "expected an array");
    std::vector<std::vector<bool>> out;
    for (std::size_t i = 0; i < it->size(); ++i) {
        out.push_back(bools_from((*it)[i], "mask." + key + "[" + std::to_string(i) + "]"));
    }
    return out;
}

double ratio(std::uint64_t kept, std::uint64_t original) {
    return original == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(original);
}

}  // namespace

PruneMask PruneMask::all_ones(const ArchDescriptor& desc) {
    PruneMask m;
    for (const auto& c : desc.conv_layers) m.conv.emplace_back(c.out_channels, true);
    for (const auto& l : desc.transformer_layers) {
        m.heads.emplace_back(l.heads, true);
        m.ffn.emplace_back(l.ffn_intermediate, true);
    }
    m.hidden.assign(desc.hidden, true);
    return m;
}

GateValues PruneMask::as_gates() const {
    const auto tensor = [](const std::vector<bool>& keep) {
        std::vector<double> v(keep.size());
        for (std::size_t i = 0; i < keep.size(); ++i) v[i] = keep[i] ? 1.0 : 0.0;
        return ad::Tensor::constant({keep.size()}, std::move(v));
    };
    GateValues g;
    for (const auto& k : conv) g.conv.push_back(tensor(k));
    for (const auto& k : heads) g.heads.push_back(tensor(k));
    for (const auto& k : ffn) g.ffn.push_back(tensor(k));
    g.hidden = tensor(hidden);
    return g;
}

void PruneMask::validate(const ArchDescriptor& desc) const {
    if (conv.size() != desc.conv_layers.size()) {
        throw MaskError("conv", "mask has " + std::to_string(conv.size()) + " conv groups, model has " +
                                    std::to_string(desc.conv_layers.size()));
    }
    if (heads.size() != desc.transformer_layers.size() ||
        ffn.size() != desc.transformer_layers.size()) {
        throw MaskError("layers", "mask and model disagree on the transformer layer count");
    }
    for (std::size_t i = 0; i < conv.size(); ++i) {
        check_group(conv[i], desc.conv_layers[i].out_channels, "conv" + std::to_string(i) + ".weight");
    }
    for (std::size_t j = 0; j < heads.size(); ++j) {
        const std::string p = "layer" + std::to_string(j);
        check_group(heads[j], desc.transformer_layers[j].heads, p + ".attn.q.weight");
        check_group(ffn[j], desc.transformer_layers[j].ffn_intermediate, p + ".ffn.in.weight");
    }
    check_group(hidden, desc.hidden, "proj.weight");
}

ArchDescriptor PruneMask::shrink(const ArchDescriptor& desc) const {
    validate(desc);
    ArchDescriptor out = desc;
    for (std::size_t i = 0; i < conv.size(); ++i) {
        out.conv_layers[i].out_channels = count(conv[i]);
        if (i + 1 < conv.size()) out.conv_layers[i + 1].in_channels = count(conv[i]);
    }
    for (std::size_t j = 0; j < heads.size(); ++j) {
        out.transformer_layers[j].heads = count(heads[j]);
        out.transformer_layers[j].ffn_intermediate = count(ffn[j]);
    }
    out.hidden = count(hidden);
    return out;
}

std::size_t PruneMask::kept_units() const {
    std::size_t n = count(hidden);
    for (const auto& k : conv) n += count(k);
    for (const auto& k : heads) n += count(k);
    for (const auto& k : ffn) n += count(k);
    return n;
}

std::size_t PruneMask::total_units() const {
    std::size_t n = hidden.size();
    for (const auto& k : conv) n += k.size();
    for (const auto& k : heads) n += k.size();
    for (const auto& k : ffn) n += k.size();
    return n;
}

nlohmann::json to_json(const PruneMask& mask) {
    nlohmann::json doc;
    const auto groups = [](const std::vector<std::vector<bool>>& g) {
        auto arr = nlohmann::json::array();
        for (const auto& k : g) arr.push_back(bools_json(k));
        return arr;
    };
    doc["conv"] = groups(mask.conv);
    doc["heads"] = groups(mask.heads);
    doc["ffn"] = groups(mask.ffn);
    doc["hidden"] = bools_json(mask.hidden);
    return doc;
}

PruneMask mask_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("mask", "expected an object");
    PruneMask m;
    m.conv = groups_from(doc, "conv");
    m.heads = groups_from(doc, "heads");
    m.ffn = groups_from(doc, "ffn");
    const auto hidden = doc.find("hidden");
    if (hidden == doc.end()) throw ConfigError("mask.hidden", "missing");
    m.hidden = bools_from(*hidden, "mask.hidden");
    return m;
}

PruneMask binarize(const GatedModel& model, double threshold, GateRule rule,
                   std::vector<std::string>* warnings) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("threshold", "must lie in (0, 1)");
    }
    PruneMask m;
    for (const auto& g : model.conv_gates()) m.conv.push_back(keep_mask(g, threshold, rule, warnings));
    for (const auto& g : model.head_gates()) m.heads.push_back(keep_mask(g, threshold, rule, warnings));
    for (const auto& g : model.ffn_gates()) m.ffn.push_back(keep_mask(g, threshold, rule, warnings));
    m.hidden = keep_mask(model.hidden_gate(), threshold, rule, warnings);
    return m;
}

ExtractedModel extract(const GatedModel& model, const PruneMask& mask) {
    return extract(model.network(), mask);
}

ExtractedModel extract(const Network& network, const PruneMask& mask) {
    const auto& desc = network.descriptor();
    const ArchDescriptor shrunk = mask.shrink(desc);  // validates
    const auto& w = network.weights();
    const Index hid = kept_indices(mask.hidden);

    NetworkWeights out;
    Index prev;
    for (std::size_t i = 0; i < w.conv.size(); ++i) {
        const Index ch = kept_indices(mask.conv[i]);
        out.conv.push_back({gather(w.conv[i].weight, {nullptr, i == 0 ? nullptr : &prev, &ch}),
                            gather(w.conv[i].bias, {&ch})});
        prev = ch;
    }
    out.proj_w = gather(w.proj_w, {&prev, &hid});
    out.proj_b = gather(w.proj_b, {&hid});
    for (std::size_t j = 0; j < w.layers.size(); ++j) {
        const auto& l = w.layers[j];
        const Index cols = head_columns(mask.heads[j], desc.transformer_layers[j].head_dim);
        const Index units = kept_indices(mask.ffn[j]);
        EncoderLayerWeights e;
        e.ln1_gamma = gather(l.ln1_gamma, {&hid});
        e.ln1_beta = gather(l.ln1_beta, {&hid});
        e.wq = gather(l.wq, {&hid, &cols});
        e.wk = gather(l.wk, {&hid, &cols});
        e.wv = gather(l.wv, {&hid, &cols});
        e.bq = gather(l.bq, {&cols});
        e.bk = gather(l.bk, {&cols});
        e.bv = gather(l.bv, {&cols});
        e.wo = gather(l.wo, {&cols, &hid});
        e.bo = gather(l.bo, {&hid});
        e.ln2_gamma = gather(l.ln2_gamma, {&hid});
        e.ln2_beta = gather(l.ln2_beta, {&hid});
        e.w1 = gather(l.w1, {&hid, &units});
        e.b1 = gather(l.b1, {&units});
        e.w2 = gather(l.w2, {&units, &hid});
        e.b2 = gather(l.b2, {&hid});
        out.layers.push_back(std::move(e));
    }
    out.final_gamma = gather(w.final_gamma, {&hid});
    out.final_beta = gather(w.final_beta, {&hid});
    out.cls_w = gather(w.cls_w, {&hid, nullptr});
    out.cls_b = gather(w.cls_b, {nullptr});
    return {Network(shrunk, network.num_classes(), std::move(out)), desc, mask};
}

std::vector<ReportRow> architecture_report(const ExtractedModel& extracted, double seconds) {
    const auto before = exact_profile(extracted.original, seconds);
    const auto after = exact_profile(extracted.descriptor(), seconds);
    const auto block_macs = [](const Profile& p, const std::string& id) -> std::uint64_t {
        for (const auto& b : p.blocks) {
            if (b.block_id == id) return b.macs;
        }
        return 0;
    };
    const auto& orig = extracted.original;
    const auto& now = extracted.descriptor();
    std::vector<ReportRow> rows;
    for (std::size_t i = 0; i < orig.conv_layers.size(); ++i) {
        const std::string id = "conv" + std::to_string(i);
        rows.push_back({"conv", i, now.conv_layers[i].out_channels, orig.conv_layers[i].out_channels,
                        ratio(block_macs(after, id), block_macs(before, id))});
    }
    for (std::size_t j = 0; j < orig.transformer_layers.size(); ++j) {
        const std::string p = "layer" + std::to_string(j);
        rows.push_back({"heads", j, now.transformer_layers[j].heads, orig.transformer_layers[j].heads,
                        ratio(block_macs(after, p + ".mha"), block_macs(before, p + ".mha"))});
        rows.push_back({"ffn", j, now.transformer_layers[j].ffn_intermediate,
                        orig.transformer_layers[j].ffn_intermediate,
                        ratio(block_macs(after, p + ".ffn"), block_macs(before, p + ".ffn"))});
    }
    rows.push_back({"hidden", 0, now.hidden, orig.hidden, ratio(after.macs, before.macs)});
    return rows;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    out << "layer_kind,index,kept,original,kept_mac_share\n";
    for (const auto& r : rows) {
        out << r.layer_kind << ',' << r.index << ',' << r.kept << ',' << r.original << ','
            << std::fixed << std::setprecision(6) << r.kept_mac_share << std::defaultfloat << '\n';
    }
    return out.str();
}

}  // namespace gatecraft
