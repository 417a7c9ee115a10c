#include "gatecraft/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gatecraft/errors.hpp"

namespace gatecraft {

namespace {

ad::Tensor init_weight(ad::Shape shape, std::size_t fan_in, Rng& rng) {
    std::vector<double> v(ad::numel(shape));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return ad::Tensor::parameter(std::move(shape), std::move(v));
}

ad::Tensor zeros(std::size_t n) { return ad::Tensor::parameter({n}, std::vector<double>(n, 0.0)); }
ad::Tensor ones(std::size_t n) { return ad::Tensor::parameter({n}, std::vector<double>(n, 1.0)); }

ad::Tensor copy_leaf(const ad::Tensor& t) {
    return ad::Tensor::parameter(t.shape(), {t.values().begin(), t.values().end()});
}

void check_finite(const ad::Tensor& t, const char* block, std::size_t index) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw NonFiniteError(block, index);
    }
}

void expect_shape(const ad::Tensor& t, const ad::Shape& shape, const std::string& name) {
    if (!t.defined() || t.shape() != shape) {
        throw ad::ShapeError(name, {t.defined() ? t.shape() : ad::Shape{}, shape},
                             "weight does not match the descriptor");
    }
}

// LayerNorm with affine terms. With a hidden gate the statistics are
// gate-weighted and the output is gated.
ad::Tensor gated_layernorm(const ad::Tensor& x, const ad::Tensor& gamma, const ad::Tensor& beta,
                           const ad::Tensor* hidden) {
    if (!hidden) return ad::layernorm(x) * gamma + beta;
    return (ad::layernorm(x, *hidden) * gamma + beta) * *hidden;
}

}  // namespace

GateValues GateValues::ones(const ArchDescriptor& desc) {
    GateValues g;
    for (const auto& c : desc.conv_layers) g.conv.push_back(ad::Tensor::full({c.out_channels}, 1.0));
    for (const auto& l : desc.transformer_layers) {
        g.heads.push_back(ad::Tensor::full({l.heads}, 1.0));
        g.ffn.push_back(ad::Tensor::full({l.ffn_intermediate}, 1.0));
    }
    g.hidden = ad::Tensor::full({desc.hidden}, 1.0);
    return g;
}

Network::Network(ArchDescriptor desc, std::size_t num_classes, Rng& init)
    : desc_(std::move(desc)), num_classes_(num_classes) {
    desc_.validate();
    if (desc_.pos_conv) throw ConfigError("pos_conv", "not supported by the trainable model");
    if (num_classes_ < 2) throw ConfigError("classes", "need at least 2 classes");
    const std::size_t d = desc_.hidden;
    for (const auto& c : desc_.conv_layers) {
        weights_.conv.push_back({init_weight({c.kernel, c.in_channels, c.out_channels},
                                             c.kernel * c.in_channels, init),
                                 zeros(c.out_channels)});
    }
    const std::size_t c_last = desc_.last_conv_channels();
    weights_.proj_w = init_weight({c_last, d}, c_last, init);
    weights_.proj_b = zeros(d);
    for (const auto& l : desc_.transformer_layers) {
        const std::size_t a = l.heads * l.head_dim;
        EncoderLayerWeights w;
        w.ln1_gamma = ones(d);
        w.ln1_beta = zeros(d);
        w.wq = init_weight({d, a}, d, init);
        w.wk = init_weight({d, a}, d, init);
        w.wv = init_weight({d, a}, d, init);
        w.bq = zeros(a);
        w.bk = zeros(a);
        w.bv = zeros(a);
        w.wo = init_weight({a, d}, a, init);
        w.bo = zeros(d);
        w.ln2_gamma = ones(d);
        w.ln2_beta = zeros(d);
        w.w1 = init_weight({d, l.ffn_intermediate}, d, init);
        w.b1 = zeros(l.ffn_intermediate);
        w.w2 = init_weight({l.ffn_intermediate, d}, l.ffn_intermediate, init);
        w.b2 = zeros(d);
        weights_.layers.push_back(std::move(w));
    }
    weights_.final_gamma = ones(d);
    weights_.final_beta = zeros(d);
    weights_.cls_w = init_weight({d, num_classes_}, d, init);
    weights_.cls_b = zeros(num_classes_);
}

Network::Network(ArchDescriptor desc, std::size_t num_classes, NetworkWeights weights)
    : desc_(std::move(desc)), num_classes_(num_classes), weights_(std::move(weights)) {
    desc_.validate();
    if (desc_.pos_conv) throw ConfigError("pos_conv", "not supported by the trainable model");
    check_shapes();
}

void Network::check_shapes() const {
    const std::size_t d = desc_.hidden;
    if (weights_.conv.size() != desc_.conv_layers.size()) {
        throw ad::ShapeError("network", {}, "conv layer count mismatch");
    }
    for (std::size_t i = 0; i < desc_.conv_layers.size(); ++i) {
        const auto& c = desc_.conv_layers[i];
        const std::string p = "conv" + std::to_string(i);
        expect_shape(weights_.conv[i].weight, {c.kernel, c.in_channels, c.out_channels},
                     p + ".weight");
        expect_shape(weights_.conv[i].bias, {c.out_channels}, p + ".bias");
    }
    expect_shape(weights_.proj_w, {desc_.last_conv_channels(), d}, "proj.weight");
    expect_shape(weights_.proj_b, {d}, "proj.bias");
    if (weights_.layers.size() != desc_.transformer_layers.size()) {
        throw ad::ShapeError("network", {}, "transformer layer count mismatch");
    }
    for (std::size_t j = 0; j < weights_.layers.size(); ++j) {
        const auto& l = desc_.transformer_layers[j];
        const auto& w = weights_.layers[j];
        const std::size_t a = l.heads * l.head_dim;
        const std::string p = "layer" + std::to_string(j) + ".";
        expect_shape(w.ln1_gamma, {d}, p + "ln1.gamma");
        expect_shape(w.ln1_beta, {d}, p + "ln1.beta");
        expect_shape(w.wq, {d, a}, p + "attn.q.weight");
        expect_shape(w.wk, {d, a}, p + "attn.k.weight");
        expect_shape(w.wv, {d, a}, p + "attn.v.weight");
        expect_shape(w.bq, {a}, p + "attn.q.bias");
        expect_shape(w.bk, {a}, p + "attn.k.bias");
        expect_shape(w.bv, {a}, p + "attn.v.bias");
        expect_shape(w.wo, {a, d}, p + "attn.out.weight");
        expect_shape(w.bo, {d}, p + "attn.out.bias");
        expect_shape(w.ln2_gamma, {d}, p + "ln2.gamma");
        expect_shape(w.ln2_beta, {d}, p + "ln2.beta");
        expect_shape(w.w1, {d, l.ffn_intermediate}, p + "ffn.in.weight");
        expect_shape(w.b1, {l.ffn_intermediate}, p + "ffn.in.bias");
        expect_shape(w.w2, {l.ffn_intermediate, d}, p + "ffn.out.weight");
        expect_shape(w.b2, {d}, p + "ffn.out.bias");
    }
    expect_shape(weights_.final_gamma, {d}, "final_ln.gamma");
    expect_shape(weights_.final_beta, {d}, "final_ln.beta");
    expect_shape(weights_.cls_w, {d, num_classes_}, "classifier.weight");
    expect_shape(weights_.cls_b, {num_classes_}, "classifier.bias");
}

ad::Tensor Network::encode(const ad::Tensor& waveform, const GateValues* gates) const {
    if (waveform.rank() != 2) {
        throw ad::ShapeError("encode", {waveform.shape()}, "expected a [batch, samples] waveform");
    }
    const std::size_t batch = waveform.dim(0);
    check_finite(waveform, "input", 0);
    const ad::Tensor* hidden = gates && gates->hidden.defined() ? &gates->hidden : nullptr;
    const auto gate_at = [](const std::vector<ad::Tensor>& v, std::size_t i) -> const ad::Tensor* {
        return i < v.size() && v[i].defined() ? &v[i] : nullptr;
    };

    ad::Tensor x = ad::reshape(waveform, {batch, waveform.dim(1), 1});
    for (std::size_t i = 0; i < desc_.conv_layers.size(); ++i) {
        const auto& c = desc_.conv_layers[i];
        x = ad::gelu(ad::conv1d(x, weights_.conv[i].weight, c.stride) + weights_.conv[i].bias);
        if (gates) {
            if (const auto* z = gate_at(gates->conv, i)) x = x * *z;
        }
        check_finite(x, "conv", i);
    }
    const std::size_t frames = x.dim(1);
    if (frames == 0) {
        throw ad::ShapeError("encode", {waveform.shape()}, "input shorter than the conv receptive field");
    }

    x = ad::matmul(x, weights_.proj_w) + weights_.proj_b;
    if (hidden) x = x * *hidden;
    check_finite(x, "projection", 0);

    for (std::size_t j = 0; j < desc_.transformer_layers.size(); ++j) {
        const auto& spec = desc_.transformer_layers[j];
        const auto& w = weights_.layers[j];
        const std::size_t h = spec.heads;
        const std::size_t dh = spec.head_dim;
        if (hidden) x = x * *hidden;

        const auto a = gated_layernorm(x, w.ln1_gamma, w.ln1_beta, hidden);
        const auto split = [&](const ad::Tensor& t) {
            return ad::transpose(ad::reshape(t, {batch, frames, h, dh}), 1, 2);
        };
        const auto q = split(ad::matmul(a, w.wq) + w.bq);
        const auto k = split(ad::matmul(a, w.wk) + w.bk);
        const auto v = split(ad::matmul(a, w.wv) + w.bv);
        const auto scores = ad::scale(ad::matmul(q, ad::transpose(k, 2, 3)),
                                      1.0 / std::sqrt(static_cast<double>(dh)));
        auto ctx = ad::matmul(ad::softmax(scores), v);  // [B, h, T, dh]
        if (gates) {
            if (const auto* z = gate_at(gates->heads, j)) ctx = ctx * ad::reshape(*z, {h, 1, 1});
        }
        ctx = ad::reshape(ad::transpose(ctx, 1, 2), {batch, frames, h * dh});
        x = x + (ad::matmul(ctx, w.wo) + w.bo);

        const auto f = gated_layernorm(x, w.ln2_gamma, w.ln2_beta, hidden);
        auto u = ad::gelu(ad::matmul(f, w.w1) + w.b1);
        if (gates) {
            if (const auto* z = gate_at(gates->ffn, j)) u = u * *z;
        }
        x = x + (ad::matmul(u, w.w2) + w.b2);
        check_finite(x, "layer", j);
    }
    return gated_layernorm(x, weights_.final_gamma, weights_.final_beta, hidden);
}

ad::Tensor Network::classify(const ad::Tensor& encoded) const {
    return ad::matmul(ad::mean(encoded, 1), weights_.cls_w) + weights_.cls_b;
}

std::vector<NamedTensor> Network::named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < weights_.conv.size(); ++i) {
        const std::string p = "conv" + std::to_string(i);
        out.push_back({p + ".weight", weights_.conv[i].weight, true});
        out.push_back({p + ".bias", weights_.conv[i].bias, false});
    }
    out.push_back({"proj.weight", weights_.proj_w, true});
    out.push_back({"proj.bias", weights_.proj_b, false});
    for (std::size_t j = 0; j < weights_.layers.size(); ++j) {
        const auto& w = weights_.layers[j];
        const std::string p = "layer" + std::to_string(j) + ".";
        out.push_back({p + "ln1.gamma", w.ln1_gamma, false});
        out.push_back({p + "ln1.beta", w.ln1_beta, false});
        out.push_back({p + "attn.q.weight", w.wq, true});
        out.push_back({p + "attn.q.bias", w.bq, false});
        out.push_back({p + "attn.k.weight", w.wk, true});
        out.push_back({p + "attn.k.bias", w.bk, false});
        out.push_back({p + "attn.v.weight", w.wv, true});
        out.push_back({p + "attn.v.bias", w.bv, false});
        out.push_back({p + "attn.out.weight", w.wo, true});
        out.push_back({p + "attn.out.bias", w.bo, false});
        out.push_back({p + "ln2.gamma", w.ln2_gamma, false});
        out.push_back({p + "ln2.beta", w.ln2_beta, false});
        out.push_back({p + "ffn.in.weight", w.w1, true});
        out.push_back({p + "ffn.in.bias", w.b1, false});
        out.push_back({p + "ffn.out.weight", w.w2, true});
        out.push_back({p + "ffn.out.bias", w.b2, false});
    }
    out.push_back({"final_ln.gamma", weights_.final_gamma, false});
    out.push_back({"final_ln.beta", weights_.final_beta, false});
    out.push_back({"classifier.weight", weights_.cls_w, true});
    out.push_back({"classifier.bias", weights_.cls_b, false});
    return out;
}

Network Network::clone() const {
    NetworkWeights w;
    for (const auto& c : weights_.conv) w.conv.push_back({copy_leaf(c.weight), copy_leaf(c.bias)});
    w.proj_w = copy_leaf(weights_.proj_w);
    w.proj_b = copy_leaf(weights_.proj_b);
    for (const auto& l : weights_.layers) {
        EncoderLayerWeights c;
        c.ln1_gamma = copy_leaf(l.ln1_gamma);
        c.ln1_beta = copy_leaf(l.ln1_beta);
        c.wq = copy_leaf(l.wq);
        c.wk = copy_leaf(l.wk);
        c.wv = copy_leaf(l.wv);
        c.bq = copy_leaf(l.bq);
        c.bk = copy_leaf(l.bk);
        c.bv = copy_leaf(l.bv);
        c.wo = copy_leaf(l.wo);
        c.bo = copy_leaf(l.bo);
        c.ln2_gamma = copy_leaf(l.ln2_gamma);
        c.ln2_beta = copy_leaf(l.ln2_beta);
        c.w1 = copy_leaf(l.w1);
        c.b1 = copy_leaf(l.b1);
        c.w2 = copy_leaf(l.w2);
        c.b2 = copy_leaf(l.b2);
        w.layers.push_back(std::move(c));
    }
    w.final_gamma = copy_leaf(weights_.final_gamma);
    w.final_beta = copy_leaf(weights_.final_beta);
    w.cls_w = copy_leaf(weights_.cls_w);
    w.cls_b = copy_leaf(weights_.cls_b);
    return Network(desc_, num_classes_, std::move(w));
}

GatedModel::GatedModel(ArchDescriptor desc, std::size_t num_classes, std::uint64_t seed,
                       HardConcreteParams hc, double init_log_alpha)
    : GatedModel(
          [&] {
              Rng init = Rng::derive(seed, 0);
              return Network(std::move(desc), num_classes, init);
          }(),
          hc, init_log_alpha) {}

GatedModel::GatedModel(Network network, HardConcreteParams hc, double init_log_alpha)
    : network_(std::move(network)),
      hc_(hc),
      hidden_gate_("hidden", UnitKind::hidden_dim, network_.descriptor().hidden, 0, hc,
                   init_log_alpha) {
    build_gates(init_log_alpha);
}

GatedModel GatedModel::clone() const {
    GatedModel copy(network_.clone(), hc_);
    const auto src = gate_groups();
    const auto dst = copy.gate_groups();
    for (std::size_t g = 0; g < src.size(); ++g) {
        const auto from = src[g]->log_alpha().values();
        std::copy(from.begin(), from.end(), dst[g]->log_alpha().mutable_values().begin());
    }
    return copy;
}

void GatedModel::build_gates(double init_log_alpha) {
    const auto& desc = network_.descriptor();
    const std::size_t d = desc.hidden;
    const auto& convs = desc.conv_layers;
    for (std::size_t i = 0; i < convs.size(); ++i) {
        // Own kernel slice and bias, plus the consuming slice downstream.
        std::size_t per = convs[i].kernel * convs[i].in_channels + 1;
        per += i + 1 < convs.size() ? convs[i + 1].kernel * convs[i + 1].out_channels : d;
        conv_gates_.emplace_back("conv" + std::to_string(i), UnitKind::conv_channel,
                                 convs[i].out_channels, per, hc_, init_log_alpha);
    }
    std::size_t hidden_per = desc.last_conv_channels() + 1 + 2;  // projection column and bias, final LN
    for (std::size_t j = 0; j < desc.transformer_layers.size(); ++j) {
        const auto& l = desc.transformer_layers[j];
        const std::size_t head_params = 3 * (d * l.head_dim + l.head_dim) + l.head_dim * d;
        head_gates_.emplace_back("layer" + std::to_string(j) + ".heads", UnitKind::attn_head,
                                 l.heads, head_params, hc_, init_log_alpha);
        ffn_gates_.emplace_back("layer" + std::to_string(j) + ".ffn", UnitKind::ffn_intermediate,
                                l.ffn_intermediate, 2 * d + 1, hc_, init_log_alpha);
        const std::size_t a = l.heads * l.head_dim;
        hidden_per += 4 + 3 * a + a + 1 + 2 * l.ffn_intermediate + 1;
    }
    hidden_gate_ = GateGroup("hidden", UnitKind::hidden_dim, d, hidden_per, hc_, init_log_alpha);
}

std::vector<const GateGroup*> GatedModel::gate_groups() const {
    std::vector<const GateGroup*> out;
    for (const auto& g : conv_gates_) out.push_back(&g);
    for (const auto& g : head_gates_) out.push_back(&g);
    for (const auto& g : ffn_gates_) out.push_back(&g);
    out.push_back(&hidden_gate_);
    return out;
}

std::vector<GateGroup*> GatedModel::gate_groups() {
    std::vector<GateGroup*> out;
    for (auto& g : conv_gates_) out.push_back(&g);
    for (auto& g : head_gates_) out.push_back(&g);
    for (auto& g : ffn_gates_) out.push_back(&g);
    out.push_back(&hidden_gate_);
    return out;
}

GateValues GatedModel::sample_gates(Rng& rng) const {
    GateValues g;
    for (const auto& c : conv_gates_) g.conv.push_back(c.sample(rng));
    for (const auto& h : head_gates_) g.heads.push_back(h.sample(rng));
    for (const auto& f : ffn_gates_) g.ffn.push_back(f.sample(rng));
    g.hidden = hidden_gate_.sample(rng);
    return g;
}

GateValues GatedModel::deterministic_gates(double threshold, GateRule rule) const {
    GateValues g;
    for (const auto& c : conv_gates_) g.conv.push_back(c.deterministic(threshold, rule));
    for (const auto& h : head_gates_) g.heads.push_back(h.deterministic(threshold, rule));
    for (const auto& f : ffn_gates_) g.ffn.push_back(f.deterministic(threshold, rule));
    g.hidden = hidden_gate_.deterministic(threshold, rule);
    return g;
}

ad::Tensor gated_forward(const GatedModel& model, const ad::Tensor& waveform, ForwardMode mode,
                         Rng* rng, double threshold, GateRule rule) {
    if (mode == ForwardMode::train) {
        if (!rng) throw std::invalid_argument("gated_forward: train mode needs a random source");
        const auto gates = model.sample_gates(*rng);
        return model.network().encode(waveform, &gates);
    }
    const auto gates = model.deterministic_gates(threshold, rule);
    return model.network().encode(waveform, &gates);
}

ad::Tensor cross_entropy(const ad::Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ad::ShapeError("cross_entropy", {logits.shape(), {labels.size()}},
                             "expected [batch, classes] logits and one label per row");
    }
    const std::size_t rows = logits.dim(0);
    const std::size_t cols = logits.dim(1);
    for (std::size_t label : labels) {
        if (label >= cols) throw std::out_of_range("cross_entropy: label out of range");
    }
    // Subtract the (constant) row maximum before exponentiating.
    std::vector<double> row_max(rows);
    const auto v = logits.values();
    for (std::size_t r = 0; r < rows; ++r) {
        row_max[r] = *std::max_element(v.begin() + r * cols, v.begin() + (r + 1) * cols);
    }
    const auto shifted = logits - ad::Tensor::constant({rows, 1}, std::move(row_max));
    const auto lse = ad::log(ad::sum(ad::exp(shifted), 1));
    return ad::mean(lse - ad::pick(shifted, labels));
}

double accuracy(const ad::Tensor& logits, std::span<const std::size_t> labels) {
    const std::size_t rows = logits.dim(0);
    const std::size_t cols = logits.dim(1);
    const auto v = logits.values();
    std::size_t correct = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto begin = v.begin() + r * cols;
        const auto best = static_cast<std::size_t>(std::max_element(begin, begin + cols) - begin);
        if (best == labels[r]) ++correct;
    }
    return rows == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(rows);
}

}  // namespace gatecraft
