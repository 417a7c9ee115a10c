#include <cmath>
#include <cstring>
#include <limits>

#include "doctest.h"
#include "gatecraft/errors.hpp"
#include "gatecraft/model.hpp"
#include "support/gradcheck.hpp"

using namespace gatecraft;
using ad::Tensor;

namespace {

Tensor random_batch(Rng& rng, std::size_t batch, std::size_t samples) {
    return Tensor::constant({batch, samples}, testing::random_values(rng, batch * samples, -1.0, 1.0));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("gate group sizes follow the descriptor") {
    GatedModel m(toy_descriptor(), 4, 7);
    REQUIRE(m.conv_gates().size() == 3);
    CHECK(m.conv_gates()[2].size() == 16);
    REQUIRE(m.head_gates().size() == 2);
    CHECK(m.head_gates()[1].size() == 8);
    CHECK(m.ffn_gates()[0].size() == 64);
    CHECK(m.hidden_gate().size() == 32);
    CHECK(m.gate_groups().size() == 3 + 2 + 2 + 1);
    // Head slice: Q/K/V columns with biases plus output rows.
    CHECK(m.head_gates()[0].params_per_gate() == 3 * (32 * 4 + 4) + 4 * 32);
    CHECK(m.ffn_gates()[0].params_per_gate() == 2 * 32 + 1);
}

TEST_CASE("all-ones gates reproduce the ungated forward bitwise") {
    Rng rng(1);
    GatedModel m(toy_descriptor(), 4, 2);
    const auto x = random_batch(rng, 3, 400);
    const auto ones = GateValues::ones(m.descriptor());
    const auto gated = m.network().encode(x, &ones);
    const auto plain = m.network().encode(x);
    CHECK(gated.shape() == ad::Shape{3, 32, 32});
    CHECK(bitwise_equal(gated, plain));
}

TEST_CASE("closed heads leave only the residual path and output bias") {
    Rng rng(2);
    GatedModel m(toy_descriptor(), 4, 3);
    const auto x = random_batch(rng, 2, 400);
    auto gates = GateValues::ones(m.descriptor());
    gates.heads[1] = Tensor::full({8}, 0.0);
    const auto gated = m.network().encode(x, &gates);

    Network reference = m.network().clone();
    for (double& v : reference.weights().layers[1].wo.mutable_values()) v = 0.0;
    const auto expected = reference.encode(x);
    CHECK(bitwise_equal(gated, expected));
}

TEST_CASE("train mode is deterministic for a fixed seed") {
    Rng data(3);
    GatedModel m(toy_descriptor(), 4, 4);
    const auto x = random_batch(data, 2, 400);
    Rng a(99), b(99);
    const auto ya = gated_forward(m, x, ForwardMode::train, &a);
    const auto yb = gated_forward(m, x, ForwardMode::train, &b);
    CHECK(bitwise_equal(ya, yb));
    CHECK_THROWS(gated_forward(m, x, ForwardMode::train, nullptr));
}

TEST_CASE("eval mode uses thresholded gates") {
    Rng data(4);
    GatedModel m(toy_descriptor(), 4, 5);
    const auto x = random_batch(data, 2, 400);
    const auto eval = gated_forward(m, x, ForwardMode::eval, nullptr);
    // Every keep probability is about 0.83 at init, so every gate is open.
    const auto ones = GateValues::ones(m.descriptor());
    CHECK(bitwise_equal(eval, m.network().encode(x, &ones)));
}

TEST_CASE("every gate group receives a loss gradient") {
    Rng data(5);
    GatedModel m(toy_descriptor(), 4, 6);
    const auto x = random_batch(data, 4, 400);
    const std::vector<std::size_t> labels{0, 1, 2, 3};
    Rng noise(8);
    const auto logits = m.network().classify(gated_forward(m, x, ForwardMode::train, &noise));
    ad::backward(cross_entropy(logits, labels));
    for (const auto* g : m.gate_groups()) {
        double norm = 0.0;
        for (double v : g->log_alpha().grad()) norm += v * v;
        CHECK_MESSAGE(norm > 0.0, g->name());
    }
}

TEST_CASE("model gradients match finite differences") {
    Rng rng(6);
    ArchDescriptor d;
    d.conv_layers = {{1, 3, 3, 2}, {3, 3, 2, 1}};
    d.hidden = 4;
    d.transformer_layers = {{2, 2, 3}};
    d.sample_rate = 10;
    GatedModel m(d, 3, 11);
    const auto x = random_batch(rng, 2, 12);
    const std::vector<std::size_t> labels{2, 0};
    auto gates = GateValues::ones(d);
    gates.conv[0] = Tensor::parameter({3}, {0.9, 0.4, 0.7});
    gates.heads[0] = Tensor::parameter({2}, {0.3, 0.8});
    gates.ffn[0] = Tensor::parameter({3}, {0.6, 1.0, 0.2});
    gates.hidden = Tensor::parameter({4}, {0.5, 0.9, 0.7, 0.35});
    std::vector<Tensor> leaves{gates.conv[0], gates.heads[0], gates.ffn[0], gates.hidden};
    for (const auto& p : m.network().named_parameters()) leaves.push_back(p.tensor);
    const auto objective = [&] {
        return cross_entropy(m.network().classify(m.network().encode(x, &gates)), labels);
    };
    CHECK(testing::gradient_relative_error(leaves, objective) < 1e-4);
}

TEST_CASE("non-finite activations name the block") {
    Rng rng(7);
    GatedModel m(toy_descriptor(), 4, 8);
    const auto x = random_batch(rng, 1, 400);
    m.network().weights().layers[1].w2.mutable_values()[0] =
        std::numeric_limits<double>::quiet_NaN();
    try {
        m.network().encode(x);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(e.block() == "layer");
        CHECK(e.layer() == 1);
    }
}

TEST_CASE("cross entropy against a direct evaluation") {
    const auto logits = Tensor::constant({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
    const std::vector<std::size_t> labels{1, 0};
    const auto loss = cross_entropy(logits, labels).item();
    const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 2.0;
    const double l1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)) + 1.0;
    CHECK(loss == doctest::Approx((l0 + l1) / 2).epsilon(1e-14));
    CHECK(accuracy(logits, labels) == 0.5);
    const auto huge = Tensor::constant({1, 2}, {1000.0, -1000.0});
    const std::vector<std::size_t> second{1};
    CHECK(std::isfinite(cross_entropy(huge, second).item()));
}

TEST_CASE("construction validates shapes") {
    GatedModel m(toy_descriptor(), 4, 1);
    auto w = m.network().clone().weights();
    w.layers[0].w1 = Tensor::parameter({32, 63}, std::vector<double>(32 * 63, 0.0));
    CHECK_THROWS_AS(Network(toy_descriptor(), 4, w), ad::ShapeError);
    Rng init(1);
    CHECK_THROWS_AS(Network(wav2vec2_base_descriptor(), 4, init), ConfigError);
    CHECK(m.network().named_parameters().size() == 3 * 2 + 2 + 2 * 16 + 2 + 2);
}
