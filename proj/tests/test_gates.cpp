#include <cmath>

#include "doctest.h"
#include "gatecraft/gates.hpp"
#include "support/gradcheck.hpp"
#include "support/hard_concrete.hpp"

using namespace gatecraft;

namespace {

double sample_one(double log_alpha, double u, HardConcreteParams params = {}) {
    GateGroup g("g", UnitKind::attn_head, 1, 1, params, log_alpha);
    const double noise[] = {u};
    return g.sample_with_noise(noise).item();
}

}  // namespace

TEST_CASE("sampling saturates for extreme log alpha") {
    for (double u : {0.001, 0.1, 0.5, 0.9, 0.999}) {
        CHECK(sample_one(40.0, u) == 1.0);
        CHECK(sample_one(-40.0, u) == 0.0);
    }
}

TEST_CASE("sample at log alpha 0 and u 0.5") {
    // logit(0.5) = 0, sigmoid(0) = 0.5, stretched to 1.2 * 0.5 - 0.1.
    const double expected = std::clamp(1.2 * 0.5 - 0.1, 0.0, 1.0);
    CHECK(sample_one(0.0, 0.5) == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("samples stay in [0, 1] and hit the interior") {
    Rng rng(3);
    GateGroup g("g", UnitKind::ffn_intermediate, 5000, 1, {}, 0.7);
    const auto z = g.sample(rng);
    std::size_t interior = 0;
    for (double v : z.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (v > 0.0 && v < 1.0) ++interior;
    }
    CHECK(interior > 0);
}

TEST_CASE("keep probability closed form") {
    const HardConcreteParams p;
    GateGroup half("g", UnitKind::attn_head, 1, 1, p, p.keep_offset());
    CHECK(half.keep_probability().item() == doctest::Approx(0.5).epsilon(1e-15));

    GateGroup zero("g", UnitKind::attn_head, 1, 1, p, 0.0);
    CHECK(zero.keep_probability().item() == doctest::Approx(0.8318).epsilon(1e-4));
    CHECK(zero.keep_probability().item() ==
          doctest::Approx(testing::keep_probability_scalar(p, 0.0)).epsilon(1e-14));

    GateGroup closed("g", UnitKind::attn_head, 1, 1, p, -40.0);
    CHECK(closed.keep_probability().item() < 1e-15);
}

TEST_CASE("keep probability is strictly increasing in log alpha") {
    double previous = -1.0;
    for (int i = -30; i <= 30; ++i) {
        GateGroup g("g", UnitKind::attn_head, 1, 1, {}, 0.25 * i);
        const double p = g.keep_probability().item();
        CHECK(p > previous);
        previous = p;
    }
}

TEST_CASE("closed form agrees with Monte-Carlo") {
    Rng rng(11);
    const auto est = testing::monte_carlo_keep_rate({}, 0.0, 200000, rng);
    const double exact = testing::keep_probability_scalar({}, 0.0);
    CHECK(std::abs(est.rate - exact) < 3.0 * est.standard_error);

    HardConcreteParams hot{1.2, -0.3, 1.05};
    const auto est2 = testing::monte_carlo_keep_rate(hot, -0.4, 200000, rng);
    CHECK(std::abs(est2.rate - testing::keep_probability_scalar(hot, -0.4)) <
          3.0 * est2.standard_error);
}

TEST_CASE("gradient of mean sampled gate matches finite differences") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        GateGroup g("g", UnitKind::ffn_intermediate, 6, 1, {}, 0.0);
        auto la = g.log_alpha().mutable_values();
        for (double& v : la) v = -1.5 + 3.0 * rng.uniform();
        const auto u = testing::random_values(rng, 6, 0.05, 0.95);
        ad::Tensor leaf = g.log_alpha();
        const auto objective = [&] { return ad::mean(g.sample_with_noise(u)); };
        std::vector<ad::Tensor> leaves{leaf};
        // Skip draws near the clamp kinks, where finite differences straddle two branches.
        const auto z = g.sample_with_noise(u);
        bool near_kink = false;
        for (double v : z.values()) near_kink |= std::abs(v) < 1e-4 || std::abs(v - 1.0) < 1e-4;
        if (near_kink) continue;
        CHECK(testing::gradient_relative_error(leaves, objective) < 1e-4);
    }
}

TEST_CASE("deterministic gates") {
    const double p[] = {0.9, 0.1};
    CHECK(threshold_gates(p, 0.5) == std::vector<double>{1.0, 0.0});
    const double ties[] = {0.5, 0.5, 0.5};
    CHECK(threshold_gates(ties, 0.5) == std::vector<double>{1.0, 1.0, 1.0});

    const double q[] = {0.2, 0.9, 0.6, 0.3};
    // round(2.0) = 2 kept: the two most probable.
    CHECK(expected_count_gates(q) == std::vector<double>{0.0, 1.0, 1.0, 0.0});

    GateGroup g("g", UnitKind::attn_head, 3, 1, {}, 0.0);
    auto la = g.log_alpha().mutable_values();
    la[0] = 5.0;
    la[1] = -5.0;
    la[2] = 0.0;
    const auto d = g.deterministic(0.5);
    CHECK(std::vector<double>(d.values().begin(), d.values().end()) ==
          std::vector<double>{1.0, 0.0, 1.0});
    CHECK_FALSE(d.requires_grad());
}

TEST_CASE("parameter validation") {
    CHECK_THROWS(GateGroup("g", UnitKind::attn_head, 0, 1));
    CHECK_THROWS(GateGroup("g", UnitKind::attn_head, 2, 1, HardConcreteParams{0.0, -0.1, 1.1}));
    CHECK_THROWS(GateGroup("g", UnitKind::attn_head, 2, 1, HardConcreteParams{0.5, 0.1, 1.1}));
    CHECK_THROWS(GateGroup("g", UnitKind::attn_head, 2, 1, HardConcreteParams{0.5, -0.1, 0.9}));
    CHECK(gate_rule_from_string("expected_count") == GateRule::expected_count);
    CHECK_THROWS(gate_rule_from_string("bogus"));
}
