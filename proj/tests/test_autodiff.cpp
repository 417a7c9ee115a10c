#include <cmath>
#include <cstring>

#include "doctest.h"
#include "gatecraft/autodiff.hpp"
#include "support/gradcheck.hpp"

using namespace gatecraft;
using ad::Tensor;

TEST_CASE("shape algebra and analytic values") {
    const auto a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    const auto b = Tensor::constant({3, 4}, std::vector<double>(12, 1.0));
    const auto c = ad::matmul(a, b);
    CHECK(c.shape() == ad::Shape{2, 4});
    CHECK(c.values()[0] == 6.0);
    CHECK(c.values()[7] == 15.0);

    CHECK(ad::sigmoid(Tensor::scalar(0.0)).item() == 0.5);

    const auto x = Tensor::constant({1, 999, 1}, std::vector<double>(999, 1.0));
    const auto w = Tensor::constant({2, 1, 1}, {1.0, 1.0});
    CHECK(ad::conv1d(x, w, 2).shape() == ad::Shape{1, 499, 1});
}

TEST_CASE("basic derivatives") {
    auto x = Tensor::parameter({}, {3.0});
    ad::backward(x * x);
    CHECK(x.grad()[0] == 6.0);

    auto z = Tensor::parameter({}, {0.0});
    ad::backward(ad::sigmoid(z));
    CHECK(z.grad()[0] == 0.25);
}

TEST_CASE("shape mismatch names the op and its inputs") {
    const auto a = Tensor::constant({2, 3}, std::vector<double>(6, 0.0));
    const auto b = Tensor::constant({4, 2}, std::vector<double>(8, 0.0));
    try {
        (void)ad::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ad::ShapeError& e) {
        CHECK(e.op() == "matmul");
        CHECK(e.shapes().size() == 2);
        CHECK(e.shapes()[1] == ad::Shape{4, 2});
        CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)ad::add(a, b), ad::ShapeError);
    const auto x = Tensor::constant({1, 4, 2}, std::vector<double>(8, 0.0));
    const auto w = Tensor::constant({2, 3, 1}, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS((void)ad::conv1d(x, w, 1), ad::ShapeError);
}

TEST_CASE("backward rejects a non-scalar root") {
    auto a = Tensor::parameter({2}, {1.0, 2.0});
    CHECK_THROWS_AS(ad::backward(a * 2.0), ad::ShapeError);
}

TEST_CASE("clamp subgradient is 1 on the closed interval and 0 outside") {
    auto x = Tensor::parameter({5}, {-0.5, 0.0, 0.5, 1.0, 1.5});
    ad::backward(ad::sum(ad::clamp(x, 0.0, 1.0)));
    const std::vector<double> expected{0, 1, 1, 1, 0};
    for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == expected[i]);
}

TEST_CASE("clamp output always lies in [0, 1]") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = testing::random_leaf(rng, {32}, -50.0, 50.0);
        const auto y = ad::clamp(x, 0.0, 1.0);
        for (double v : y.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("every op kind matches central finite differences on 20 random instances") {
    Rng rng(2024);
    for (const auto kind : testing::kAllOps) {
        CAPTURE(ad::op_name(kind));
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            auto c = testing::random_op_case(kind, rng);
            worst = std::max(worst, testing::op_gradient_error(c, rng));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("random composite graph matches finite differences") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Tensor> leaves{testing::random_leaf(rng, {3, 4}), testing::random_leaf(rng, {4, 2}),
                                   testing::random_leaf(rng, {2})};
        auto objective = [&]() {
            auto h = ad::gelu(ad::matmul(leaves[0], leaves[1]) + leaves[2]);
            auto p = ad::softmax(h);
            return ad::mean(ad::log(p + 1.0) * ad::sigmoid(h));
        };
        CHECK(testing::gradient_relative_error(leaves, objective) < 1e-4);
    }
}

TEST_CASE("repeated backward with gradient reset is bitwise reproducible") {
    Rng rng(5);
    auto w = testing::random_leaf(rng, {4, 3});
    auto x = testing::random_leaf(rng, {2, 4});
    const auto loss = ad::sum(ad::softmax(ad::matmul(x, w)) * ad::gelu(ad::matmul(x, w)));
    ad::backward(loss);
    const std::vector<double> first(w.grad().begin(), w.grad().end());
    w.zero_grad();
    x.zero_grad();
    ad::backward(loss);
    REQUIRE(w.grad().size() == first.size());
    CHECK(std::memcmp(first.data(), w.grad().data(), first.size() * sizeof(double)) == 0);
}

TEST_CASE("weighted layernorm with 0/1 weights equals layernorm over the kept columns") {
    Rng rng(8);
    const auto x = testing::random_leaf(rng, {3, 6});
    const auto w = Tensor::constant({6}, {1, 0, 1, 1, 0, 1});
    const auto full = ad::layernorm(x, w);
    std::vector<double> kept;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t j : {0, 2, 3, 5}) kept.push_back(x.values()[r * 6 + j]);
    const auto reduced = ad::layernorm(Tensor::constant({3, 4}, kept));
    std::size_t q = 0;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t j : {0, 2, 3, 5}) CHECK(full.values()[r * 6 + j] == reduced.values()[q++]);
}

TEST_CASE("no-grad guard suppresses history") {
    auto w = Tensor::parameter({2}, {1.0, 2.0});
    {
        ad::NoGradGuard guard;
        const auto y = w * 3.0;
        CHECK_FALSE(y.requires_grad());
    }
    CHECK((w * 3.0).requires_grad());
}

TEST_CASE("forward_op validates arity") {
    const auto a = Tensor::scalar(1.0);
    std::vector<Tensor> one{a};
    CHECK_THROWS_AS((void)ad::forward_op(ad::OpKind::add, one), std::invalid_argument);
}
