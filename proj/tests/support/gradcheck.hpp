#pragma once

// Finite-difference oracle and random op instances shared by the unit and
// acceptance suites. Nothing here calls into backward() except to read the
// analytic side of the comparison.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "gatecraft/autodiff.hpp"
#include "gatecraft/rng.hpp"

namespace gatecraft::testing {

/// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-8) over all
/// leaves, with central differences of step h.
inline double gradient_relative_error(std::span<ad::Tensor> leaves,
                                      const std::function<ad::Tensor()>& objective,
                                      double h = 1e-6) {
    for (auto& leaf : leaves) leaf.zero_grad();
    ad::backward(objective());
    std::vector<double> analytic;
    for (auto& leaf : leaves) {
        const auto g = leaf.grad();
        if (g.empty()) {
            analytic.insert(analytic.end(), leaf.numel(), 0.0);
        } else {
            analytic.insert(analytic.end(), g.begin(), g.end());
        }
    }
    std::vector<double> numeric;
    for (auto& leaf : leaves) {
        auto values = leaf.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = objective().item();
            values[i] = saved - h;
            const double down = objective().item();
            values[i] = saved;
            numeric.push_back((up - down) / (2.0 * h));
        }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

inline std::vector<double> random_values(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (double& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

inline ad::Tensor random_leaf(Rng& rng, ad::Shape shape, double lo = -1.5, double hi = 1.5) {
    const std::size_t n = ad::numel(shape);
    return ad::Tensor::parameter(std::move(shape), random_values(rng, n, lo, hi));
}

struct OpCase {
    ad::OpKind kind;
    std::vector<ad::Tensor> inputs;
    ad::OpAttrs attrs;
};

inline constexpr ad::OpKind kAllOps[] = {
    ad::OpKind::add,     ad::OpKind::sub,       ad::OpKind::mul,     ad::OpKind::div,
    ad::OpKind::matmul,  ad::OpKind::conv1d,    ad::OpKind::sigmoid, ad::OpKind::gelu,
    ad::OpKind::softmax, ad::OpKind::log,       ad::OpKind::exp,     ad::OpKind::clamp,
    ad::OpKind::min,     ad::OpKind::max,       ad::OpKind::sum,     ad::OpKind::mean,
    ad::OpKind::scale,   ad::OpKind::concat,    ad::OpKind::slice,   ad::OpKind::layernorm,
    ad::OpKind::reshape, ad::OpKind::transpose, ad::OpKind::pick,
};

/// A small random, well-conditioned instance of `kind` (log/div inputs kept
/// away from zero, clamp/min/max inputs spread so kinks are not hit).
inline OpCase random_op_case(ad::OpKind kind, Rng& rng) {
    using ad::OpKind;
    OpCase c{kind, {}, {}};
    auto pick_shape_pair = [&]() -> std::pair<ad::Shape, ad::Shape> {
        switch (rng.index(4)) {
            case 0: return {{2, 3, 4}, {2, 3, 4}};
            case 1: return {{2, 3, 4}, {4}};
            case 2: return {{2, 3, 4}, {3, 1}};
            default: return {{3, 1}, {2, 1, 4}};
        }
    };
    switch (kind) {
        case OpKind::add:
        case OpKind::sub:
        case OpKind::mul:
        case OpKind::min:
        case OpKind::max: {
            auto [sa, sb] = pick_shape_pair();
            c.inputs = {random_leaf(rng, sa), random_leaf(rng, sb)};
            break;
        }
        case OpKind::div: {
            auto [sa, sb] = pick_shape_pair();
            c.inputs = {random_leaf(rng, sa), random_leaf(rng, sb, 0.5, 2.0)};
            break;
        }
        case OpKind::matmul: {
            const std::size_t m = 2 + rng.index(3), k = 2 + rng.index(3), n = 2 + rng.index(3);
            switch (rng.index(3)) {
                case 0: c.inputs = {random_leaf(rng, {m, k}), random_leaf(rng, {k, n})}; break;
                case 1: c.inputs = {random_leaf(rng, {2, m, k}), random_leaf(rng, {2, k, n})}; break;
                default: c.inputs = {random_leaf(rng, {2, m, k}), random_leaf(rng, {k, n})}; break;
            }
            break;
        }
        case OpKind::conv1d: {
            const std::size_t cin = 1 + rng.index(3), cout = 2 + rng.index(2);
            const std::size_t kernel = 2 + rng.index(2), t = 9 + rng.index(4);
            c.attrs.stride = 1 + rng.index(3);
            c.inputs = {random_leaf(rng, {2, t, cin}), random_leaf(rng, {kernel, cin, cout})};
            break;
        }
        case OpKind::sigmoid:
        case OpKind::gelu:
        case OpKind::softmax:
        case OpKind::exp:
            c.inputs = {random_leaf(rng, {3, 4})};
            break;
        case OpKind::log:
            c.inputs = {random_leaf(rng, {3, 4}, 0.3, 3.0)};
            break;
        case OpKind::clamp:
            c.attrs.lo = -0.5;
            c.attrs.hi = 0.7;
            c.inputs = {random_leaf(rng, {3, 4}, -2.0, 2.0)};
            break;
        case OpKind::scale:
            c.attrs.factor = -2.0 + 4.0 * rng.uniform();
            c.inputs = {random_leaf(rng, {3, 4})};
            break;
        case OpKind::sum:
        case OpKind::mean:
            if (rng.index(2)) c.attrs.axis = rng.index(3);
            c.attrs.keepdim = rng.index(2) == 1;
            c.inputs = {random_leaf(rng, {2, 3, 4})};
            break;
        case OpKind::concat: {
            const std::size_t axis = rng.index(2);
            c.attrs.axis = axis;
            ad::Shape s1{2, 3}, s2{2, 3};
            s2[axis] = 1 + rng.index(3);
            c.inputs = {random_leaf(rng, s1), random_leaf(rng, s2), random_leaf(rng, s1)};
            break;
        }
        case OpKind::slice: {
            c.attrs.axis = rng.index(3);
            const std::size_t extent = 5;
            c.attrs.begin = rng.index(extent - 1);
            c.attrs.end = c.attrs.begin + 1 + rng.index(extent - c.attrs.begin);
            c.inputs = {random_leaf(rng, {extent, extent, extent})};
            break;
        }
        case OpKind::layernorm:
            c.attrs.eps = 1e-5;
            c.inputs = {random_leaf(rng, {3, 5})};
            if (rng.index(2)) c.inputs.push_back(random_leaf(rng, {5}, 0.2, 1.2));
            break;
        case OpKind::reshape:
            c.attrs.shape = {3, 4};
            c.inputs = {random_leaf(rng, {2, 6})};
            break;
        case OpKind::transpose:
            c.attrs.axis0 = rng.index(3);
            c.attrs.axis1 = rng.index(3);
            c.inputs = {random_leaf(rng, {2, 3, 4})};
            break;
        case OpKind::pick:
            for (int i = 0; i < 4; ++i) c.attrs.indices.push_back(rng.index(5));
            c.inputs = {random_leaf(rng, {4, 5})};
            break;
    }
    return c;
}

/// Relative gradient error of sum(op(inputs) * R) for a fixed random R.
inline double op_gradient_error(OpCase& c, Rng& rng) {
    const auto probe_out = ad::forward_op(c.kind, c.inputs, c.attrs);
    const auto weights =
        ad::Tensor::constant(probe_out.shape(), random_values(rng, probe_out.numel(), -1.0, 1.0));
    auto objective = [&]() { return ad::sum(ad::forward_op(c.kind, c.inputs, c.attrs) * weights); };
    return gradient_relative_error(c.inputs, objective);
}

}  // namespace gatecraft::testing
