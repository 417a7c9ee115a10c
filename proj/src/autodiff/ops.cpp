#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "gatecraft/autodiff.hpp"
#include "gatecraft/kernels.hpp"

namespace gatecraft::ad {
namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::vector<double>& grad_buffer(Node& node) {
    if (node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
    return node.grad;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_result(OpKind kind, Shape shape, std::vector<double> values,
                   std::vector<NodePtr> parents, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->kind = kind;
    if (backward) {
        node->requires_grad = true;
        node->leaf = false;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor::from_node(std::move(node));
}

void require_defined(std::string_view op, std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (!t->defined()) throw std::invalid_argument(std::string(op) + ": undefined input");
    }
}

// ---------------------------------------------------------------- broadcasting

// How an operand's flat index is recovered from the output's flat index.
struct OperandMap {
    enum class Mode { identity, cyclic, table } mode = Mode::identity;
    std::size_t period = 1;           // cyclic: operand matches the trailing output extents
    std::vector<std::size_t> table;   // general broadcast

    std::size_t operator()(std::size_t i) const {
        switch (mode) {
            case Mode::identity: return i;
            case Mode::cyclic: return i % period;
            case Mode::table: return table[i];
        }
        return i;
    }
};

struct Broadcast {
    Shape out;
    OperandMap a;
    OperandMap b;
};

std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    const std::size_t rank = out.size();
    const std::size_t offset = rank - in.size();
    std::vector<std::size_t> strides(rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[offset + i] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    const std::size_t total = numel(out);
    std::vector<std::size_t> index(total);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t pos = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        index[flat] = pos;
        for (std::size_t d = rank; d-- > 0;) {
            pos += strides[d];
            if (++counter[d] < out[d]) break;
            pos -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    return index;
}

OperandMap operand_map(const Shape& in, const Shape& out) {
    OperandMap map;
    if (in == out) return map;
    // Leading unit extents do not change the flat layout.
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    const std::size_t tail = in.size() - lead;
    if (std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                   out.end() - static_cast<std::ptrdiff_t>(tail))) {
        map.mode = OperandMap::Mode::cyclic;
        map.period = numel(in);
        return map;
    }
    map.mode = OperandMap::Mode::table;
    map.table = broadcast_index(in, out);
    return map;
}

Broadcast broadcast(OpKind kind, const Shape& a, const Shape& b) {
    Broadcast plan;
    const std::size_t rank = std::max(a.size(), b.size());
    plan.out.assign(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op_name(kind)), {a, b},
                             "extents " + std::to_string(da) + " and " + std::to_string(db) +
                                 " at output axis " + std::to_string(i) + " do not broadcast");
        }
        plan.out[i] = std::max(da, db);
    }
    plan.a = operand_map(a, plan.out);
    plan.b = operand_map(b, plan.out);
    return plan;
}

// f(x, y) -> value; dfa/dfb(x, y, out) -> partial derivative w.r.t. x / y.
template <class F, class DA, class DB>
Tensor binary_op(OpKind kind, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
    require_defined(op_name(kind), {&a, &b});
    auto plan = std::make_shared<Broadcast>(broadcast(kind, a.shape(), b.shape()));
    const std::size_t n = numel(plan->out);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[plan->a(i)], bv[plan->b(i)]);
    std::function<void(Node&)> bw;
    if (any_requires_grad({&a, &b})) {
        bw = [plan, dfa, dfb](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            const std::size_t n = self.values.size();
            if (pa.requires_grad) {
                auto& ga = grad_buffer(pa);
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t ja = plan->a(i);
                    ga[ja] += self.grad[i] * dfa(pa.values[ja], pb.values[plan->b(i)], self.values[i]);
                }
            }
            if (pb.requires_grad) {
                auto& gb = grad_buffer(pb);
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t jb = plan->b(i);
                    gb[jb] += self.grad[i] * dfb(pa.values[plan->a(i)], pb.values[jb], self.values[i]);
                }
            }
        };
    }
    return make_result(kind, plan->out, std::move(out), {a.node(), b.node()}, std::move(bw));
}

// f(x) -> value; df(x, out) -> derivative.
template <class F, class D>
Tensor unary_op(OpKind kind, const Tensor& x, F f, D df) {
    require_defined(op_name(kind), {&x});
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [df](Node& self) {
            Node& px = *self.parents[0];
            auto& gx = grad_buffer(px);
            for (std::size_t i = 0; i < self.values.size(); ++i) {
                gx[i] += self.grad[i] * df(px.values[i], self.values[i]);
            }
        };
    }
    return make_result(kind, x.shape(), std::move(out), {x.node()}, std::move(bw));
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void check_axis(OpKind kind, const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op_name(kind)), {shape},
                         "axis " + std::to_string(axis) + " out of range");
    }
}

Tensor reduce_axis(OpKind kind, const Tensor& x, std::size_t axis, bool keepdim, double factor) {
    require_defined(op_name(kind), {&x});
    check_axis(kind, x.shape(), axis);
    const AxisSplit s = split_at(x.shape(), axis);
    const auto xv = x.values();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t e = 0; e < s.extent; ++e) {
            const double* row = xv.data() + (o * s.extent + e) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
        }
    }
    if (factor != 1.0) {
        for (double& v : out) v *= factor;
    }
    Shape shape = x.shape();
    if (keepdim) {
        shape[axis] = 1;
    } else {
        shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [s, factor](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t e = 0; e < s.extent; ++e) {
                    double* dst = gx.data() + (o * s.extent + e) * s.inner;
                    const double* g = self.grad.data() + o * s.inner;
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i] * factor;
                }
            }
        };
    }
    return make_result(kind, std::move(shape), std::move(out), {x.node()}, std::move(bw));
}

Tensor reduce_all(OpKind kind, const Tensor& x, double factor) {
    require_defined(op_name(kind), {&x});
    double total = 0.0;
    for (double v : x.values()) total += v;
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [factor](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            const double g = self.grad[0] * factor;
            for (double& v : gx) v += g;
        };
    }
    return make_result(kind, {}, {total * factor}, {x.node()}, std::move(bw));
}

Tensor layernorm_impl(const Tensor& x, const Tensor* weights, double eps) {
    require_defined("layernorm", {&x});
    if (x.rank() == 0) throw ShapeError("layernorm", {x.shape()}, "needs at least one axis");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / std::max<std::size_t>(cols, 1);
    if (weights && weights->shape() != Shape{cols}) {
        throw ShapeError("layernorm", {x.shape(), weights->shape()},
                         "weights must have shape [" + std::to_string(cols) + "]");
    }
    const auto xv = x.values();
    std::vector<double> wv(cols, 1.0);
    if (weights) std::copy(weights->values().begin(), weights->values().end(), wv.begin());
    double total_weight = 0.0;
    for (double w : wv) total_weight += w;
    // All-zero weights (every hidden gate closed) would divide by zero; the
    // caller masks the output anyway, so any finite value will do.
    if (!(total_weight > 0.0)) total_weight = 1e-12;

    std::vector<double> out(xv.size());
    // Per-row inverse standard deviation and variance, kept for backward.
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    auto variance = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += wv[j] * in[j];
        mu /= total_weight;
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double c = in[j] - mu;
            var += wv[j] * c * c;
        }
        var /= total_weight;
        const double rs = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = rs;
        (*variance)[r] = var;
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = (in[j] - mu) * rs;
    }

    std::vector<NodePtr> parents{x.node()};
    if (weights) parents.push_back(weights->node());
    std::function<void(Node&)> bw;
    const bool track = weights ? any_requires_grad({&x, weights}) : any_requires_grad({&x});
    if (track) {
        bw = [rows, cols, wv, total_weight, inv_std, variance](Node& self) {
            Node& px = *self.parents[0];
            Node* pw = self.parents.size() > 1 ? self.parents[1].get() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.values.data() + r * cols;
                const double* g = self.grad.data() + r * cols;
                double g_sum = 0.0;
                double gy_sum = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    g_sum += g[j];
                    gy_sum += g[j] * y[j];
                }
                const double rs = (*inv_std)[r];
                if (px.requires_grad) {
                    auto& gx = grad_buffer(px);
                    for (std::size_t j = 0; j < cols; ++j) {
                        gx[r * cols + j] +=
                            rs * (g[j] - wv[j] / total_weight * (g_sum + y[j] * gy_sum));
                    }
                }
                if (pw && pw->requires_grad) {
                    auto& gw = grad_buffer(*pw);
                    const double v_ratio = (*variance)[r] * rs * rs;
                    for (std::size_t j = 0; j < cols; ++j) {
                        gw[j] -= (y[j] * g_sum + 0.5 * (y[j] * y[j] - v_ratio) * gy_sum) /
                                 total_weight;
                    }
                }
            }
        };
    }
    return make_result(OpKind::layernorm, x.shape(), std::move(out), std::move(parents),
                       std::move(bw));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi * kInvSqrt2;
}

void expect_inputs(OpKind kind, std::span<const Tensor> inputs, std::size_t lo, std::size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi) {
        throw std::invalid_argument(std::string(op_name(kind)) + ": expected " +
                                    std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                                    " inputs, got " + std::to_string(inputs.size()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        OpKind::add, a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        OpKind::sub, a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        OpKind::mul, a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        OpKind::div, a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary_op(
        OpKind::min, a, b, [](double x, double y) { return std::min(x, y); },
        [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary_op(
        OpKind::max, a, b, [](double x, double y) { return std::max(x, y); },
        [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined("matmul", {&a, &b});
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul", {a.shape(), b.shape()}, "operands must have rank >= 2");
    }
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t k = a.shape().back();
    const std::size_t kb = b.shape()[b.rank() - 2];
    const std::size_t n = b.shape().back();
    if (k != kb) {
        throw ShapeError("matmul", {a.shape(), b.shape()},
                         "inner extents " + std::to_string(k) + " and " + std::to_string(kb) +
                             " differ");
    }
    const bool shared_rhs = b.rank() == 2;
    if (!shared_rhs && !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                                   b.shape().end() - 2)) {
        throw ShapeError("matmul", {a.shape(), b.shape()}, "batch extents differ");
    }
    const std::size_t batch = a.numel() / (m * k);
    Shape shape = a.shape();
    shape.back() = n;
    std::vector<double> out(batch * m * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    if (shared_rhs) {
        kernels::parallel::gemm_nn(batch * m, n, k, av, k, bv, n, out.data(), n);
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            kernels::parallel::gemm_nn(m, n, k, av + i * m * k, k, bv + i * k * n, n,
                                       out.data() + i * m * n, n);
        }
    }
    std::function<void(Node&)> bw;
    if (any_requires_grad({&a, &b})) {
        bw = [batch, m, n, k, shared_rhs](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            const double* g = self.grad.data();
            if (shared_rhs) {
                const std::size_t rows = batch * m;
                if (pa.requires_grad) {
                    kernels::parallel::gemm_nt(rows, k, n, g, n, pb.values.data(), n,
                                               grad_buffer(pa).data(), k);
                }
                if (pb.requires_grad) {
                    kernels::parallel::gemm_tn(k, n, rows, pa.values.data(), k, g, n,
                                               grad_buffer(pb).data(), n);
                }
                return;
            }
            for (std::size_t i = 0; i < batch; ++i) {
                const double* gi = g + i * m * n;
                if (pa.requires_grad) {
                    kernels::parallel::gemm_nt(m, k, n, gi, n, pb.values.data() + i * k * n, n,
                                               grad_buffer(pa).data() + i * m * k, k);
                }
                if (pb.requires_grad) {
                    kernels::parallel::gemm_tn(k, n, m, pa.values.data() + i * m * k, k, gi, n,
                                               grad_buffer(pb).data() + i * k * n, n);
                }
            }
        };
    }
    return make_result(OpKind::matmul, std::move(shape), std::move(out), {a.node(), b.node()},
                       std::move(bw));
}

Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride) {
    require_defined("conv1d", {&x, &w});
    if (x.rank() != 3 || w.rank() != 3) {
        throw ShapeError("conv1d", {x.shape(), w.shape()},
                         "expected x:[B,T,C_in] and w:[K,C_in,C_out]");
    }
    const std::size_t batch = x.dim(0);
    const std::size_t t_in = x.dim(1);
    const std::size_t c_in = x.dim(2);
    const std::size_t kernel = w.dim(0);
    const std::size_t c_out = w.dim(2);
    if (w.dim(1) != c_in) {
        throw ShapeError("conv1d", {x.shape(), w.shape()},
                         "input channels " + std::to_string(c_in) + " vs weight channels " +
                             std::to_string(w.dim(1)));
    }
    if (stride == 0) throw ShapeError("conv1d", {x.shape(), w.shape()}, "stride must be >= 1");
    const std::size_t t_out = kernels::conv_output_length(t_in, kernel, stride);
    if (t_out == 0) {
        throw ShapeError("conv1d", {x.shape(), w.shape()},
                         "input length " + std::to_string(t_in) + " shorter than kernel " +
                             std::to_string(kernel));
    }
    std::vector<double> out(batch * t_out * c_out);
    kernels::parallel::conv1d_forward(x.values().data(), batch, t_in, c_in, w.values().data(),
                                      kernel, c_out, stride, out.data());
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x, &w})) {
        bw = [=](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            if (px.requires_grad) {
                kernels::parallel::conv1d_backward_input(self.grad.data(), batch, t_in, c_in,
                                                         pw.values.data(), kernel, c_out, stride,
                                                         grad_buffer(px).data());
            }
            if (pw.requires_grad) {
                kernels::parallel::conv1d_backward_weight(px.values.data(), batch, t_in, c_in,
                                                          self.grad.data(), kernel, c_out, stride,
                                                          grad_buffer(pw).data());
            }
        };
    }
    return make_result(OpKind::conv1d, {batch, t_out, c_out}, std::move(out),
                       {x.node(), w.node()}, std::move(bw));
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        OpKind::sigmoid, x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        OpKind::gelu, x, [](double v) { return v * normal_cdf(v); },
        [](double v, double) { return normal_cdf(v) + v * normal_pdf(v); });
}

Tensor softmax(const Tensor& x) {
    require_defined("softmax", {&x});
    if (x.rank() == 0) throw ShapeError("softmax", {x.shape()}, "needs at least one axis");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = cols ? x.numel() / cols : 0;
    std::vector<double> out(x.numel());
    kernels::parallel::softmax_rows(x.values().data(), rows, cols, out.data());
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [rows, cols](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.values.data() + r * cols;
                const double* g = self.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += y[j] * (g[j] - dot);
            }
        };
    }
    return make_result(OpKind::softmax, x.shape(), std::move(out), {x.node()}, std::move(bw));
}

Tensor log(const Tensor& x) {
    return unary_op(
        OpKind::log, x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        OpKind::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
    return unary_op(
        OpKind::clamp, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return v >= lo && v <= hi ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary_op(
        OpKind::scale, x, [factor](double v) { return v * factor; },
        [factor](double, double) { return factor; });
}

Tensor sum(const Tensor& x) { return reduce_all(OpKind::sum, x, 1.0); }

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
    return reduce_axis(OpKind::sum, x, axis, keepdim, 1.0);
}

Tensor mean(const Tensor& x) {
    require_defined("mean", {&x});
    return reduce_all(OpKind::mean, x, 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
    require_defined("mean", {&x});
    check_axis(OpKind::mean, x.shape(), axis);
    return reduce_axis(OpKind::mean, x, axis, keepdim, 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    std::vector<Shape> shapes;
    for (const Tensor& p : parts) {
        if (!p.defined()) throw std::invalid_argument("concat: undefined input");
        shapes.push_back(p.shape());
    }
    const Shape& first = parts[0].shape();
    check_axis(OpKind::concat, first, axis);
    Shape shape = first;
    shape[axis] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw ShapeError("concat", shapes, "extents differ off the concat axis");
        shape[axis] += s[axis];
    }
    const AxisSplit whole = split_at(shape, axis);
    std::vector<double> out(numel(shape));
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t width = p.shape()[axis] * whole.inner;
        widths.push_back(width);
        const auto pv = p.values();
        for (std::size_t o = 0; o < whole.outer; ++o) {
            std::copy_n(pv.data() + o * width, width,
                        out.data() + o * whole.extent * whole.inner + offset);
        }
        offset += width;
    }
    std::vector<NodePtr> parents;
    bool track = false;
    for (const Tensor& p : parts) {
        parents.push_back(p.node());
        track = track || p.requires_grad();
    }
    std::function<void(Node&)> bw;
    if (track && grad_enabled()) {
        bw = [whole, widths](Node& self) {
            std::size_t offset = 0;
            for (std::size_t i = 0; i < self.parents.size(); ++i) {
                Node& p = *self.parents[i];
                if (p.requires_grad) {
                    auto& gp = grad_buffer(p);
                    for (std::size_t o = 0; o < whole.outer; ++o) {
                        const double* src =
                            self.grad.data() + o * whole.extent * whole.inner + offset;
                        double* dst = gp.data() + o * widths[i];
                        for (std::size_t j = 0; j < widths[i]; ++j) dst[j] += src[j];
                    }
                }
                offset += widths[i];
            }
        };
    }
    return make_result(OpKind::concat, std::move(shape), std::move(out), std::move(parents),
                       std::move(bw));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    require_defined("slice", {&x});
    check_axis(OpKind::slice, x.shape(), axis);
    if (begin >= end || end > x.dim(axis)) {
        throw ShapeError("slice", {x.shape()},
                         "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") invalid for extent " + std::to_string(x.dim(axis)));
    }
    const AxisSplit s = split_at(x.shape(), axis);
    const std::size_t width = (end - begin) * s.inner;
    const std::size_t skip = begin * s.inner;
    std::vector<double> out(s.outer * width);
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(xv.data() + o * s.extent * s.inner + skip, width, out.data() + o * width);
    }
    Shape shape = x.shape();
    shape[axis] = end - begin;
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [s, width, skip](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            for (std::size_t o = 0; o < s.outer; ++o) {
                double* dst = gx.data() + o * s.extent * s.inner + skip;
                const double* src = self.grad.data() + o * width;
                for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
            }
        };
    }
    return make_result(OpKind::slice, std::move(shape), std::move(out), {x.node()}, std::move(bw));
}

Tensor layernorm(const Tensor& x, double eps) { return layernorm_impl(x, nullptr, eps); }

Tensor layernorm(const Tensor& x, const Tensor& weights, double eps) {
    require_defined("layernorm", {&weights});
    return layernorm_impl(x, &weights, eps);
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_defined("reshape", {&x});
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape", {x.shape(), shape}, "element counts differ");
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        };
    }
    return make_result(OpKind::reshape, std::move(shape), std::move(out), {x.node()},
                       std::move(bw));
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
    require_defined("transpose", {&x});
    check_axis(OpKind::transpose, x.shape(), axis0);
    check_axis(OpKind::transpose, x.shape(), axis1);
    Shape shape = x.shape();
    std::swap(shape[axis0], shape[axis1]);
    // Input stride for each output axis.
    std::vector<std::size_t> in_strides(shape.size());
    std::size_t stride = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        in_strides[i] = stride;
        stride *= x.shape()[i];
    }
    std::swap(in_strides[axis0], in_strides[axis1]);
    auto index = std::make_shared<std::vector<std::size_t>>();
    {
        const std::size_t total = numel(shape);
        index->assign(total, 0);
        std::vector<std::size_t> counter(shape.size(), 0);
        std::size_t pos = 0;
        for (std::size_t flat = 0; flat < total; ++flat) {
            (*index)[flat] = pos;
            for (std::size_t d = shape.size(); d-- > 0;) {
                pos += in_strides[d];
                if (++counter[d] < shape[d]) break;
                pos -= in_strides[d] * shape[d];
                counter[d] = 0;
            }
        }
    }
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index)[i]];
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [index](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*index)[i]] += self.grad[i];
        };
    }
    return make_result(OpKind::transpose, std::move(shape), std::move(out), {x.node()},
                       std::move(bw));
}

Tensor pick(const Tensor& x, std::span<const std::size_t> indices) {
    require_defined("pick", {&x});
    if (x.rank() != 2 || indices.size() != x.dim(0)) {
        throw ShapeError("pick", {x.shape(), {indices.size()}},
                         "expected x:[N,C] with N indices");
    }
    const std::size_t cols = x.dim(1);
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= cols) {
            throw ShapeError("pick", {x.shape()},
                             "index " + std::to_string(idx[i]) + " out of range at row " +
                                 std::to_string(i));
        }
        out[i] = x.values()[i * cols + idx[i]];
    }
    std::function<void(Node&)> bw;
    if (any_requires_grad({&x})) {
        bw = [idx, cols](Node& self) {
            auto& gx = grad_buffer(*self.parents[0]);
            for (std::size_t i = 0; i < idx.size(); ++i) gx[i * cols + idx[i]] += self.grad[i];
        };
    }
    return make_result(OpKind::pick, {idx.size()}, std::move(out), {x.node()}, std::move(bw));
}

Tensor forward_op(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
    switch (kind) {
        case OpKind::add: expect_inputs(kind, in, 2, 2); return add(in[0], in[1]);
        case OpKind::sub: expect_inputs(kind, in, 2, 2); return sub(in[0], in[1]);
        case OpKind::mul: expect_inputs(kind, in, 2, 2); return mul(in[0], in[1]);
        case OpKind::div: expect_inputs(kind, in, 2, 2); return div(in[0], in[1]);
        case OpKind::min: expect_inputs(kind, in, 2, 2); return minimum(in[0], in[1]);
        case OpKind::max: expect_inputs(kind, in, 2, 2); return maximum(in[0], in[1]);
        case OpKind::matmul: expect_inputs(kind, in, 2, 2); return matmul(in[0], in[1]);
        case OpKind::conv1d:
            expect_inputs(kind, in, 2, 2);
            return conv1d(in[0], in[1], attrs.stride);
        case OpKind::sigmoid: expect_inputs(kind, in, 1, 1); return sigmoid(in[0]);
        case OpKind::gelu: expect_inputs(kind, in, 1, 1); return gelu(in[0]);
        case OpKind::softmax: expect_inputs(kind, in, 1, 1); return softmax(in[0]);
        case OpKind::log: expect_inputs(kind, in, 1, 1); return log(in[0]);
        case OpKind::exp: expect_inputs(kind, in, 1, 1); return exp(in[0]);
        case OpKind::clamp:
            expect_inputs(kind, in, 1, 1);
            return clamp(in[0], attrs.lo, attrs.hi);
        case OpKind::scale: expect_inputs(kind, in, 1, 1); return scale(in[0], attrs.factor);
        case OpKind::sum:
            expect_inputs(kind, in, 1, 1);
            return attrs.axis ? sum(in[0], *attrs.axis, attrs.keepdim) : sum(in[0]);
        case OpKind::mean:
            expect_inputs(kind, in, 1, 1);
            return attrs.axis ? mean(in[0], *attrs.axis, attrs.keepdim) : mean(in[0]);
        case OpKind::concat:
            expect_inputs(kind, in, 1, std::max<std::size_t>(in.size(), 1));
            return concat(in, attrs.axis.value_or(0));
        case OpKind::slice:
            expect_inputs(kind, in, 1, 1);
            return slice(in[0], attrs.axis.value_or(0), attrs.begin, attrs.end);
        case OpKind::layernorm:
            expect_inputs(kind, in, 1, 2);
            return in.size() == 2 ? layernorm(in[0], in[1], attrs.eps) : layernorm(in[0], attrs.eps);
        case OpKind::reshape: expect_inputs(kind, in, 1, 1); return reshape(in[0], attrs.shape);
        case OpKind::transpose:
            expect_inputs(kind, in, 1, 1);
            return transpose(in[0], attrs.axis0, attrs.axis1);
        case OpKind::pick: expect_inputs(kind, in, 1, 1); return pick(in[0], attrs.indices);
    }
    throw std::invalid_argument("forward_op: unknown op kind");
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor operator*(const Tensor& a, double b) { return scale(a, b); }
Tensor operator*(double a, const Tensor& b) { return scale(b, a); }
Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

}  // namespace gatecraft::ad
