#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

// Minimal reverse-mode automatic differentiation over dense row-major double
// arrays. A Tensor is a cheap handle onto a graph node; ops record their
// parents and a backward closure whenever any input requires a gradient.
namespace gatecraft::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Thrown when op inputs do not conform; carries the op name and every input shape.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(std::string op, std::vector<Shape> shapes, const std::string& detail);

    const std::string& op() const noexcept { return op_; }
    const std::vector<Shape>& shapes() const noexcept { return shapes_; }

private:
    std::string op_;
    std::vector<Shape> shapes_;
};

enum class OpKind {
    add,
    sub,
    mul,
    div,
    matmul,
    conv1d,
    sigmoid,
    gelu,
    softmax,
    log,
    exp,
    clamp,
    min,
    max,
    sum,
    mean,
    scale,
    concat,
    slice,
    layernorm,
    reshape,
    transpose,
    pick,
};

std::string_view op_name(OpKind kind);

/// Op parameters; each kind reads only the fields it needs.
struct OpAttrs {
    double factor = 1.0;                // scale
    double lo = 0.0;                    // clamp
    double hi = 1.0;                    // clamp
    std::optional<std::size_t> axis;    // sum, mean (nullopt = all); concat, slice
    bool keepdim = false;               // sum, mean
    std::size_t begin = 0;              // slice
    std::size_t end = 0;                // slice
    std::size_t stride = 1;             // conv1d
    double eps = 1e-5;                  // layernorm
    Shape shape;                        // reshape
    std::size_t axis0 = 0;              // transpose
    std::size_t axis1 = 1;              // transpose
    std::vector<std::size_t> indices;   // pick
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    OpKind kind = OpKind::add;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    /// Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor full(Shape shape, double value);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;

    std::span<const double> values() const;
    /// Writable storage; only leaves may be mutated in place.
    std::span<double> mutable_values();
    double item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    /// Empty until a backward pass reaches this tensor.
    std::span<const double> grad() const;
    void zero_grad();

    /// Same values, no history, no gradient tracking.
    Tensor detach() const;
    std::string_view op() const;

    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> node);

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

/// While alive, newly created op outputs never record history.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

/// Generic dispatcher over every op kind.
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

/// Accumulates d(root)/d(leaf) into every requires-grad leaf reachable from a
/// scalar root. Intermediate gradients are reset at the start of each call.
void backward(const Tensor& root);

// Elementwise binary ops broadcast numpy-style (right-aligned extents, 1 stretches).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// Elementwise minimum/maximum; ties route the gradient to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

/// [..., m, k] x [..., k, n] with equal batch extents, or [..., m, k] x [k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x:[B, T, C_in], w:[K, C_in, C_out] -> [B, floor((T-K)/stride)+1, C_out]; no padding.
Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride);

Tensor sigmoid(const Tensor& x);
/// Exact form x * Phi(x).
Tensor gelu(const Tensor& x);
/// Over the last axis.
Tensor softmax(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
/// Gradient is 1 on the closed interval [lo, hi] and 0 outside it.
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor scale(const Tensor& x, double factor);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Normalizes over the last axis without affine terms. With `weights` (shape
/// [last extent]) the mean and variance are weighted averages, so entries with
/// weight 0 drop out of the statistics entirely.
Tensor layernorm(const Tensor& x, double eps = 1e-5);
Tensor layernorm(const Tensor& x, const Tensor& weights, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
/// x:[N, C] -> [N], selecting x[i, indices[i]].
Tensor pick(const Tensor& x, std::span<const std::size_t> indices);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);
Tensor operator-(double a, const Tensor& b);
Tensor operator-(const Tensor& a);

}  // namespace gatecraft::ad
