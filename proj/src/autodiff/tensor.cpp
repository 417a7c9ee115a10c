#include "gatecraft/autodiff.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace gatecraft::ad {
namespace {

thread_local bool g_grad_enabled = true;

std::string describe_shapes(const std::vector<Shape>& shapes) {
    std::string out;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (i) out += ", ";
        out += shape_string(shapes[i]);
    }
    return out;
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

ShapeError::ShapeError(std::string op, std::vector<Shape> shapes, const std::string& detail)
    : std::invalid_argument(op + ": " + detail + " (inputs " + describe_shapes(shapes) + ")"),
      op_(std::move(op)),
      shapes_(std::move(shapes)) {}

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::div: return "div";
        case OpKind::matmul: return "matmul";
        case OpKind::conv1d: return "conv1d";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::gelu: return "gelu";
        case OpKind::softmax: return "softmax";
        case OpKind::log: return "log";
        case OpKind::exp: return "exp";
        case OpKind::clamp: return "clamp";
        case OpKind::min: return "min";
        case OpKind::max: return "max";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::scale: return "scale";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::layernorm: return "layernorm";
        case OpKind::reshape: return "reshape";
        case OpKind::transpose: return "transpose";
        case OpKind::pick: return "pick";
    }
    return "unknown";
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    if (ad::numel(shape) != values.size()) {
        throw ShapeError("constant", {shape},
                         "expected " + std::to_string(ad::numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = ad::numel(shape);
    return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->values.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw ShapeError("dim", {node_->shape}, "axis " + std::to_string(axis) + " out of range");
    }
    return node_->shape[axis];
}

std::span<const double> Tensor::values() const { return node_->values; }

std::span<double> Tensor::mutable_values() {
    if (!node_->leaf) throw std::logic_error("mutable_values: tensor is not a leaf");
    return node_->values;
}

double Tensor::item() const {
    if (node_->values.size() != 1) throw ShapeError("item", {node_->shape}, "tensor is not scalar");
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->values); }

std::string_view Tensor::op() const { return node_->leaf ? "leaf" : op_name(node_->kind); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

void backward(const Tensor& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (root.numel() != 1) {
        throw ShapeError("backward", {root.shape()}, "root must be a scalar");
    }
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order with each node once.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (detail::Node* node : order) {
        if (!node->leaf) node->grad.assign(node->values.size(), 0.0);
    }
    detail::Node* top = root.node().get();
    if (top->grad.empty()) top->grad.assign(1, 0.0);
    top->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward) node->backward(*node);
    }
}

}  // namespace gatecraft::ad
