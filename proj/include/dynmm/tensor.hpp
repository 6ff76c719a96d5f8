#pragma once

// Dense float64 tensor with a reverse-mode autodiff graph.
//
// Every Tensor is a handle onto a shared node; operations that touch a
// tensor requiring gradients record their parents and a backward rule.
// backward() linearises the reachable graph into a Tape (topological
// order) and replays it in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dynmm {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    static Tensor vector(std::vector<double> values, bool requires_grad = false) {
        auto n = values.size();
        return Tensor({n}, std::move(values), requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t row, std::size_t col) const { return node_->data[row * node_->shape[1] + col]; }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Copy of the values with no graph history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    void backward() const;

    // Internal: graph access for ops.
    const detail::NodePtr& node() const { return node_; }

    static Tensor from_node(detail::NodePtr node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

   private:
    detail::NodePtr node_;
};

// Ordered list of recorded operations reachable from a root; every node
// appears after all of its inputs.
class Tape {
   public:
    static Tape record(const Tensor& root) {
        Tape tape;
        std::unordered_set<const detail::Node*> visited;
        // iterative post-order DFS
        std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
        stack.emplace_back(root.node(), 0);
        visited.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                auto parent = node->parents[next++];
                if (parent->requires_grad && visited.insert(parent.get()).second) {
                    stack.emplace_back(std::move(parent), 0);
                }
            } else {
                tape.nodes_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    const std::vector<detail::NodePtr>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

   private:
    std::vector<detail::NodePtr> nodes_;
};

inline void Tensor::backward() const {
    if (numel() != 1) {
        throw DimensionError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!requires_grad()) return;
    auto tape = Tape::record(*this);
    const auto& nodes = tape.nodes();
    // Interior gradients are per-call; leaves accumulate across calls.
    for (const auto& n : nodes) {
        if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        auto& n = **it;
        if (!n.is_leaf()) n.backward(n);
    }
}

// Counts scalar multiply-accumulates performed by counted ops on the
// current thread while alive. Counted: matmul/affine (m*k*n) and
// elementwise add/sub/mul (one per output element). Everything else,
// including routing and losses, is free.
class MacCounter {
   public:
    MacCounter() : previous_(active()) { active() = this; }
    ~MacCounter() { active() = previous_; }
    MacCounter(const MacCounter&) = delete;
    MacCounter& operator=(const MacCounter&) = delete;

    std::uint64_t count() const { return count_; }

    static void add(std::uint64_t macs) {
        for (auto* c = active(); c != nullptr; c = c->previous_) c->count_ += macs;
    }

   private:
    static MacCounter*& active() {
        thread_local MacCounter* current = nullptr;
        return current;
    }

    MacCounter* previous_;
    std::uint64_t count_ = 0;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Builds an op result. Parents and the backward rule are attached only
// when some input requires gradients.
inline Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(values), false);
    bool track = false;
    for (const auto& t : inputs) track = track || t.requires_grad();
    if (track) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (const auto& t : inputs) node.parents.push_back(t.node());
        node.backward = std::move(backward);
    }
    return out;
}

}  // namespace detail

}  // namespace dynmm
