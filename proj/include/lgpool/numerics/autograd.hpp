// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Ops build nodes eagerly; a node
// records its parents and a backward closure only when at least one parent
// requires gradients, so frozen or constant subgraphs cost nothing.
// backward() walks the recorded graph once in reverse topological order and
// then releases it; calling it again on the same graph is an error.

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lgpool/errors.hpp"
#include "lgpool/numerics/tensor.hpp"

namespace lgp {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
};

template <class T>
class Var {
public:
    using NodePtr = std::shared_ptr<Node<T>>;

    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        return Var(std::move(n));
    }

    static Var parameter(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }

    /// In-place access for optimizers and weight surgery; leaves only.
    Tensor<T>& mutable_value() {
        if (!node_->leaf) throw Error("mutable_value() on a non-leaf node (" + std::string(node_->op) + ")");
        return node_->value;
    }

    /// Accumulated gradient; zeros if nothing flowed here yet.
    Tensor<T> grad() const {
        if (node_->grad.empty()) return Tensor<T>::zeros(node_->value.shape());
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!node_->leaf) throw Error("set_requires_grad on a non-leaf node");
        node_->requires_grad = on;
    }
    void zero_grad() { node_->grad = Tensor<T>(); }

    Node<T>* node() const noexcept { return node_.get(); }
    const NodePtr& ptr() const noexcept { return node_; }

private:
    NodePtr node_;
};

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string("numeric overflow: op '") + op + "' produced a non-finite value");
}

}  // namespace detail

/// Creates an op node. `backward` receives the node; it reads node.grad and
/// accumulates into parents that require gradients.
template <class T, class Backward>
Var<T> make_op(const char* op, Tensor<T> value, std::vector<Var<T>> parents, Backward&& backward) {
    detail::check_finite(value, op);
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    n->leaf = false;
    for (const auto& p : parents) {
        if (p.node()->consumed) {
            throw Error(std::string("op '") + op + "' consumes a node whose graph was already back-propagated");
        }
        n->requires_grad = n->requires_grad || p.requires_grad();
    }
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.ptr());
        n->backward_fn = std::forward<Backward>(backward);
    }
    return Var<T>(std::move(n));
}

/// Nodes reachable from `root` through gradient-carrying edges, parents
/// before children. Each node appears once.
template <class T>
std::vector<Node<T>*> topological_order(const Var<T>& root) {
    std::vector<Node<T>*> order;
    if (!root.requires_grad()) return order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; the pair's index is the next parent to visit.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

/// Accumulates d(loss)/d(leaf) into every reachable leaf's grad.
template <class T>
void backward(const Var<T>& loss) {
    if (!loss.defined()) throw Error("backward on an undefined variable");
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (loss.node()->consumed) {
        throw Error("backward called twice on the same graph; rebuild the forward pass first");
    }
    if (!loss.requires_grad()) return;

    auto order = topological_order(loss);
    loss.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->leaf || !n->backward_fn) continue;
        n->ensure_grad();
        n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        if (n->leaf) continue;
        n->consumed = true;
        n->grad = Tensor<T>();
        n->parents.clear();
        n->backward_fn = nullptr;
    }
}

}  // namespace lgp
