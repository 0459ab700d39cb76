#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stylebrush/core/tensor.hpp"

namespace stylebrush::ag {

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Tensor<T>&)> backward;

    void accumulate(const Tensor<T>& g) {
        if (grad.empty() && !value.empty()) {
            grad = g;
            return;
        }
        T* dst = grad.data();
        const T* src = g.data();
        for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
    }

    /// Gradient buffer for in-place accumulation by backward closures.
    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a node of the computation graph. Copies share the node.
template <class T>
class Var {
public:
    Var() : node_(std::make_shared<Node<T>>()) {}

    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    bool requires_grad() const { return node_->requires_grad; }

    /// Gradient, or a zero tensor when backward never reached this node.
    Tensor<T> grad() const { return node_->grad.empty() ? Tensor<T>(value().shape()) : node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    Var detach() const { return Var(node_->value, false); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds the output node of an op. Graph edges are only recorded when
/// recording is enabled and at least one input requires a gradient.
template <class T, class Backward>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward&& backward) {
    Var<T> out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) node.inputs.push_back(in.node());
    node.backward = std::forward<Backward>(backward);
    return out;
}

template <class T>
Var<T> make_result_list(Tensor<T> value, const std::vector<Var<T>>& inputs,
                        std::function<void(const Tensor<T>&)> backward) {
    Var<T> out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) node.inputs.push_back(in.node());
    node.backward = std::move(backward);
    return out;
}

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// reachable node that requires one; leaf gradients persist until zeroed.
template <class T>
void backward(const Var<T>& root) {
    require(root.value().size() == 1, ErrorKind::shape, "backward root must be a scalar");
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Tensor<T>(root.value().shape(), T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && !node->grad.empty()) {
            node->backward(node->grad);
            // Interior gradients are no longer needed once propagated.
            if (!node->inputs.empty()) node->grad = Tensor<T>();
        }
    }
}

}  // namespace stylebrush::ag
