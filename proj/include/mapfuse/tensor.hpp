#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mapfuse/common.hpp"

namespace mapfuse {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("shape dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first use
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph recording in scope; forwards under the guard neither keep
// inputs alive nor register backward closures.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense float tensor participating in reverse-mode differentiation. Copies
// share the underlying node; value semantics apply to the handle, not the
// buffer. Gradients accumulate into leaves on backward().
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, true);
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false,
                            bool allow_empty = false) {
        int64_t n = shape_numel(shape);
        if (!allow_empty && static_cast<int64_t>(data.size()) != n)
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = data.empty() ? std::vector<float>(static_cast<size_t>(n), 0.0f) : std::move(data);
        node->requires_grad = requires_grad;
        if (requires_grad) node->ensure_grad();
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    // Result of an operation; keeps its inputs alive for the backward pass.
    // Under NoGradGuard the result is a detached leaf.
    static Tensor make_op(Shape shape, std::vector<Tensor> inputs) {
        Tensor t = zeros(std::move(shape), false);
        if (!detail::grad_mode_flag()) return t;
        t.node_->is_leaf = false;
        for (auto& in : inputs) {
            if (!in.defined()) continue;
            if (in.node_->requires_grad) t.node_->requires_grad = true;
            t.node_->parents.push_back(in.node_);
        }
        return t;
    }

    void set_backward(std::function<void()> fn) {
        if (node_->requires_grad && !node_->is_leaf) node_->backward_fn = std::move(fn);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    float* data() { return node_->value.data(); }
    const float* data() const { return node_->value.data(); }
    std::span<float> values() { return node_->value; }
    std::span<const float> values() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (rg) node_->ensure_grad();
    }

    float* grad() {
        node_->ensure_grad();
        return node_->grad.data();
    }
    const std::vector<float>& grad_vector() const {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    }

    float item() const {
        if (numel() != 1) throw DimensionError("item() requires a scalar tensor");
        return node_->value[0];
    }

    // Deep copy of the value buffer; the copy is a fresh leaf.
    Tensor clone() const {
        Tensor t = from_data(node_->shape, node_->value, node_->requires_grad);
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Reverse-mode sweep from a scalar result. Topological order is fixed by
    // the graph structure, so repeated runs are bit-identical. Gradients of
    // interior nodes are released as soon as they have been consumed.
    void backward() {
        if (numel() != 1) throw DimensionError("backward() requires a scalar result");
        if (!node_->requires_grad)
            throw UsageError("backward() on a tensor that does not require gradients");
        std::vector<detail::Node*> order;
        topo_sort(order);
        node_->ensure_grad();
        node_->grad[0] = 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            if (!n->requires_grad) continue;
            if (n->backward_fn) {
                n->ensure_grad();
                n->backward_fn();
            }
            if (!n->is_leaf) {
                n->grad.clear();
                n->grad.shrink_to_fit();
            }
        }
    }

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> handle() const { return node_; }

  private:
    void topo_sort(std::vector<detail::Node*>& order) const {
        std::unordered_set<detail::Node*> visited;
        // Iterative DFS; child visit order is the parents vector order.
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                detail::Node* p = n->parents[next++].get();
                if (!visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<detail::Node> node_;
};

// Named trainable tensor. The gradient buffer exists from construction.
struct Parameter {
    std::string name;
    Tensor tensor;

    Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
        tensor.set_requires_grad(true);
    }
};

// Named non-trainable state (e.g. normalization running statistics).
struct NamedBuffer {
    std::string name;
    Tensor tensor;
};

inline void check_finite(const Tensor& t, const char* what) {
    check_finite(t.data(), static_cast<size_t>(t.numel()), what);
}

// NCHW offset helpers.
inline int64_t nchw_offset(int c_count, int h_count, int w_count, int n, int c, int h, int w) {
    return ((static_cast<int64_t>(n) * c_count + c) * h_count + h) * w_count + w;
}

}  // namespace mapfuse
