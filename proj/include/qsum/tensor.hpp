#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "qsum/rng.hpp"

namespace qsum {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

enum class DType : uint8_t { f32 = 0, f64 = 1 };

template <class S>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
    return std::is_same_v<S, float> ? DType::f32 : DType::f64;
}

inline size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// One node of the reverse-mode graph. Leaves have no parents and no
// backward_fn; interior nodes capture their parents so a root handle keeps
// the whole graph alive until it goes out of scope. A backward closure may
// own handles to its parents, but must refer to its own node by raw pointer:
// an owning self-reference would make the node immortal.
template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated lazily, always same extent as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
    }
};

// Dense row-major tensor handle with reverse-mode autodiff. Copies share the
// underlying node (and therefore storage and gradient accumulator).
template <class S>
class Tensor {
public:
    using Node = TensorNode<S>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        const int64_t count = numel(shape);
        if (count < 0) throw std::invalid_argument("tensor shape with negative extent");
        n->shape = std::move(shape);
        n->value.assign(static_cast<size_t>(count), v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(values.size()))
            throw std::invalid_argument("tensor data size " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (S& x : t.node_->value) x = static_cast<S>(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }

    // 2-D accessors; rank-1 tensors are treated as a single row
    int64_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
    int64_t cols() const { return rank() == 1 ? node_->shape[0] : node_->shape[1]; }

    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }
    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }

    S item() const {
        if (size() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    S at(int64_t r, int64_t c) const { return node_->value[static_cast<size_t>(r * cols() + c)]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<S>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    MatMap<S> mat() { return MatMap<S>(data(), rows(), cols()); }
    ConstMatMap<S> mat() const { return ConstMatMap<S>(data(), rows(), cols()); }
    MatMap<S> grad_mat() {
        node_->ensure_grad();
        return MatMap<S>(node_->grad.data(), rows(), cols());
    }

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

    // Reverse pass from a scalar root. Interior gradients of this graph are
    // reset first; leaf gradients accumulate across calls.
    void backward() {
        if (size() != 1) throw std::logic_error("backward() requires a scalar root");
        if (!node_->requires_grad)
            throw std::logic_error("backward() on a tensor that does not require grad");

        std::vector<Node*> order;
        topo_sort(order);
        for (Node* n : order) {
            if (n->backward_fn) {  // interior node: grad is owned by this pass
                n->grad.assign(n->value.size(), S(0));
            }
        }
        node_->ensure_grad();
        node_->grad[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
        for (Node* n : order) check_finite(n);
    }

private:
    void topo_sort(std::vector<Node*>& order) const {
        std::unordered_set<Node*> visited;
        // iterative DFS, children pushed in stored order for determinism
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].get();
                ++idx;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    static void check_finite(Node* n) {
        for (S g : n->grad) {
            if (!std::isfinite(static_cast<double>(g)))
                throw std::runtime_error("non-finite gradient encountered during backward");
        }
    }

    std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

// Wires the result of an op into the graph. `parents` must list every tensor
// the backward closure reads; the closure is installed only when some parent
// participates in differentiation, so frozen subgraphs cost nothing.
template <class S, class Fn>
void wire(Tensor<S>& out, std::initializer_list<Tensor<S>> parents, Fn&& backward) {
    bool req = false;
    for (const auto& p : parents) req = req || p.requires_grad();
    if (!req) return;
    out.node()->requires_grad = true;
    for (const auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward_fn = std::forward<Fn>(backward);
}

}  // namespace detail

}  // namespace qsum
