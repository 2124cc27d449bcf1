#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a shared handle on a graph node. Leaves are created with
// Var::leaf(); every op returns a new node that remembers its parents only
// when at least one of them requires a gradient, so inference graphs cost no
// more than the forward arithmetic. backward() runs once per loss node.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "soupkit/tensor.hpp"

namespace soup::ad {

// When enabled, every op verifies that its output is finite and throws
// NumericError otherwise. Off by default; tests and checked training enable it.
void set_finite_checks(bool enabled) noexcept;
bool finite_checks() noexcept;

// Enables checks on the current thread for the lifetime of the guard.
class ScopedFiniteChecks {
public:
    explicit ScopedFiniteChecks(bool enabled) noexcept;
    ~ScopedFiniteChecks();
    ScopedFiniteChecks(const ScopedFiniteChecks&) = delete;
    ScopedFiniteChecks& operator=(const ScopedFiniteChecks&) = delete;

private:
    bool previous_;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <class T>
class Var {
public:
    Var() = default;

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto node = std::make_shared<Node<T>>();
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return Var(std::move(node));
    }
    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool valid() const noexcept { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    // Mutable access for optimizer updates on leaves.
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }
    void clear_grad() { node_->grad = Tensor<T>(); }

    // Seeds d(self)/d(self) = 1 for a single-element node and propagates.
    void backward();

    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node<T>> node_;
};

// a[m x k] * b[k x n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
// Elementwise, identical shapes.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
// x[m x n] + bias[n] on every row.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
template <class T>
Var<T> scale(const Var<T>& x, T factor);
template <class T>
Var<T> relu(const Var<T>& x);
// tanh approximation
template <class T>
Var<T> gelu(const Var<T>& x);
template <class T>
Var<T> tanh(const Var<T>& x);
// Row-wise layer normalization with per-column gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));
// Gathers rows of table[V x d]; ids must be < V.
template <class T>
Var<T> embedding(const Var<T>& table, std::span<const std::uint32_t> ids);
// Multi-head causal self-attention over packed qkv[(batch*seq) x 3d] -> [(batch*seq) x d].
template <class T>
Var<T> causal_attention(const Var<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads);
// Row softmax with row-max subtraction. Non-finite input -> NumericError.
template <class T>
Var<T> softmax_rows(const Var<T>& x);
// Mean over rows of -log softmax(logits)[target] -> single-element tensor (nats/token).
template <class T>
Var<T> cross_entropy_mean(const Var<T>& logits, std::span<const std::uint32_t> targets);
// Sum of all entries -> single-element tensor.
template <class T>
Var<T> sum(const Var<T>& x);

}  // namespace soup::ad
