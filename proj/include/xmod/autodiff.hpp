#pragma once

// Minimal reverse-mode differentiation over a closed set of tensor operations.
//
// A Var wraps a graph node holding its forward value. Operations on Vars record their inputs and a
// backward closure when any input requires a gradient (and recording is not disabled with
// NoGradGuard). backward() walks the recorded graph in reverse topological order.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmod/tensor.hpp"

namespace xmod::ad {

class UnsupportedOpError : public std::runtime_error {
  public:
    explicit UnsupportedOpError(const std::string& op)
        : std::runtime_error("operation '" + op + "' has no gradient"), op_(op) {}
    const std::string& op() const { return op_; }

  private:
    std::string op_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;
    std::string op = "leaf";
    bool requires_grad = false;
    bool differentiable = true;

    Tensor<T>& grad_buffer() {
        if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <typename T>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        return Var(std::move(n));
    }
    static Var parameter(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        n->op = "parameter";
        return Var(std::move(n));
    }

    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t dim(int axis) const { return node_->value.dim(axis); }
    int rank() const { return node_->value.rank(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

  private:
    std::shared_ptr<Node<T>> node_;
};

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};
bool grad_enabled();

// Seeds d(root)/d(root) = 1 and accumulates gradients into every reachable node that requires one.
template <typename T>
void backward(const Var<T>& root);

// --- elementwise, numpy-style broadcasting ---
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> neg(const Var<T>& x);
template <typename T> Var<T> scale(const Var<T>& x, double c);
template <typename T> Var<T> add_scalar(const Var<T>& x, double c);
template <typename T> Var<T> square(const Var<T>& x);
template <typename T> Var<T> sqrt(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);

// --- reductions ---
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
// Sum over one axis; the axis is removed.
template <typename T> Var<T> sum_axis(const Var<T>& x, int axis);

// --- linear algebra ---
// a: (..., M, K) with b: (K, N) -> (..., M, N); or batched a: (B, M, K), b: (B, K, N).
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
// x: (..., in), weight: (in, out), bias: (out) or empty.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
// x: (N, Cin, H, W), weight: (Cout, Cin, k, k) with odd k, zero "same" padding, stride 1; bias (Cout) or empty.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// --- shape ---
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<int>& axes);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length);
// Reflect padding (mirror without repeating the edge) on the last two axes.
template <typename T> Var<T> pad_reflect(const Var<T>& x, std::int64_t bottom, std::int64_t right);
// (N, C, H, W) -> (N, C r^2, H / r, W / r), channel index c r^2 + dy r + dx.
template <typename T> Var<T> pixel_unshuffle(const Var<T>& x, int r);
template <typename T> Var<T> pixel_shuffle(const Var<T>& x, int r);

// --- normalization / attention pieces ---
template <typename T> Var<T> softmax_last(const Var<T>& x);
// Multi-head scaled dot-product attention on a packed (N, L, 3d) projection laid out as
// [q | k | v] with head h owning columns h*d/heads.. of each part; returns (N, L, d).
template <typename T> Var<T> packed_attention(const Var<T>& qkv, int heads);
// Normalizes over `axis` by the root mean square; scale has the axis length or is empty.
template <typename T> Var<T> rms_norm(const Var<T>& x, int axis, const Var<T>& scale, double eps = 1e-6);
// x: (N, C, ...), gamma/beta: (C).
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5);

// --- one-level CDF 9/7 transform on the last two axes ---
// (N, C, H, W) -> (N, 4C, H/2, W/2), bands ordered LL, LH, HL, HH per input channel.
template <typename T> Var<T> wavelet_analysis(const Var<T>& x);
template <typename T> Var<T> wavelet_synthesis(const Var<T>& bands);

// A forward-only computation. Any gradient that has to pass through it raises UnsupportedOpError.
template <typename T>
Var<T> opaque(const Var<T>& x, const std::string& name, const std::function<Tensor<T>(const Tensor<T>&)>& fn);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

}  // namespace xmod::ad
