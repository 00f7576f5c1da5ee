#pragma once

// Reverse-mode differentiation over NCHW tensors. Each op records its inputs
// and a closure that accumulates input gradients from the output gradient.
// Recording is skipped when no input requires a gradient or when a
// NoGradGuard is alive on the calling thread.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "maskgan/core/tensor.hpp"

namespace maskgan {

struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-initialized on first use.
    Tensor& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    /// Leaf node; parameters pass requires_grad = true.
    static Var leaf(Tensor value, bool requires_grad = false);

    explicit operator bool() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return !node_->grad.empty(); }
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad = Tensor(); }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& handle() const { return node_; }
    /// Scalar value of a single-element tensor.
    Real item() const;

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every reachable input.
void backward(const Var& root);

/// Same value, no history.
Var detach(const Var& x);

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
Var add_scalar(const Var& a, Real s);
Var exp(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, Real slope);
Var tanh(const Var& a);
Var sigmoid(const Var& a);

/// Weight (Cout, Cin, k, k); bias (1, Cout, 1, 1) or empty.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
/// Weight (Cin, Cout, k, k); output extent (in-1)*stride - 2*pad + k + output_pad.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad,
                     int output_pad);
/// x (N, Din, 1, 1), weight (Dout, Din, 1, 1), bias (1, Dout, 1, 1) or empty.
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Per-sample per-channel standardization over H x W with sqrt(var + eps).
Var instance_norm(const Var& x, Real eps);
/// out[n,c] = x[n,c] * scale[n,c] + shift[n,c]; scale/shift are (N, C, 1, 1).
Var channel_affine(const Var& x, const Var& scale, const Var& shift);
/// Batch normalization with learnable gamma/beta (1, C, 1, 1). In training
/// mode the running statistics are updated in place.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, Real momentum, Real eps);

Var concat_channels(std::span<const Var> parts);
Var slice_channels(const Var& x, int begin, int count);
Var reshape(const Var& x, Shape shape);
Var gather_batch(const Var& x, std::span<const int> indices);
/// 2x2 average pooling, stride 2 (odd trailing rows/cols dropped).
Var avg_pool2(const Var& x);
Var global_avg_pool(const Var& x);
/// alpha (N, 1, H, W) broadcast over channels: alpha*a + (1-alpha)*b.
Var alpha_blend(const Var& alpha, const Var& a, const Var& b);

Var sum(const Var& a);
Var mean(const Var& a);
/// mean |a - b|
Var mean_abs_diff(const Var& a, const Var& b);
/// mean (a - target)^2
Var mean_sq_to(const Var& a, Real target);
/// Mean per-pixel categorical cross-entropy; labels indexed [n][h][w].
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);
/// Mean binary cross-entropy of sigmoid(logits) against a constant target.
Var bce_with_logits_to(const Var& logits, Real target);

}  // namespace ops
}  // namespace maskgan
