#pragma once

// Tape-free reverse-mode differentiation over Tensor values. Every op
// returns a Var whose node keeps its parents alive while gradients are
// required; `backward` walks the graph in reverse topological order.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cloak/tensor.hpp"

namespace cloak::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }
    // Zero-initialised on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    // Direct access for optimizers; never call while a graph built on this
    // value is still going to be differentiated.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on);

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    // Gradient accumulated by `backward`; zeros of the value's shape if none.
    Tensor grad() const;
    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Intermediate gradients are reset on every call; leaf gradients
// accumulate. The graph may be differentiated repeatedly.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

Var constant(Tensor value);
Var detach(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// x[n, ...] * s[n]
Var scale_samples(const Var& x, std::span<const double> s);
Var reshape(const Var& x, Shape shape);

Var sum(const Var& x);
Var mean(const Var& x);
Var mse(const Var& a, const Var& b);

// x[..., in] W[out, in]^T + b[out]; b may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
Var matmul(const Var& a, const Var& b);

// x[N, Ci, H, W], w[Co, Ci, k, k], b[Co] (may be undefined).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var avg_pool2(const Var& x);
Var upsample_nearest2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
// x[N, C, H, W] + e[N, C] broadcast over space.
Var add_channel_embedding(const Var& x, const Var& e);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
// Normalises over the last dimension.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var silu(const Var& x);

// [N, C, H, W] <-> [N, H*W, C]
Var to_tokens(const Var& x);
Var from_tokens(const Var& x, int height, int width);
// [L, d] -> [n, L, d]
Var repeat_batch(const Var& x, int n);
// n arrays of equal shape S -> [n, S...]
Var stack(std::span<const Var> xs);

// Single-head scaled dot-product attention. q[B, Lq, D], k[B, Lk, D],
// v[B, Lk, Dv]. When `probs` is non-null it receives the [B, Lq, Lk]
// attention weights.
Var attention(const Var& q, const Var& k, const Var& v, Tensor* probs = nullptr);

// Mean over the leading dimension of per-sample cosine similarity between
// flattened samples. Samples where either side has zero norm contribute 0
// and are counted in `degenerate`.
Var cosine_similarity(const Var& a, const Var& b, int* degenerate = nullptr);

// Mean softmax cross-entropy of logits[N, K] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// table[V, d] -> rows[ids.size(), d]
Var gather_rows(const Var& table, std::span<const int> ids);
// Copy of base[L, d] with row[d] written at each position.
Var replace_rows(const Var& base, const Var& row, std::span<const int> positions);

}  // namespace cloak::ag
