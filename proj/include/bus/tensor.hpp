#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bus {

class Rng;

// Dense 64-bit float tensor participating in a reverse-mode autodiff graph.
// Tensor is a cheap handle over a shared payload; payloads are immutable
// after creation except for gradient accumulation. Single-threaded graph
// construction and backward; read-only sharing for inference is fine.
struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // allocated lazily; empty means "all zeros"
    std::vector<TensorImplPtr> parents;
    std::function<void(TensorImpl&)> backward_fn;
    const char* op = "leaf";

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::vector<double>& grad_buffer(); // allocate zeros on first touch
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // Gaussian(0, stddev) init from an explicit stream.
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t size() const { return impl_->size(); }

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }
    double item() const;
    double at(int r, int c) const;

    bool requires_grad() const { return impl_->requires_grad; }
    const std::vector<double>& grad() const;
    void zero_grad() const; // clears the shared gradient buffer

    TensorImpl* impl() const { return impl_.get(); }
    const TensorImplPtr& ptr() const { return impl_; }

private:
    TensorImplPtr impl_;
};

// While a guard is alive, ops run in inference mode: no graph nodes are
// recorded even if inputs require grad. Used by benchmarks and evaluation.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Runs reverse-mode accumulation from a scalar root ([1]-shaped tensor).
// Visits each recorded node exactly once in reverse topological order; leaf
// tensors without requires_grad accumulate nothing.
void backward(const Tensor& root);

// ---- ops ------------------------------------------------------------------
// Shapes are validated; mismatches throw ShapeError naming both shapes.

Tensor matmul(const Tensor& a, const Tensor& b);          // [M×K]·[K×N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b); // x·w + b
Tensor transpose(const Tensor& x);                        // [R×C] -> [C×R]
// Multi-head attention probabilities: rows h*Lq+i hold the softmax over
// keys for head h, query i, of q_i·k_j/sqrt(d/heads) plus the optional
// additive mask. Output shape [heads*Lq x Lkv].
Tensor attn_probs(const Tensor& q, const Tensor& k, const Tensor* mask, int heads);
// Applies stacked per-head probabilities to values: out[i, h*hd+c] =
// sum_j probs[h*Lq+i, j] * v[j, h*hd+c]. Output [Lq x d].
Tensor attn_apply(const Tensor& probs, const Tensor& v, int heads);
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& x, double c);
Tensor add_bias_rows(const Tensor& x, const Tensor& bias); // [R×C] + [C]
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor recip(const Tensor& x);
Tensor softmax_rows(const Tensor& x);                     // rows of last axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor gather_elems(const Tensor& v, const std::vector<int>& idx);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor repeat_row(const Tensor& v, int n);                // [C] -> [n×C]
Tensor flatten(const Tensor& x);                          // any -> [size]
Tensor sum_all(const Tensor& x);                          // -> [1]
Tensor mul_scalar_t(const Tensor& x, const Tensor& s);    // s is [1]
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
// out[0][j] = sum_i w~_i * states[i][j] with w~ = (w+eps)/sum(w+eps); a zero
// weight vector degenerates to a uniform average. Result is a [1xD] row.
Tensor weighted_mean_rows(const Tensor& states, const Tensor& weights, double eps = 1e-12);
// Min-max normalization to [0,1]; a constant vector (or length 1) maps to
// all 0.5 with zero gradient.
Tensor minmax_norm(const Tensor& v);
// Mean cross-entropy over rows with integer targets; row_weights selects and
// weights rows (normalized by their sum). Empty row_weights means all-ones.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& row_weights = {});
// Mean binary cross-entropy of probabilities vs 0/1 labels, inputs clamped
// to [eps, 1-eps] before the logs.
Tensor bce_mean(const Tensor& probs, const std::vector<double>& labels, double eps = 1e-7);
// [H×W×3] image -> [n×(3·p·p)] row-major patch vectors (y-major pixels,
// channel innermost). Differentiable back to the raw pixels.
Tensor extract_patches(const Tensor& image, int patch);

std::string shape_str(const std::vector<int>& s);

} // namespace bus
