#include "bus/tensor.hpp"

#include "bus/errors.hpp"
#include "bus/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace bus {

namespace {

thread_local int g_no_grad_depth = 0;

std::int64_t shape_product(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

void check_positive_extents(const std::vector<int>& shape) {
    for (int e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
    }
}

TensorImplPtr make_impl(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    check_positive_extents(shape);
    if (shape_product(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match extents " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
    return impl;
}

// Record a graph node if autodiff is active and any parent requires grad.
Tensor make_op(const char* op, std::vector<int> shape, std::vector<double> data,
               std::vector<TensorImplPtr> parents,
               std::function<void(TensorImpl&)> backward_fn) {
    bool track = grad_enabled();
    if (track) {
        track = false;
        for (const auto& p : parents) {
            if (p && p->requires_grad) { track = true; break; }
        }
    }
    auto impl = make_impl(std::move(shape), std::move(data), track);
    impl->op = op;
    if (track) {
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

void require_rank2(const Tensor& x, const char* who) {
    if (x.rank() != 2) throw ShapeError(std::string(who) + " expects a rank-2 tensor, got " + shape_str(x.shape()));
}

int last_dim(const Tensor& x) { return x.shape().back(); }

std::int64_t rows_of(const Tensor& x) { return x.size() / last_dim(x); }

} // namespace

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = shape_product(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto n = shape_product(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = shape_product(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = rng.next_gaussian() * stddev;
    return from_data(std::move(shape), std::move(data), requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(int r, int c) const {
    require_rank2(*this, "at");
    return impl_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim(1)) + static_cast<std::size_t>(c)];
}

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    return impl_->grad.empty() ? empty : impl_->grad;
}

void Tensor::zero_grad() const {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void backward(const Tensor& root) {
    if (root.size() != 1) throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
    TensorImpl* r = root.impl();
    if (!r->requires_grad) return;

    // Iterative post-order DFS for a reverse topological order.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(r, 0);
    visited.insert(r);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    r->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// ---- op implementations -----------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const int M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
    if (K != K2) {
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(M) * N, 0.0);
    const auto& A = a.data();
    const auto& B = b.data();
    for (int i = 0; i < M; ++i) {
        for (int k = 0; k < K; ++k) {
            const double aik = A[static_cast<std::size_t>(i) * K + k];
            if (aik == 0.0) continue;
            const std::size_t brow = static_cast<std::size_t>(k) * N;
            const std::size_t crow = static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) out[crow + j] += aik * B[brow + j];
        }
    }
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    return make_op("matmul", {M, N}, std::move(out), {a.ptr(), b.ptr()},
        [pa, pb, M, K, N](TensorImpl& self) {
            const auto& dC = self.grad;
            if (pa->requires_grad) {
                auto& dA = pa->grad_buffer();
                const auto& B = pb->data;
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) {
                        const double g = dC[static_cast<std::size_t>(i) * N + j];
                        if (g == 0.0) continue;
                        const std::size_t brow = static_cast<std::size_t>(j);
                        for (int k = 0; k < K; ++k)
                            dA[static_cast<std::size_t>(i) * K + k] += g * B[static_cast<std::size_t>(k) * N + brow];
                    }
            }
            if (pb->requires_grad) {
                auto& dB = pb->grad_buffer();
                const auto& A = pa->data;
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        const double aik = A[static_cast<std::size_t>(i) * K + k];
                        if (aik == 0.0) continue;
                        for (int j = 0; j < N; ++j)
                            dB[static_cast<std::size_t>(k) * N + j] += aik * dC[static_cast<std::size_t>(i) * N + j];
                    }
            }
        });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank2(x, "linear");
    require_rank2(w, "linear");
    const int R = x.dim(0), In = x.dim(1), In2 = w.dim(0), Out = w.dim(1);
    if (In != In2 || b.rank() != 1 || b.dim(0) != Out) {
        throw ShapeError("linear shapes " + shape_str(x.shape()) + " * " + shape_str(w.shape()) +
                         " + " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(R) * Out);
    const auto& X = x.data();
    const auto& W = w.data();
    const auto& B = b.data();
    for (int i = 0; i < R; ++i) {
        double* row = out.data() + static_cast<std::ptrdiff_t>(i) * Out;
        std::copy_n(B.begin(), Out, row);
        for (int k = 0; k < In; ++k) {
            const double xik = X[static_cast<std::size_t>(i) * In + k];
            if (xik == 0.0) continue;
            const double* wrow = W.data() + static_cast<std::ptrdiff_t>(k) * Out;
            for (int j = 0; j < Out; ++j) row[j] += xik * wrow[j];
        }
    }
    TensorImpl* px = x.impl();
    TensorImpl* pw = w.impl();
    TensorImpl* pb = b.impl();
    return make_op("linear", {R, Out}, std::move(out), {x.ptr(), w.ptr(), b.ptr()},
        [px, pw, pb, R, In, Out](TensorImpl& self) {
            const auto& dY = self.grad;
            if (px->requires_grad) {
                auto& dX = px->grad_buffer();
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < Out; ++j) {
                        const double g = dY[static_cast<std::size_t>(i) * Out + j];
                        if (g == 0.0) continue;
                        for (int k = 0; k < In; ++k)
                            dX[static_cast<std::size_t>(i) * In + k] += g * pw->data[static_cast<std::size_t>(k) * Out + j];
                    }
            }
            if (pw->requires_grad) {
                auto& dW = pw->grad_buffer();
                for (int i = 0; i < R; ++i)
                    for (int k = 0; k < In; ++k) {
                        const double xik = px->data[static_cast<std::size_t>(i) * In + k];
                        if (xik == 0.0) continue;
                        const double* dyrow = dY.data() + static_cast<std::ptrdiff_t>(i) * Out;
                        double* dwrow = dW.data() + static_cast<std::ptrdiff_t>(k) * Out;
                        for (int j = 0; j < Out; ++j) dwrow[j] += xik * dyrow[j];
                    }
            }
            if (pb->requires_grad) {
                auto& dB = pb->grad_buffer();
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < Out; ++j) dB[static_cast<std::size_t>(j)] += dY[static_cast<std::size_t>(i) * Out + j];
            }
        });
}

Tensor attn_probs(const Tensor& q, const Tensor& k, const Tensor* mask, int heads) {
    require_rank2(q, "attn_probs");
    require_rank2(k, "attn_probs");
    const int Lq = q.dim(0), D = q.dim(1), Lk = k.dim(0);
    if (k.dim(1) != D) {
        throw ShapeError("attn_probs query/key widths differ: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
    }
    if (heads < 1 || D % heads != 0) throw ShapeError("attn_probs width not divisible by heads");
    if (mask && (mask->rank() != 2 || mask->dim(0) != Lq || mask->dim(1) != Lk)) {
        throw ShapeError("attn_probs mask " + shape_str(mask->shape()) + " for [" + std::to_string(Lq) + "x" +
                         std::to_string(Lk) + "] attention");
    }
    const int hd = D / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto& Q = q.data();
    const auto& K = k.data();
    std::vector<double> out(static_cast<std::size_t>(heads) * Lq * Lk);
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        for (int i = 0; i < Lq; ++i) {
            double* row = out.data() + (static_cast<std::size_t>(h) * Lq + i) * Lk;
            const double* qrow = Q.data() + static_cast<std::ptrdiff_t>(i) * D + off;
            for (int j = 0; j < Lk; ++j) {
                const double* krow = K.data() + static_cast<std::ptrdiff_t>(j) * D + off;
                double dot = 0.0;
                for (int c = 0; c < hd; ++c) dot += qrow[c] * krow[c];
                double logit = dot * att_scale;
                if (mask) logit += mask->data()[static_cast<std::size_t>(i) * Lk + j];
                if (!std::isfinite(logit)) throw NumericError("attn_probs logit is not finite");
                row[j] = logit;
            }
            double mx = row[0];
            for (int j = 1; j < Lk; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < Lk; ++j) { row[j] = std::exp(row[j] - mx); sum += row[j]; }
            for (int j = 0; j < Lk; ++j) row[j] /= sum;
        }
    }
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* pq = q.impl();
    TensorImpl* pk = k.impl();
    std::vector<TensorImplPtr> parents = {q.ptr(), k.ptr()};
    if (mask) parents.push_back(mask->ptr()); // keeps a constant mask alive
    return make_op("attn_probs", {heads * Lq, Lk}, std::move(out), std::move(parents),
        [pq, pk, saved, heads, Lq, Lk, D, hd, att_scale](TensorImpl& self) {
            std::vector<double> dlogits(static_cast<std::size_t>(Lk));
            for (int h = 0; h < heads; ++h) {
                const int off = h * hd;
                for (int i = 0; i < Lq; ++i) {
                    const double* p = saved->data() + (static_cast<std::size_t>(h) * Lq + i) * Lk;
                    const double* dp = self.grad.data() + (static_cast<std::size_t>(h) * Lq + i) * Lk;
                    double dot = 0.0;
                    for (int j = 0; j < Lk; ++j) dot += dp[j] * p[j];
                    for (int j = 0; j < Lk; ++j) dlogits[static_cast<std::size_t>(j)] = p[j] * (dp[j] - dot) * att_scale;
                    if (pq->requires_grad) {
                        auto& dQ = pq->grad_buffer();
                        double* dqrow = dQ.data() + static_cast<std::ptrdiff_t>(i) * D + off;
                        for (int j = 0; j < Lk; ++j) {
                            const double g = dlogits[static_cast<std::size_t>(j)];
                            if (g == 0.0) continue;
                            const double* krow = pk->data.data() + static_cast<std::ptrdiff_t>(j) * D + off;
                            for (int c = 0; c < hd; ++c) dqrow[c] += g * krow[c];
                        }
                    }
                    if (pk->requires_grad) {
                        auto& dK = pk->grad_buffer();
                        const double* qrow = pq->data.data() + static_cast<std::ptrdiff_t>(i) * D + off;
                        for (int j = 0; j < Lk; ++j) {
                            const double g = dlogits[static_cast<std::size_t>(j)];
                            if (g == 0.0) continue;
                            double* dkrow = dK.data() + static_cast<std::ptrdiff_t>(j) * D + off;
                            for (int c = 0; c < hd; ++c) dkrow[c] += g * qrow[c];
                        }
                    }
                }
            }
        });
}

Tensor attn_apply(const Tensor& probs, const Tensor& v, int heads) {
    require_rank2(probs, "attn_apply");
    require_rank2(v, "attn_apply");
    const int Lk = v.dim(0), D = v.dim(1);
    if (heads < 1 || D % heads != 0 || probs.dim(0) % heads != 0 || probs.dim(1) != Lk) {
        throw ShapeError("attn_apply shapes " + shape_str(probs.shape()) + " on " + shape_str(v.shape()) +
                         " with " + std::to_string(heads) + " heads");
    }
    const int Lq = probs.dim(0) / heads;
    const int hd = D / heads;
    const auto& P = probs.data();
    const auto& V = v.data();
    std::vector<double> out(static_cast<std::size_t>(Lq) * D, 0.0);
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        for (int i = 0; i < Lq; ++i) {
            const double* prow = P.data() + (static_cast<std::size_t>(h) * Lq + i) * Lk;
            double* orow = out.data() + static_cast<std::ptrdiff_t>(i) * D + off;
            for (int j = 0; j < Lk; ++j) {
                const double p = prow[j];
                if (p == 0.0) continue;
                const double* vrow = V.data() + static_cast<std::ptrdiff_t>(j) * D + off;
                for (int c = 0; c < hd; ++c) orow[c] += p * vrow[c];
            }
        }
    }
    TensorImpl* pp = probs.impl();
    TensorImpl* pv = v.impl();
    return make_op("attn_apply", {Lq, D}, std::move(out), {probs.ptr(), v.ptr()},
        [pp, pv, heads, Lq, Lk, D, hd](TensorImpl& self) {
            for (int h = 0; h < heads; ++h) {
                const int off = h * hd;
                for (int i = 0; i < Lq; ++i) {
                    const double* dorow = self.grad.data() + static_cast<std::ptrdiff_t>(i) * D + off;
                    if (pp->requires_grad) {
                        auto& dP = pp->grad_buffer();
                        double* dprow = dP.data() + (static_cast<std::size_t>(h) * Lq + i) * Lk;
                        for (int j = 0; j < Lk; ++j) {
                            const double* vrow = pv->data.data() + static_cast<std::ptrdiff_t>(j) * D + off;
                            double acc = 0.0;
                            for (int c = 0; c < hd; ++c) acc += dorow[c] * vrow[c];
                            dprow[j] += acc;
                        }
                    }
                    if (pv->requires_grad) {
                        auto& dV = pv->grad_buffer();
                        const double* prow = pp->data.data() + (static_cast<std::size_t>(h) * Lq + i) * Lk;
                        for (int j = 0; j < Lk; ++j) {
                            const double p = prow[j];
                            if (p == 0.0) continue;
                            double* dvrow = dV.data() + static_cast<std::ptrdiff_t>(j) * D + off;
                            for (int c = 0; c < hd; ++c) dvrow[c] += p * dorow[c];
                        }
                    }
                }
            }
        });
}

Tensor transpose(const Tensor& x) {
    require_rank2(x, "transpose");
    const int R = x.dim(0), C = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(R) * C);
    const auto& X = x.data();
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j)
            out[static_cast<std::size_t>(j) * R + i] = X[static_cast<std::size_t>(i) * C + j];
    TensorImpl* px = x.impl();
    return make_op("transpose", {C, R}, std::move(out), {x.ptr()},
        [px, R, C](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& dX = px->grad_buffer();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j)
                    dX[static_cast<std::size_t>(i) * C + j] += self.grad[static_cast<std::size_t>(j) * R + i];
        });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.data());
    const auto& B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    return make_op("add", a.shape(), std::move(out), {a.ptr(), b.ptr()},
        [pa, pb](TensorImpl& self) {
            if (pa->requires_grad) {
                auto& g = pa->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.data());
    const auto& B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    return make_op("mul", a.shape(), std::move(out), {a.ptr(), b.ptr()},
        [pa, pb](TensorImpl& self) {
            if (pa->requires_grad) {
                auto& g = pa->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
            }
        });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.data());
    for (auto& v : out) v *= c;
    TensorImpl* px = x.impl();
    return make_op("scale", x.shape(), std::move(out), {x.ptr()},
        [px, c](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
        });
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    require_rank2(x, "add_bias_rows");
    if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("bias " + shape_str(bias.shape()) + " does not match rows of " + shape_str(x.shape()));
    }
    const int R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.data());
    const auto& B = bias.data();
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) out[static_cast<std::size_t>(i) * C + j] += B[static_cast<std::size_t>(j)];
    TensorImpl* px = x.impl();
    TensorImpl* pbias = bias.impl();
    return make_op("add_bias_rows", x.shape(), std::move(out), {x.ptr(), bias.ptr()},
        [px, pbias, R, C](TensorImpl& self) {
            if (px->requires_grad) {
                auto& g = px->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pbias->requires_grad) {
                auto& g = pbias->grad_buffer();
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j) g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * C + j];
            }
        });
}

Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 0.7071067811865475244;
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    std::vector<double> out(x.data());
    for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    TensorImpl* px = x.impl();
    return make_op("gelu", x.shape(), std::move(out), {x.ptr()},
        [px](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = px->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                g[i] += self.grad[i] * (cdf + v * pdf);
            }
        });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.data());
    for (auto& v : out) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* px = x.impl();
    return make_op("sigmoid", x.shape(), std::move(out), {x.ptr()},
        [px, saved](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double s = (*saved)[i];
                g[i] += self.grad[i] * s * (1.0 - s);
            }
        });
}

Tensor exp_t(const Tensor& x) {
    std::vector<double> out(x.data());
    for (auto& v : out) v = std::exp(v);
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* px = x.impl();
    return make_op("exp", x.shape(), std::move(out), {x.ptr()},
        [px, saved](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*saved)[i];
        });
}

Tensor recip(const Tensor& x) {
    std::vector<double> out(x.data());
    for (auto& v : out) v = 1.0 / v;
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* px = x.impl();
    return make_op("recip", x.shape(), std::move(out), {x.ptr()},
        [px, saved](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = (*saved)[i];
                g[i] += -self.grad[i] * y * y;
            }
        });
}

Tensor softmax_rows(const Tensor& x) {
    const int C = last_dim(x);
    if (C < 1) throw ShapeError("softmax_rows needs at least one column");
    const std::int64_t R = rows_of(x);
    std::vector<double> out(x.data());
    for (const double v : out) {
        if (!std::isfinite(v)) throw NumericError("softmax_rows input is not finite");
    }
    for (std::int64_t i = 0; i < R; ++i) {
        double* row = out.data() + i * C;
        double mx = row[0];
        for (int j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < C; ++j) { row[j] = std::exp(row[j] - mx); sum += row[j]; }
        for (int j = 0; j < C; ++j) row[j] /= sum;
    }
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* px = x.impl();
    return make_op("softmax_rows", x.shape(), std::move(out), {x.ptr()},
        [px, saved, R, C](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::int64_t i = 0; i < R; ++i) {
                const double* y = saved->data() + i * C;
                const double* dy = self.grad.data() + i * C;
                double dot = 0.0;
                for (int j = 0; j < C; ++j) dot += dy[j] * y[j];
                for (int j = 0; j < C; ++j) g[static_cast<std::size_t>(i * C + j)] += y[j] * (dy[j] - dot);
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int C = last_dim(x);
    if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 || bias.dim(0) != C) {
        throw ShapeError("layer_norm affine params must be [" + std::to_string(C) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    if (eps <= 0.0) throw ShapeError("layer_norm eps must be positive");
    const std::int64_t R = rows_of(x);
    std::vector<double> out(x.data());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R));
    const auto& G = gain.data();
    const auto& B = bias.data();
    for (std::int64_t i = 0; i < R; ++i) {
        double* row = out.data() + i * C;
        double mean = 0.0;
        for (int j = 0; j < C; ++j) mean += row[j];
        mean /= C;
        double var = 0.0;
        for (int j = 0; j < C; ++j) { const double d = row[j] - mean; var += d * d; }
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < C; ++j) {
            const double h = (row[j] - mean) * is;
            (*xhat)[static_cast<std::size_t>(i * C + j)] = h;
            row[j] = h * G[static_cast<std::size_t>(j)] + B[static_cast<std::size_t>(j)];
        }
    }
    TensorImpl* px = x.impl();
    TensorImpl* pg = gain.impl();
    TensorImpl* pb = bias.impl();
    return make_op("layer_norm", x.shape(), std::move(out), {x.ptr(), gain.ptr(), bias.ptr()},
        [px, pg, pb, xhat, inv_std, R, C](TensorImpl& self) {
            for (std::int64_t i = 0; i < R; ++i) {
                const double* dy = self.grad.data() + i * C;
                const double* h = xhat->data() + i * C;
                const double is = (*inv_std)[static_cast<std::size_t>(i)];
                if (pg->requires_grad) {
                    auto& dg = pg->grad_buffer();
                    for (int j = 0; j < C; ++j) dg[static_cast<std::size_t>(j)] += dy[j] * h[j];
                }
                if (pb->requires_grad) {
                    auto& db = pb->grad_buffer();
                    for (int j = 0; j < C; ++j) db[static_cast<std::size_t>(j)] += dy[j];
                }
                if (px->requires_grad) {
                    auto& dx = px->grad_buffer();
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int j = 0; j < C; ++j) {
                        const double dh = dy[j] * pg->data[static_cast<std::size_t>(j)];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    for (int j = 0; j < C; ++j) {
                        const double dh = dy[j] * pg->data[static_cast<std::size_t>(j)];
                        dx[static_cast<std::size_t>(i * C + j)] +=
                            is * (dh - sum_dh / C - h[j] * sum_dh_h / C);
                    }
                }
            }
        });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require_rank2(table, "embedding");
    const int V = table.dim(0), D = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= V) throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    }
    const int L = static_cast<int>(ids.size());
    if (L == 0) throw ShapeError("embedding of an empty id list");
    std::vector<double> out(static_cast<std::size_t>(L) * D);
    const auto& T = table.data();
    for (int i = 0; i < L; ++i)
        std::copy_n(T.begin() + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(i)]) * D, D,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * D);
    TensorImpl* pt = table.impl();
    auto idx = std::make_shared<std::vector<int>>(ids);
    return make_op("embedding", {L, D}, std::move(out), {table.ptr()},
        [pt, idx, D](TensorImpl& self) {
            if (!pt->requires_grad) return;
            auto& g = pt->grad_buffer();
            for (std::size_t i = 0; i < idx->size(); ++i) {
                const std::size_t dst = static_cast<std::size_t>((*idx)[i]) * D;
                const std::size_t src = i * D;
                for (int j = 0; j < D; ++j) g[dst + j] += self.grad[src + j];
            }
        });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
    require_rank2(x, "gather_rows");
    const int R = x.dim(0), C = x.dim(1);
    for (int i : idx) {
        if (i < 0 || i >= R) throw ShapeError("gather_rows index " + std::to_string(i) + " outside " + shape_str(x.shape()));
    }
    const int L = static_cast<int>(idx.size());
    if (L == 0) throw ShapeError("gather_rows with empty index set");
    std::vector<double> out(static_cast<std::size_t>(L) * C);
    const auto& X = x.data();
    for (int i = 0; i < L; ++i)
        std::copy_n(X.begin() + static_cast<std::ptrdiff_t>(idx[static_cast<std::size_t>(i)]) * C, C,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * C);
    TensorImpl* px = x.impl();
    auto saved_idx = std::make_shared<std::vector<int>>(idx);
    return make_op("gather_rows", {L, C}, std::move(out), {x.ptr()},
        [px, saved_idx, C](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < saved_idx->size(); ++i) {
                const std::size_t dst = static_cast<std::size_t>((*saved_idx)[i]) * C;
                for (int j = 0; j < C; ++j) g[dst + j] += self.grad[i * C + j];
            }
        });
}

Tensor gather_elems(const Tensor& v, const std::vector<int>& idx) {
    if (v.rank() != 1) throw ShapeError("gather_elems expects a rank-1 tensor, got " + shape_str(v.shape()));
    const int N = v.dim(0);
    for (int i : idx) {
        if (i < 0 || i >= N) throw ShapeError("gather_elems index " + std::to_string(i) + " outside " + shape_str(v.shape()));
    }
    const int L = static_cast<int>(idx.size());
    if (L == 0) throw ShapeError("gather_elems with empty index set");
    std::vector<double> out(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) out[static_cast<std::size_t>(i)] = v.data()[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    TensorImpl* pv = v.impl();
    auto saved_idx = std::make_shared<std::vector<int>>(idx);
    return make_op("gather_elems", {L}, std::move(out), {v.ptr()},
        [pv, saved_idx](TensorImpl& self) {
            if (!pv->requires_grad) return;
            auto& g = pv->grad_buffer();
            for (std::size_t i = 0; i < saved_idx->size(); ++i)
                g[static_cast<std::size_t>((*saved_idx)[i])] += self.grad[i];
        });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of zero parts");
    const int C = parts.front().dim(parts.front().rank() - 1);
    int R = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != C) throw ShapeError("concat_rows column mismatch: " + shape_str(p.shape()));
        R += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(R) * C);
    std::vector<TensorImplPtr> parents;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.ptr());
    }
    auto raw = std::make_shared<std::vector<TensorImpl*>>();
    for (const auto& p : parts) raw->push_back(p.impl());
    return make_op("concat_rows", {R, C}, std::move(out), std::move(parents),
        [raw](TensorImpl& self) {
            std::size_t offset = 0;
            for (TensorImpl* p : *raw) {
                if (p->requires_grad) {
                    auto& g = p->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
                }
                offset += p->data.size();
            }
        });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank2(a, "concat_cols");
    require_rank2(b, "concat_cols");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("concat_cols row mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const int R = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(R) * (Ca + Cb));
    for (int i = 0; i < R; ++i) {
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i) * Ca, Ca,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * (Ca + Cb));
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(i) * Cb, Cb,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * (Ca + Cb) + Ca);
    }
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    return make_op("concat_cols", {R, Ca + Cb}, std::move(out), {a.ptr(), b.ptr()},
        [pa, pb, R, Ca, Cb](TensorImpl& self) {
            const int C = Ca + Cb;
            if (pa->requires_grad) {
                auto& g = pa->grad_buffer();
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < Ca; ++j)
                        g[static_cast<std::size_t>(i) * Ca + j] += self.grad[static_cast<std::size_t>(i) * C + j];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < Cb; ++j)
                        g[static_cast<std::size_t>(i) * Cb + j] += self.grad[static_cast<std::size_t>(i) * C + Ca + j];
            }
        });
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    require_rank2(x, "slice_rows");
    const int R = x.dim(0), C = x.dim(1);
    if (start < 0 || count < 1 || start + count > R) {
        throw ShapeError("slice_rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
    }
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(start) * C,
                            x.data().begin() + static_cast<std::ptrdiff_t>(start + count) * C);
    TensorImpl* px = x.impl();
    return make_op("slice_rows", {count, C}, std::move(out), {x.ptr()},
        [px, start, count, C](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < static_cast<std::size_t>(count) * C; ++i)
                g[static_cast<std::size_t>(start) * C + i] += self.grad[i];
        });
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    require_rank2(x, "slice_cols");
    const int R = x.dim(0), C = x.dim(1);
    if (start < 0 || count < 1 || start + count > C) {
        throw ShapeError("slice_cols [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(R) * count);
    for (int i = 0; i < R; ++i)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(i) * C + start, count,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * count);
    TensorImpl* px = x.impl();
    return make_op("slice_cols", {R, count}, std::move(out), {x.ptr()},
        [px, start, count, R, C](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < count; ++j)
                    g[static_cast<std::size_t>(i) * C + start + j] += self.grad[static_cast<std::size_t>(i) * count + j];
        });
}

Tensor repeat_row(const Tensor& v, int n) {
    if (v.rank() != 1) throw ShapeError("repeat_row expects a rank-1 tensor, got " + shape_str(v.shape()));
    if (n < 1) throw ShapeError("repeat_row count must be positive");
    const int C = v.dim(0);
    std::vector<double> out(static_cast<std::size_t>(n) * C);
    for (int i = 0; i < n; ++i) std::copy_n(v.data().begin(), C, out.begin() + static_cast<std::ptrdiff_t>(i) * C);
    TensorImpl* pv = v.impl();
    return make_op("repeat_row", {n, C}, std::move(out), {v.ptr()},
        [pv, n, C](TensorImpl& self) {
            if (!pv->requires_grad) return;
            auto& g = pv->grad_buffer();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < C; ++j) g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * C + j];
        });
}

Tensor flatten(const Tensor& x) {
    std::vector<double> out(x.data());
    TensorImpl* px = x.impl();
    return make_op("flatten", {static_cast<int>(x.size())}, std::move(out), {x.ptr()},
        [px](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    TensorImpl* px = x.impl();
    return make_op("sum_all", {1}, {s}, {x.ptr()},
        [px](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (auto& v : g) v += self.grad[0];
        });
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar_t scalar must be [1], got " + shape_str(s.shape()));
    const double sv = s.data()[0];
    std::vector<double> out(x.data());
    for (auto& v : out) v *= sv;
    TensorImpl* px = x.impl();
    TensorImpl* ps = s.impl();
    return make_op("mul_scalar_t", x.shape(), std::move(out), {x.ptr(), s.ptr()},
        [px, ps, sv](TensorImpl& self) {
            if (px->requires_grad) {
                auto& g = px->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
            }
            if (ps->requires_grad) {
                auto& g = ps->grad_buffer();
                double acc = 0.0;
                for (std::size_t i = 0; i < px->data.size(); ++i) acc += px->data[i] * self.grad[i];
                g[0] += acc;
            }
        });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    require_rank2(x, "l2_normalize_rows");
    const int R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.data());
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R));
    for (int i = 0; i < R; ++i) {
        double* row = out.data() + static_cast<std::ptrdiff_t>(i) * C;
        double sq = 0.0;
        for (int j = 0; j < C; ++j) sq += row[j] * row[j];
        const double n = std::max(std::sqrt(sq), eps);
        (*norms)[static_cast<std::size_t>(i)] = n;
        for (int j = 0; j < C; ++j) row[j] /= n;
    }
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* px = x.impl();
    return make_op("l2_normalize_rows", x.shape(), std::move(out), {x.ptr()},
        [px, saved, norms, R, C, eps](TensorImpl& self) {
            if (!px->requires_grad) return;
            auto& g = px->grad_buffer();
            for (int i = 0; i < R; ++i) {
                const double* y = saved->data() + static_cast<std::ptrdiff_t>(i) * C;
                const double* dy = self.grad.data() + static_cast<std::ptrdiff_t>(i) * C;
                const double n = (*norms)[static_cast<std::size_t>(i)];
                double sqn = 0.0;
                for (int j = 0; j < C; ++j) sqn += px->data[static_cast<std::size_t>(i) * C + j] * px->data[static_cast<std::size_t>(i) * C + j];
                const bool clipped = std::sqrt(sqn) < eps;
                double dot = 0.0;
                for (int j = 0; j < C; ++j) dot += dy[j] * y[j];
                for (int j = 0; j < C; ++j) {
                    const double d = clipped ? dy[j] / n : (dy[j] - y[j] * dot) / n;
                    g[static_cast<std::size_t>(i) * C + j] += d;
                }
            }
        });
}

Tensor weighted_mean_rows(const Tensor& states, const Tensor& weights, double eps) {
    require_rank2(states, "weighted_mean_rows");
    if (weights.rank() != 1 || weights.dim(0) != states.dim(0)) {
        throw ShapeError("weighted_mean_rows weights " + shape_str(weights.shape()) +
                         " do not match rows of " + shape_str(states.shape()));
    }
    const int M = states.dim(0), D = states.dim(1);
    double total = 0.0;
    for (double w : weights.data()) total += w + eps;
    std::vector<double> out(static_cast<std::size_t>(D), 0.0);
    for (int i = 0; i < M; ++i) {
        const double wi = (weights.data()[static_cast<std::size_t>(i)] + eps) / total;
        for (int j = 0; j < D; ++j) out[static_cast<std::size_t>(j)] += wi * states.at(i, j);
    }
    auto saved_out = std::make_shared<std::vector<double>>(out);
    TensorImpl* ps = states.impl();
    TensorImpl* pw = weights.impl();
    return make_op("weighted_mean_rows", {1, D}, std::move(out), {states.ptr(), weights.ptr()},
        [ps, pw, saved_out, M, D, eps, total](TensorImpl& self) {
            if (ps->requires_grad) {
                auto& g = ps->grad_buffer();
                for (int i = 0; i < M; ++i) {
                    const double wi = (pw->data[static_cast<std::size_t>(i)] + eps) / total;
                    for (int j = 0; j < D; ++j) g[static_cast<std::size_t>(i) * D + j] += wi * self.grad[static_cast<std::size_t>(j)];
                }
            }
            if (pw->requires_grad) {
                auto& g = pw->grad_buffer();
                double out_dot = 0.0;
                for (int j = 0; j < D; ++j) out_dot += (*saved_out)[static_cast<std::size_t>(j)] * self.grad[static_cast<std::size_t>(j)];
                for (int i = 0; i < M; ++i) {
                    double row_dot = 0.0;
                    for (int j = 0; j < D; ++j) row_dot += ps->data[static_cast<std::size_t>(i) * D + j] * self.grad[static_cast<std::size_t>(j)];
                    g[static_cast<std::size_t>(i)] += (row_dot - out_dot) / total;
                }
            }
        });
}

Tensor minmax_norm(const Tensor& v) {
    if (v.rank() != 1) throw ShapeError("minmax_norm expects a rank-1 tensor, got " + shape_str(v.shape()));
    const int N = v.dim(0);
    const auto& X = v.data();
    int imin = 0, imax = 0;
    for (int i = 1; i < N; ++i) {
        if (X[static_cast<std::size_t>(i)] < X[static_cast<std::size_t>(imin)]) imin = i;
        if (X[static_cast<std::size_t>(i)] > X[static_cast<std::size_t>(imax)]) imax = i;
    }
    const double range = X[static_cast<std::size_t>(imax)] - X[static_cast<std::size_t>(imin)];
    const bool degenerate = N == 1 || range < 1e-12;
    std::vector<double> out(static_cast<std::size_t>(N));
    if (degenerate) {
        std::fill(out.begin(), out.end(), 0.5);
    } else {
        for (int i = 0; i < N; ++i) out[static_cast<std::size_t>(i)] = (X[static_cast<std::size_t>(i)] - X[static_cast<std::size_t>(imin)]) / range;
    }
    auto saved = std::make_shared<std::vector<double>>(out);
    TensorImpl* pv = v.impl();
    return make_op("minmax_norm", v.shape(), std::move(out), {v.ptr()},
        [pv, saved, imin, imax, range, degenerate, N](TensorImpl& self) {
            if (!pv->requires_grad || degenerate) return;
            auto& g = pv->grad_buffer();
            double sum_dy = 0.0, sum_dy_y = 0.0;
            for (int j = 0; j < N; ++j) {
                sum_dy += self.grad[static_cast<std::size_t>(j)];
                sum_dy_y += self.grad[static_cast<std::size_t>(j)] * (*saved)[static_cast<std::size_t>(j)];
            }
            for (int i = 0; i < N; ++i) {
                double d = self.grad[static_cast<std::size_t>(i)];
                if (i == imin) d -= sum_dy;
                if (i == imax) d -= sum_dy_y;
                if (i == imin) d += sum_dy_y;
                g[static_cast<std::size_t>(i)] += d / range;
            }
        });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& row_weights) {
    require_rank2(logits, "cross_entropy_rows");
    const int R = logits.dim(0), V = logits.dim(1);
    if (static_cast<int>(targets.size()) != R) {
        throw ShapeError("cross_entropy_rows has " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(R) + " rows");
    }
    std::vector<double> w(row_weights);
    if (w.empty()) w.assign(static_cast<std::size_t>(R), 1.0);
    if (static_cast<int>(w.size()) != R) throw ShapeError("cross_entropy_rows row_weights length mismatch");
    double wsum = 0.0;
    for (double x : w) wsum += x;
    if (wsum <= 0.0) throw ShapeError("cross_entropy_rows needs a positive total row weight");
    for (int t : targets) {
        if (t < 0 || t >= V) throw DataError("cross-entropy target " + std::to_string(t) + " outside vocab " + std::to_string(V));
    }
    auto probs = std::make_shared<std::vector<double>>(logits.data());
    double loss = 0.0;
    for (int i = 0; i < R; ++i) {
        double* row = probs->data() + static_cast<std::ptrdiff_t>(i) * V;
        double mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < V; ++j) { row[j] = std::exp(row[j] - mx); sum += row[j]; }
        for (int j = 0; j < V; ++j) row[j] /= sum;
        loss += -w[static_cast<std::size_t>(i)] * std::log(std::max(row[targets[static_cast<std::size_t>(i)]], 1e-300));
    }
    loss /= wsum;
    TensorImpl* pl = logits.impl();
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto ws = std::make_shared<std::vector<double>>(std::move(w));
    return make_op("cross_entropy_rows", {1}, {loss}, {logits.ptr()},
        [pl, probs, tg, ws, wsum, R, V](TensorImpl& self) {
            if (!pl->requires_grad) return;
            auto& g = pl->grad_buffer();
            const double go = self.grad[0];
            for (int i = 0; i < R; ++i) {
                const double wi = (*ws)[static_cast<std::size_t>(i)];
                if (wi == 0.0) continue;
                const double* p = probs->data() + static_cast<std::ptrdiff_t>(i) * V;
                for (int j = 0; j < V; ++j) {
                    double d = p[j];
                    if (j == (*tg)[static_cast<std::size_t>(i)]) d -= 1.0;
                    g[static_cast<std::size_t>(i) * V + j] += go * wi * d / wsum;
                }
            }
        });
}

Tensor bce_mean(const Tensor& probs, const std::vector<double>& labels, double eps) {
    if (probs.size() != static_cast<std::int64_t>(labels.size())) {
        throw ShapeError("bce_mean has " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(probs.size()) + " predictions");
    }
    const std::size_t n = labels.size();
    if (n == 0) throw ShapeError("bce_mean on empty input");
    auto clamped = std::make_shared<std::vector<double>>(probs.data());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double& c = (*clamped)[i];
        c = std::min(std::max(c, eps), 1.0 - eps);
        loss += -(labels[i] * std::log(c) + (1.0 - labels[i]) * std::log(1.0 - c));
    }
    loss /= static_cast<double>(n);
    TensorImpl* pp = probs.impl();
    auto lb = std::make_shared<std::vector<double>>(labels);
    return make_op("bce_mean", {1}, {loss}, {probs.ptr()},
        [pp, clamped, lb, eps, n](TensorImpl& self) {
            if (!pp->requires_grad) return;
            auto& g = pp->grad_buffer();
            const double go = self.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double a = pp->data[i];
                if (a <= eps || a >= 1.0 - eps) continue; // clamp region: zero slope
                const double c = (*clamped)[i];
                g[i] += go * (c - (*lb)[i]) / (c * (1.0 - c));
            }
        });
}

Tensor extract_patches(const Tensor& image, int patch) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw ShapeError("extract_patches expects [HxWx3], got " + shape_str(image.shape()));
    }
    const int H = image.dim(0), W = image.dim(1);
    if (patch <= 0 || H % patch != 0 || W % patch != 0) {
        throw ConfigError("image " + std::to_string(H) + "x" + std::to_string(W) +
                          " is not divisible by patch size " + std::to_string(patch));
    }
    const int gy = H / patch, gx = W / patch;
    const int n = gy * gx;
    const int pd = patch * patch * 3;
    std::vector<double> out(static_cast<std::size_t>(n) * pd);
    const auto& X = image.data();
    for (int py = 0; py < gy; ++py)
        for (int px = 0; px < gx; ++px) {
            const int pi = py * gx + px;
            std::size_t o = static_cast<std::size_t>(pi) * pd;
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    for (int c = 0; c < 3; ++c)
                        out[o++] = X[(static_cast<std::size_t>(py * patch + y) * W + (px * patch + x)) * 3 + c];
        }
    TensorImpl* pim = image.impl();
    return make_op("extract_patches", {n, pd}, std::move(out), {image.ptr()},
        [pim, patch, W, gy, gx](TensorImpl& self) {
            if (!pim->requires_grad) return;
            auto& g = pim->grad_buffer();
            const int pd = patch * patch * 3;
            for (int py = 0; py < gy; ++py)
                for (int px = 0; px < gx; ++px) {
                    const int pi = py * gx + px;
                    std::size_t o = static_cast<std::size_t>(pi) * pd;
                    for (int y = 0; y < patch; ++y)
                        for (int x = 0; x < patch; ++x)
                            for (int c = 0; c < 3; ++c)
                                g[(static_cast<std::size_t>(py * patch + y) * W + (px * patch + x)) * 3 + c] += self.grad[o++];
                }
        });
}

} // namespace bus
