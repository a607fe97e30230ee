#pragma once

#include "bus/tensor.hpp"

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace bus {

class Rng;

// Insertion-ordered registry of named parameter tensors. The fixed order is
// what the optimizer iterates and what the checkpoint writer serializes, so
// runs are reproducible and checkpoints round-trip bit-exactly.
class ParamStore {
public:
    Tensor create(const std::string& name, std::vector<int> shape, Rng& rng, double stddev);
    Tensor create_zeros(const std::string& name, std::vector<int> shape);
    Tensor create_const(const std::string& name, std::vector<int> shape, double value);

    const std::vector<std::string>& names() const { return order_; }
    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    std::size_t size() const { return order_.size(); }
    void zero_grads();
    std::int64_t total_elements() const;

private:
    Tensor insert(const std::string& name, Tensor t);
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> params_;
};

struct Linear {
    Tensor weight; // [in x out]
    Tensor bias;   // [out]

    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng);
    Tensor operator()(const Tensor& x) const; // [R x in] -> [R x out]
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    LayerNormParams() = default;
    LayerNormParams(ParamStore& store, const std::string& prefix, int dim);
    Tensor operator()(const Tensor& x) const;
};

// One multi-head attention application. Keys/values may come from a second
// sequence (cross-attention). An optional additive mask of shape
// [Lq x Lkv] is applied to the logits before the row softmax.
struct MultiHeadAttention {
    Linear q, k, v, o;
    int heads = 1;
    int dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& store, const std::string& prefix, int dim, int heads, Rng& rng);

    struct Result {
        Tensor out;                       // [Lq x d]
        std::vector<Tensor> head_probs;   // per-head [Lq x Lkv] attention rows
    };
    Result forward(const Tensor& queries, const Tensor& keys_values,
                   const Tensor* additive_mask, bool keep_probs) const;
};

struct FeedForward {
    Linear in, out;

    FeedForward() = default;
    FeedForward(ParamStore& store, const std::string& prefix, int dim, int hidden, Rng& rng);
    Tensor operator()(const Tensor& x) const;
};

// Pre-norm transformer encoder block: x + attn(LN(x)), then x + ffn(LN(x)).
struct EncoderBlock {
    LayerNormParams ln_attn, ln_ffn;
    MultiHeadAttention attn;
    FeedForward ffn;

    EncoderBlock() = default;
    EncoderBlock(ParamStore& store, const std::string& prefix, int dim, int heads, Rng& rng);

    struct Result {
        Tensor out;
        std::vector<Tensor> head_probs;
    };
    Result forward(const Tensor& x, const Tensor* mask, bool keep_probs = false) const;
};

// Pre-norm block with an extra cross-attention sublayer (PAD modules and the
// generation decoder): self-attention, cross-attention, feed-forward.
struct CrossBlock {
    LayerNormParams ln_self, ln_cross, ln_ffn;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;

    CrossBlock() = default;
    CrossBlock(ParamStore& store, const std::string& prefix, int dim, int heads, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor& memory,
                   const Tensor* self_mask, const Tensor* cross_mask) const;
};

// Additive attention masks: 0 where attending is allowed, -1e9 where not.
Tensor causal_mask(int len);
Tensor key_padding_mask(int query_len, const std::vector<bool>& key_allowed);

} // namespace bus
