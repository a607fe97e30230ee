#include "bus/nn.hpp"

#include "bus/errors.hpp"
#include "bus/rng.hpp"

#include <cmath>

namespace bus {

Tensor ParamStore::insert(const std::string& name, Tensor t) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    order_.push_back(name);
    params_.emplace(name, t);
    return t;
}

Tensor ParamStore::create(const std::string& name, std::vector<int> shape, Rng& rng, double stddev) {
    return insert(name, Tensor::randn(std::move(shape), rng, stddev, /*requires_grad=*/true));
}

Tensor ParamStore::create_zeros(const std::string& name, std::vector<int> shape) {
    return insert(name, Tensor::zeros(std::move(shape), /*requires_grad=*/true));
}

Tensor ParamStore::create_const(const std::string& name, std::vector<int> shape, double value) {
    return insert(name, Tensor::full(std::move(shape), value, /*requires_grad=*/true));
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::zero_grads() {
    for (const auto& name : order_) params_.at(name).zero_grad();
}

std::int64_t ParamStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& name : order_) n += params_.at(name).size();
    return n;
}

Linear::Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng) {
    weight = store.create(prefix + ".w", {in, out}, rng, 0.02);
    bias = store.create_zeros(prefix + ".b", {out});
}

Tensor Linear::operator()(const Tensor& x) const {
    return linear(x, weight, bias);
}

LayerNormParams::LayerNormParams(ParamStore& store, const std::string& prefix, int dim) {
    gain = store.create_const(prefix + ".gain", {dim}, 1.0);
    bias = store.create_zeros(prefix + ".bias", {dim});
}

Tensor LayerNormParams::operator()(const Tensor& x) const {
    return layer_norm(x, gain, bias, eps);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& prefix, int dim_, int heads_, Rng& rng)
    : q(store, prefix + ".q", dim_, dim_, rng),
      k(store, prefix + ".k", dim_, dim_, rng),
      v(store, prefix + ".v", dim_, dim_, rng),
      o(store, prefix + ".o", dim_, dim_, rng),
      heads(heads_),
      dim(dim_) {
    if (dim_ % heads_ != 0) throw ConfigError("hidden width " + std::to_string(dim_) +
                                              " not divisible by " + std::to_string(heads_) + " heads");
}

MultiHeadAttention::Result MultiHeadAttention::forward(const Tensor& queries, const Tensor& keys_values,
                                                       const Tensor* additive_mask, bool keep_probs) const {
    Tensor Q = q(queries);
    Tensor K = k(keys_values);
    Tensor V = v(keys_values);
    Tensor probs = attn_probs(Q, K, additive_mask, heads);

    Result res;
    if (keep_probs) {
        const int Lq = queries.dim(0);
        for (int h = 0; h < heads; ++h) res.head_probs.push_back(slice_rows(probs, h * Lq, Lq));
    }
    res.out = o(attn_apply(probs, V, heads));
    return res;
}

FeedForward::FeedForward(ParamStore& store, const std::string& prefix, int dim, int hidden, Rng& rng)
    : in(store, prefix + ".in", dim, hidden, rng), out(store, prefix + ".out", hidden, dim, rng) {}

Tensor FeedForward::operator()(const Tensor& x) const { return out(gelu(in(x))); }

EncoderBlock::EncoderBlock(ParamStore& store, const std::string& prefix, int dim, int heads, Rng& rng)
    : ln_attn(store, prefix + ".ln1", dim),
      ln_ffn(store, prefix + ".ln2", dim),
      attn(store, prefix + ".attn", dim, heads, rng),
      ffn(store, prefix + ".ffn", dim, 4 * dim, rng) {}

EncoderBlock::Result EncoderBlock::forward(const Tensor& x, const Tensor* mask, bool keep_probs) const {
    Tensor normed = ln_attn(x);
    auto att = attn.forward(normed, normed, mask, keep_probs);
    Tensor h = add(x, att.out);
    Tensor out = add(h, ffn(ln_ffn(h)));
    return {out, std::move(att.head_probs)};
}

CrossBlock::CrossBlock(ParamStore& store, const std::string& prefix, int dim, int heads, Rng& rng)
    : ln_self(store, prefix + ".ln1", dim),
      ln_cross(store, prefix + ".ln2", dim),
      ln_ffn(store, prefix + ".ln3", dim),
      self_attn(store, prefix + ".self", dim, heads, rng),
      cross_attn(store, prefix + ".cross", dim, heads, rng),
      ffn(store, prefix + ".ffn", dim, 4 * dim, rng) {}

Tensor CrossBlock::forward(const Tensor& x, const Tensor& memory,
                           const Tensor* self_mask, const Tensor* cross_mask) const {
    Tensor normed = ln_self(x);
    Tensor h = add(x, self_attn.forward(normed, normed, self_mask, false).out);
    h = add(h, cross_attn.forward(ln_cross(h), memory, cross_mask, false).out);
    return add(h, ffn(ln_ffn(h)));
}

Tensor causal_mask(int len) {
    std::vector<double> m(static_cast<std::size_t>(len) * len, 0.0);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) m[static_cast<std::size_t>(i) * len + j] = -1e9;
    return Tensor::from_data({len, len}, std::move(m));
}

Tensor key_padding_mask(int query_len, const std::vector<bool>& key_allowed) {
    const int kl = static_cast<int>(key_allowed.size());
    std::vector<double> m(static_cast<std::size_t>(query_len) * kl, 0.0);
    for (int i = 0; i < query_len; ++i)
        for (int j = 0; j < kl; ++j)
            if (!key_allowed[static_cast<std::size_t>(j)]) m[static_cast<std::size_t>(i) * kl + j] = -1e9;
    return Tensor::from_data({query_len, kl}, std::move(m));
}

} // namespace bus
