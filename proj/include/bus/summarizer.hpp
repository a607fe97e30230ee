#pragma once

#include "bus/config.hpp"
#include "bus/nn.hpp"
#include "bus/sequence.hpp"
#include "bus/tensor.hpp"

#include <vector>

namespace bus {

// Per-patch saliency capture at the selection layer: raw text-alignment
// scores a, [CLS]-attention scores p, the mixed scores a_dot, and the beta
// used to mix them.
struct SaliencyRecord {
    Tensor a;      // [n], sigmoid range
    Tensor p;      // [n], CLS attention to each patch (self excluded)
    Tensor a_dot;  // [n]
    double beta = 0.0;
    NormKind norm_kind = NormKind::MinMax;
};

// Text Semantic-aware Patch Selector: three linear layers scoring each patch
// state concatenated with the text [CLS] vector; sigmoid output in (0,1).
struct TspsHead {
    Linear l1, l2, l3;
    int dim = 0;

    TspsHead() = default;
    TspsHead(ParamStore& store, const std::string& prefix, int dim, int hidden, Rng& rng);
};

// Scores are per-patch: each depends only on that patch's state and t_cls.
Tensor tsps_score(const Tensor& patch_states, const Tensor& t_cls, const TspsHead& head);

// a_dot_i = beta * F_N(a)_i + (1-beta) * F_N(p)_i.
Tensor mix_saliency(const Tensor& a, const Tensor& p, double beta, NormKind norm_kind);

// Keeps [CLS] plus the top-u = floor(n*alpha) patches by a_dot, preserving
// the original relative order; ties break toward the lower grid index. With
// fusion enabled and at least one discarded patch, appends one fusion token:
// the a_dot-weighted average of the discarded states.
PatchSequence kpe_select(const PatchSequence& seq, const Tensor& a_dot, double alpha, bool fusion_enabled);

// Seeds for abstraction: [CLS] plus the top-s = floor(gamma*u) retained
// patches, looked up in the layer-k scores via grid index. The fusion token
// is never selected as a seed.
PatchSequence tpa_select(const PatchSequence& final_seq, const Tensor& a_dot_at_k, double gamma);

// Patch Abstraction Decoder: modules of self-attention over the seeds,
// cross-attention against the full backbone output, and a feed-forward.
struct PadDecoder {
    std::vector<CrossBlock> blocks;
    LayerNormParams final_ln;

    PadDecoder() = default;
    PadDecoder(ParamStore& store, const std::string& prefix, int layers, int dim, int heads, Rng& rng);
};

// Output has exactly the seed slot count regardless of full_seq length.
PatchSequence pad_forward(const PatchSequence& seeds, const PatchSequence& full_seq, const PadDecoder& pad);

} // namespace bus
