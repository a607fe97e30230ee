#include "bus/summarizer.hpp"

#include "bus/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bus {

TspsHead::TspsHead(ParamStore& store, const std::string& prefix, int dim_, int hidden, Rng& rng)
    : l1(store, prefix + ".l1", 2 * dim_, hidden, rng),
      l2(store, prefix + ".l2", hidden, hidden, rng),
      l3(store, prefix + ".l3", hidden, 1, rng),
      dim(dim_) {}

Tensor tsps_score(const Tensor& patch_states, const Tensor& t_cls, const TspsHead& head) {
    if (patch_states.rank() != 2 || patch_states.dim(1) != head.dim) {
        throw ShapeError("tsps_score patch states " + shape_str(patch_states.shape()) +
                         " do not match selector width " + std::to_string(head.dim));
    }
    if (t_cls.rank() != 1 || t_cls.dim(0) != head.dim) {
        throw ShapeError("tsps_score t_cls " + shape_str(t_cls.shape()) +
                         " does not match selector width " + std::to_string(head.dim));
    }
    const int n = patch_states.dim(0);
    Tensor joint = concat_cols(patch_states, repeat_row(t_cls, n));
    Tensor h = gelu(head.l1(joint));
    h = gelu(head.l2(h));
    return sigmoid(flatten(head.l3(h)));
}

Tensor mix_saliency(const Tensor& a, const Tensor& p, double beta, NormKind norm_kind) {
    if (a.shape() != p.shape() || a.rank() != 1) {
        throw ShapeError("mix_saliency expects matching score vectors, got " +
                         shape_str(a.shape()) + " and " + shape_str(p.shape()));
    }
    if (beta < 0.0 || beta > 1.0) {
        throw ConfigError("mix_saliency beta " + std::to_string(beta) + " outside [0,1]");
    }
    auto normalize = [&](const Tensor& v) {
        return norm_kind == NormKind::MinMax ? minmax_norm(v) : softmax_rows(v);
    };
    return add(scale(normalize(a), beta), scale(normalize(p), 1.0 - beta));
}

namespace {

// Indices of the top-k entries of `scores`, ranked by (score desc, grid asc),
// then restored to ascending position order. `positions` are indices into
// scores; `grids` the tie-break keys.
std::vector<int> top_k_positions(const std::vector<double>& scores,
                                 const std::vector<int>& positions,
                                 const std::vector<int>& grids, int k) {
    std::vector<int> order(positions.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
        const double sl = scores[static_cast<std::size_t>(lhs)];
        const double sr = scores[static_cast<std::size_t>(rhs)];
        if (sl != sr) return sl > sr;
        return grids[static_cast<std::size_t>(lhs)] < grids[static_cast<std::size_t>(rhs)];
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    std::vector<int> picked;
    picked.reserve(order.size());
    for (int o : order) picked.push_back(positions[static_cast<std::size_t>(o)]);
    return picked;
}

} // namespace

PatchSequence kpe_select(const PatchSequence& seq, const Tensor& a_dot, double alpha, bool fusion_enabled) {
    const int n = seq.patch_count();
    if (a_dot.rank() != 1 || a_dot.dim(0) != n) {
        throw ShapeError("kpe_select scores " + shape_str(a_dot.shape()) + " for " + std::to_string(n) + " patches");
    }
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("kpe_select alpha must be in (0,1]");
    const int u = static_cast<int>(std::floor(static_cast<double>(n) * alpha));
    if (u == 0) throw ConfigError("kpe_select keeps zero patches: alpha too small for n=" + std::to_string(n));

    // Patch slots are 1..n in order; slot i holds scores[i-1].
    std::vector<int> positions(static_cast<std::size_t>(n));
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<int> grids(seq.grid_indices.begin() + 1, seq.grid_indices.begin() + 1 + n);
    const std::vector<double>& scores = a_dot.data();
    std::vector<int> kept = top_k_positions(scores, positions, grids, u);

    std::vector<int> slot_idx = {0};
    std::vector<int> new_grids = {kClsIndex};
    std::vector<bool> is_kept(static_cast<std::size_t>(n), false);
    for (int pos : kept) {
        is_kept[static_cast<std::size_t>(pos)] = true;
        slot_idx.push_back(1 + pos);
        new_grids.push_back(grids[static_cast<std::size_t>(pos)]);
    }

    PatchSequence out;
    Tensor kept_states = gather_rows(seq.states, slot_idx);
    if (fusion_enabled && u < n) {
        std::vector<int> discarded_slots;
        std::vector<int> discarded_pos;
        for (int pos = 0; pos < n; ++pos) {
            if (!is_kept[static_cast<std::size_t>(pos)]) {
                discarded_slots.push_back(1 + pos);
                discarded_pos.push_back(pos);
            }
        }
        Tensor fused = weighted_mean_rows(gather_rows(seq.states, discarded_slots),
                                          gather_elems(a_dot, discarded_pos));
        out.states = concat_rows({kept_states, fused});
        new_grids.push_back(kFusionIndex);
    } else {
        out.states = kept_states;
    }
    out.grid_indices = std::move(new_grids);
    return out;
}

PatchSequence tpa_select(const PatchSequence& final_seq, const Tensor& a_dot_at_k, double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("tpa_select gamma must be in (0,1]");
    const int u = final_seq.patch_count();
    const int s = static_cast<int>(std::floor(gamma * static_cast<double>(u)));
    if (s == 0) throw ConfigError("tpa_select keeps zero seeds: gamma too small for u=" + std::to_string(u));

    std::vector<int> positions; // slot indices of real patches
    std::vector<int> grids;
    std::vector<double> scores;
    for (int slot = 0; slot < final_seq.slots(); ++slot) {
        const int g = final_seq.grid_indices[static_cast<std::size_t>(slot)];
        if (g < 0) continue; // CLS and fusion token are never seeds
        if (g >= a_dot_at_k.dim(0)) {
            throw ShapeError("tpa_select grid index " + std::to_string(g) + " outside saliency record " +
                             shape_str(a_dot_at_k.shape()));
        }
        positions.push_back(slot);
        grids.push_back(g);
        scores.push_back(a_dot_at_k.data()[static_cast<std::size_t>(g)]);
    }
    std::vector<int> local(positions.size());
    std::iota(local.begin(), local.end(), 0);
    std::vector<int> kept_local = top_k_positions(scores, local, grids, s);

    std::vector<int> slot_idx = {0};
    std::vector<int> new_grids = {kClsIndex};
    for (int li : kept_local) {
        slot_idx.push_back(positions[static_cast<std::size_t>(li)]);
        new_grids.push_back(grids[static_cast<std::size_t>(li)]);
    }
    PatchSequence out;
    out.states = gather_rows(final_seq.states, slot_idx);
    out.grid_indices = std::move(new_grids);
    return out;
}

PadDecoder::PadDecoder(ParamStore& store, const std::string& prefix, int layers, int dim, int heads, Rng& rng) {
    for (int i = 0; i < layers; ++i) {
        blocks.emplace_back(store, prefix + ".block" + std::to_string(i), dim, heads, rng);
    }
    final_ln = LayerNormParams(store, prefix + ".ln_out", dim);
}

PatchSequence pad_forward(const PatchSequence& seeds, const PatchSequence& full_seq, const PadDecoder& pad) {
    if (!full_seq.states.defined() || full_seq.slots() == 0) {
        throw StateError("pad_forward needs a non-empty backbone output");
    }
    if (!seeds.states.defined() || seeds.slots() == 0) {
        throw StateError("pad_forward needs at least one seed token");
    }
    Tensor x = seeds.states;
    for (const auto& block : pad.blocks) {
        x = block.forward(x, full_seq.states, nullptr, nullptr);
    }
    PatchSequence out;
    out.states = pad.final_ln(x);
    out.grid_indices = seeds.grid_indices;
    return out;
}

} // namespace bus
