#include "bus/gradcheck.hpp"

#include "bus/errors.hpp"
#include "bus/model.hpp"
#include "bus/objectives.hpp"
#include "bus/rng.hpp"
#include "bus/schedule.hpp"
#include "bus/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace bus {

namespace {

double scaled_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

std::vector<int> probe_indices(std::int64_t n, int probes, Rng& rng) {
    if (probes <= 0 || probes >= n) {
        std::vector<int> all(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = static_cast<int>(i);
        return all;
    }
    std::unordered_set<int> seen;
    std::vector<int> out;
    while (static_cast<int>(out.size()) < probes) {
        const int idx = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n)));
        if (seen.insert(idx).second) out.push_back(idx);
    }
    return out;
}

} // namespace

GradCheckReport check_scalar_fn(const std::string& name, const ScalarFn& fn,
                                const std::vector<Tensor>& leaves, double tolerance,
                                int probes_per_tensor, Rng& probe_rng, double h) {
    for (const auto& leaf : leaves) leaf.zero_grad();
    Tensor out = fn();
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) {
        analytic.push_back(leaf.grad().empty() ? std::vector<double>(static_cast<std::size_t>(leaf.size()), 0.0)
                                               : leaf.grad());
    }

    GradCheckReport report;
    report.name = name;
    report.tolerance = tolerance;
    NoGradGuard no_grad;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        auto idx = probe_indices(leaf.size(), probes_per_tensor, probe_rng);
        for (int i : idx) {
            auto& slot = leaf.mutable_data()[static_cast<std::size_t>(i)];
            const double original = slot;
            slot = original + h;
            const double plus = fn().item();
            slot = original - h;
            const double minus = fn().item();
            slot = original;
            const double numeric = (plus - minus) / (2.0 * h);
            report.max_err = std::max(report.max_err, scaled_err(analytic[li][static_cast<std::size_t>(i)], numeric));
        }
    }
    report.pass = report.max_err <= tolerance;
    return report;
}

namespace {

Tensor weights_like(const std::vector<int>& shape, Rng& rng) {
    Tensor w = Tensor::randn(shape, rng, 1.0);
    return w; // no grad: fixed projection so dL/dy is non-uniform
}

// Reduce any op output to a scalar against fixed random weights.
Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum_all(mul(y, w)); }

} // namespace

std::vector<GradCheckReport> run_op_gradchecks(std::uint64_t seed) {
    Rng rng = Rng(seed).split("gradcheck-ops");
    Rng probe_rng = Rng(seed).split("gradcheck-probes");
    std::vector<GradCheckReport> reports;
    const int probes = 5;

    auto check = [&](const std::string& name, const ScalarFn& fn, const std::vector<Tensor>& leaves,
                     double tol = 1e-6) {
        reports.push_back(check_scalar_fn(name, fn, leaves, tol, probes, probe_rng));
    };

    {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
        Tensor w = weights_like({3, 2}, rng);
        check("matmul", [=] { return weighted_sum(matmul(a, b), w); }, {a, b});
    }
    {
        Tensor x = Tensor::randn({3, 5}, rng, 1.0, true);
        Tensor w = weights_like({3, 5}, rng);
        check("softmax_rows", [=] { return weighted_sum(softmax_rows(x), w); }, {x});
    }
    {
        Tensor x = Tensor::randn({4, 3}, rng, 1.0, true);
        Tensor wt = Tensor::randn({3, 5}, rng, 1.0, true);
        Tensor b = Tensor::randn({5}, rng, 1.0, true);
        Tensor w = weights_like({4, 5}, rng);
        check("linear", [=] { return weighted_sum(linear(x, wt, b), w); }, {x, wt, b});
    }
    {
        const int heads = 2;
        Tensor q = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor k = Tensor::randn({5, 4}, rng, 1.0, true);
        Tensor v = Tensor::randn({5, 4}, rng, 1.0, true);
        std::vector<double> m(15, 0.0);
        m[2] = -1e9; // one masked key
        Tensor mask = Tensor::from_data({3, 5}, std::move(m));
        Tensor wp = weights_like({6, 5}, rng);
        Tensor wo = weights_like({3, 4}, rng);
        check("attn_probs", [=] { return weighted_sum(attn_probs(q, k, &mask, heads), wp); }, {q, k});
        check("attn_apply", [=] { return weighted_sum(attn_apply(attn_probs(q, k, nullptr, heads), v, heads), wo); },
              {q, k, v});
    }
    {
        Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
        Tensor g = Tensor::randn({6}, rng, 0.5, true);
        Tensor b = Tensor::randn({6}, rng, 0.5, true);
        Tensor w = weights_like({4, 6}, rng);
        check("layer_norm", [=] { return weighted_sum(layer_norm(x, g, b, 1e-5), w); }, {x, g, b}, 1e-5);
    }
    {
        Tensor a = Tensor::randn({3, 3}, rng, 1.0, true);
        Tensor b = Tensor::randn({3, 3}, rng, 1.0, true);
        Tensor w = weights_like({3, 3}, rng);
        check("add", [=] { return weighted_sum(add(a, b), w); }, {a, b});
        check("sub", [=] { return weighted_sum(sub(a, b), w); }, {a, b});
        check("mul", [=] { return weighted_sum(mul(a, b), w); }, {a, b});
        check("scale", [=] { return weighted_sum(scale(a, -1.7), w); }, {a});
    }
    {
        Tensor x = Tensor::randn({4, 3}, rng, 1.0, true);
        Tensor b = Tensor::randn({3}, rng, 1.0, true);
        Tensor w = weights_like({4, 3}, rng);
        check("add_bias_rows", [=] { return weighted_sum(add_bias_rows(x, b), w); }, {x, b});
    }
    {
        Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = weights_like({3, 4}, rng);
        check("gelu", [=] { return weighted_sum(gelu(x), w); }, {x});
        check("sigmoid", [=] { return weighted_sum(sigmoid(x), w); }, {x});
        check("exp", [=] { return weighted_sum(exp_t(x), w); }, {x});
    }
    {
        Tensor x = Tensor::from_data({3}, {0.7, 1.9, 2.4}, true);
        Tensor w = weights_like({3}, rng);
        check("recip", [=] { return weighted_sum(recip(x), w); }, {x});
    }
    {
        Tensor table = Tensor::randn({7, 4}, rng, 1.0, true);
        Tensor w = weights_like({4, 4}, rng);
        const std::vector<int> ids = {1, 3, 3, 0}; // repeated id exercises scatter-add
        check("embedding", [=] { return weighted_sum(embedding(table, ids), w); }, {table});
    }
    {
        Tensor x = Tensor::randn({6, 3}, rng, 1.0, true);
        Tensor w = weights_like({4, 3}, rng);
        const std::vector<int> idx = {0, 2, 2, 5};
        check("gather_rows", [=] { return weighted_sum(gather_rows(x, idx), w); }, {x});
    }
    {
        Tensor x = Tensor::randn({6}, rng, 1.0, true);
        Tensor w = weights_like({3}, rng);
        const std::vector<int> idx = {5, 1, 1};
        check("gather_elems", [=] { return weighted_sum(gather_elems(x, idx), w); }, {x});
    }
    {
        Tensor a = Tensor::randn({2, 3}, rng, 1.0, true);
        Tensor b = Tensor::randn({3, 3}, rng, 1.0, true);
        Tensor w = weights_like({5, 3}, rng);
        check("concat_rows", [=] { return weighted_sum(concat_rows({a, b}), w); }, {a, b});
    }
    {
        Tensor a = Tensor::randn({3, 2}, rng, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = weights_like({3, 6}, rng);
        check("concat_cols", [=] { return weighted_sum(concat_cols(a, b), w); }, {a, b});
    }
    {
        Tensor x = Tensor::randn({5, 4}, rng, 1.0, true);
        Tensor wr = weights_like({2, 4}, rng);
        Tensor wc = weights_like({5, 2}, rng);
        Tensor wt = weights_like({4, 5}, rng);
        check("slice_rows", [=] { return weighted_sum(slice_rows(x, 1, 2), wr); }, {x});
        check("slice_cols", [=] { return weighted_sum(slice_cols(x, 1, 2), wc); }, {x});
        check("transpose", [=] { return weighted_sum(transpose(x), wt); }, {x});
    }
    {
        Tensor v = Tensor::randn({4}, rng, 1.0, true);
        Tensor w = weights_like({3, 4}, rng);
        check("repeat_row", [=] { return weighted_sum(repeat_row(v, 3), w); }, {v});
    }
    {
        Tensor x = Tensor::randn({2, 3}, rng, 1.0, true);
        Tensor w = weights_like({6}, rng);
        check("flatten", [=] { return weighted_sum(flatten(x), w); }, {x});
        check("sum_all", [=] { return sum_all(x); }, {x});
    }
    {
        Tensor x = Tensor::randn({3, 3}, rng, 1.0, true);
        Tensor s = Tensor::from_data({1}, {1.3}, true);
        Tensor w = weights_like({3, 3}, rng);
        check("mul_scalar_t", [=] { return weighted_sum(mul_scalar_t(x, s), w); }, {x, s});
    }
    {
        Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
        for (auto& v : x.mutable_data()) v += (v >= 0 ? 0.5 : -0.5); // keep rows off the origin
        Tensor w = weights_like({3, 4}, rng);
        check("l2_normalize_rows", [=] { return weighted_sum(l2_normalize_rows(x), w); }, {x});
    }
    {
        Tensor s = Tensor::randn({5, 3}, rng, 1.0, true);
        Tensor wt = Tensor::randn({5}, rng, 1.0, true);
        for (auto& v : wt.mutable_data()) v = std::abs(v) + 0.1;
        Tensor w = weights_like({1, 3}, rng);
        check("weighted_mean_rows", [=] { return weighted_sum(weighted_mean_rows(s, wt), w); }, {s, wt});
    }
    {
        Tensor v = Tensor::from_data({6}, {0.3, -1.2, 2.5, 0.9, -0.4, 1.7}, true);
        Tensor w = weights_like({6}, rng);
        check("minmax_norm", [=] { return weighted_sum(minmax_norm(v), w); }, {v});
    }
    {
        Tensor logits = Tensor::randn({4, 7}, rng, 1.0, true);
        const std::vector<int> targets = {2, 0, 6, 3};
        const std::vector<double> row_w = {1.0, 0.0, 1.0, 2.0};
        check("cross_entropy_rows", [=] { return cross_entropy_rows(logits, targets, row_w); }, {logits});
    }
    {
        std::vector<double> p(6);
        for (auto& v : p) v = 0.1 + 0.8 * rng.next_f64();
        Tensor probs = Tensor::from_data({6}, p, true);
        const std::vector<double> labels = {1, 0, 0, 1, 1, 0};
        check("bce_mean", [=] { return bce_mean(probs, labels); }, {probs});
    }
    {
        Tensor image = Tensor::randn({8, 8, 3}, rng, 1.0, true);
        Tensor w = weights_like({4, 48}, rng);
        check("extract_patches", [=] { return weighted_sum(extract_patches(image, 4), w); }, {image});
    }
    return reports;
}

namespace {

// Everything the frozen five-loss objective needs to be a deterministic
// function of the parameters alone.
struct FrozenBatch {
    std::vector<SynthSample> region;
    std::vector<SynthSample> paired;
    std::vector<Tensor> region_images;
    std::vector<Tensor> paired_images;
    std::vector<MlmMasking> maskings;
    std::vector<int> negatives;
    double beta = 0.5;
};

Tensor frozen_total_loss(BusModel& model, const FrozenBatch& batch) {
    const Config& cfg = model.config();
    Tensor ptm_total;
    for (std::size_t i = 0; i < batch.region.size(); ++i) {
        TextEncoding text = model.text_encoder().encode(batch.region[i].caption);
        auto vit = model.vision_encoder().forward(batch.region_images[i], &text, batch.beta, &model.tsps(), cfg);
        PatchLabelMask labels = bbox_to_patch_labels(batch.region[i].box, cfg.image_size, cfg.patch_size);
        Tensor l = ptm_loss(vit.saliency->a, labels);
        ptm_total = ptm_total.defined() ? add(ptm_total, l) : l;
    }
    ptm_total = scale(ptm_total, 1.0 / static_cast<double>(batch.region.size()));

    const int B = static_cast<int>(batch.paired.size());
    std::vector<BusModel::PairForward> forwards;
    std::vector<Tensor> img_rows, txt_rows;
    for (int i = 0; i < B; ++i) {
        forwards.push_back(model.forward_pair(batch.paired_images[static_cast<std::size_t>(i)],
                                              batch.paired[static_cast<std::size_t>(i)].caption, batch.beta));
        img_rows.push_back(forwards.back().img_emb);
        txt_rows.push_back(forwards.back().txt_emb);
    }
    ItcResult itc = itc_loss(concat_rows(img_rows), concat_rows(txt_rows), model.temperature());

    std::vector<Tensor> itm_probs;
    std::vector<double> itm_labels;
    for (int i = 0; i < B; ++i) {
        itm_probs.push_back(model.itm_probability(forwards[static_cast<std::size_t>(i)].fused));
        itm_labels.push_back(1.0);
        FusedStates neg = model.fusion_encoder().fuse(
            forwards[static_cast<std::size_t>(i)].summary,
            forwards[static_cast<std::size_t>(batch.negatives[static_cast<std::size_t>(i)])].text);
        itm_probs.push_back(model.itm_probability(neg));
        itm_labels.push_back(0.0);
    }
    Tensor itm = bce_mean(flatten(concat_rows(itm_probs)), itm_labels);

    Tensor mlm_total, prefix_total;
    for (int i = 0; i < B; ++i) {
        const auto& sample = batch.paired[static_cast<std::size_t>(i)];
        TextEncoding masked_text = model.text_encoder().encode(batch.maskings[static_cast<std::size_t>(i)].masked_ids);
        FusedStates fused_mlm = model.fusion_encoder().fuse(forwards[static_cast<std::size_t>(i)].summary, masked_text);
        Tensor mlm_i = model.mlm_loss_from(fused_mlm, batch.maskings[static_cast<std::size_t>(i)], sample.caption);
        mlm_total = mlm_total.defined() ? add(mlm_total, mlm_i) : mlm_i;
        Tensor prefix_i = model.prefix_lm_loss(forwards[static_cast<std::size_t>(i)].fused, sample.caption);
        prefix_total = prefix_total.defined() ? add(prefix_total, prefix_i) : prefix_i;
    }
    mlm_total = scale(mlm_total, 1.0 / B);
    prefix_total = scale(prefix_total, 1.0 / B);

    return add(add(add(add(itc.loss, itm), mlm_total), prefix_total), ptm_total);
}

// Selection boundaries must sit well clear of the finite-difference step,
// otherwise a probe could flip the retained set mid-difference.
double selection_margin(BusModel& model, const FrozenBatch& batch) {
    NoGradGuard no_grad;
    const Config& cfg = model.config();
    double margin = 1e300;
    auto consider = [&](const std::vector<double>& scores, int keep) {
        if (keep <= 0 || keep >= static_cast<int>(scores.size())) return;
        std::vector<double> sorted(scores);
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        margin = std::min(margin, sorted[static_cast<std::size_t>(keep - 1)] - sorted[static_cast<std::size_t>(keep)]);
    };
    auto probe = [&](const SynthSample& sample, const Tensor& image) {
        TextEncoding text = model.text_encoder().encode(sample.caption);
        auto vit = model.vision_encoder().forward(image, &text, batch.beta, &model.tsps(), cfg);
        consider(vit.saliency->a_dot.data(), cfg.kpe_keep());
        std::vector<double> retained;
        for (int slot = 0; slot < vit.seq.slots(); ++slot) {
            const int g = vit.seq.grid_indices[static_cast<std::size_t>(slot)];
            if (g >= 0) retained.push_back(vit.saliency->a_dot.data()[static_cast<std::size_t>(g)]);
        }
        consider(retained, cfg.tpa_keep());
    };
    for (std::size_t i = 0; i < batch.region.size(); ++i) probe(batch.region[i], batch.region_images[i]);
    for (std::size_t i = 0; i < batch.paired.size(); ++i) probe(batch.paired[i], batch.paired_images[i]);
    return margin;
}

} // namespace

std::vector<GradCheckReport> run_model_gradcheck(const Config& cfg, std::uint64_t seed,
                                                 int probes_per_tensor, double tolerance) {
    // Retry seeds until every selection boundary has a safe margin.
    for (std::uint64_t attempt = 0; attempt < 20; ++attempt) {
        const std::uint64_t run_seed = seed + attempt;
        BusModel model(cfg, run_seed);

        FrozenBatch batch;
        for (int i = 0; i < 2; ++i) {
            batch.region.push_back(batch_sample(run_seed, SampleKind::Region, 0, i, cfg.image_size));
            batch.paired.push_back(batch_sample(run_seed, SampleKind::Paired, 0, i, cfg.image_size));
            batch.region_images.push_back(batch.region.back().image());
            batch.paired_images.push_back(batch.paired.back().image());
        }
        Rng mask_rng = Rng(run_seed).split("gradcheck-mask");
        for (const auto& sample : batch.paired) {
            batch.maskings.push_back(mlm_mask(sample.caption, cfg.mlm_rate, mask_rng));
        }
        {
            NoGradGuard no_grad;
            std::vector<Tensor> img_rows, txt_rows;
            for (std::size_t i = 0; i < batch.paired.size(); ++i) {
                auto fwd = model.forward_pair(batch.paired_images[i], batch.paired[i].caption, batch.beta);
                img_rows.push_back(fwd.img_emb);
                txt_rows.push_back(fwd.txt_emb);
            }
            ItcResult itc = itc_loss(concat_rows(img_rows), concat_rows(txt_rows), model.temperature());
            Rng neg_rng = Rng(run_seed).split("gradcheck-neg");
            batch.negatives = hard_negative_sample(itc.sim, neg_rng);
        }
        if (selection_margin(model, batch) < 1e-4) continue;

        std::vector<Tensor> leaves;
        std::vector<std::string> names;
        for (const auto& name : model.params().names()) {
            leaves.push_back(model.params().get(name));
            names.push_back(name);
        }
        Rng probe_rng = Rng(run_seed).split("gradcheck-model-probes");

        // One backward, then per-parameter numeric probes.
        for (const auto& leaf : leaves) leaf.zero_grad();
        Tensor total = frozen_total_loss(model, batch);
        backward(total);
        std::vector<std::vector<double>> analytic;
        for (const auto& leaf : leaves) {
            analytic.push_back(leaf.grad().empty()
                                   ? std::vector<double>(static_cast<std::size_t>(leaf.size()), 0.0)
                                   : leaf.grad());
        }

        std::vector<GradCheckReport> reports;
        NoGradGuard no_grad;
        const double h = 1e-5;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            GradCheckReport rep;
            rep.name = "param " + names[li];
            rep.tolerance = tolerance;
            Tensor leaf = leaves[li];
            for (int i : probe_indices(leaf.size(), probes_per_tensor, probe_rng)) {
                auto& slot = leaf.mutable_data()[static_cast<std::size_t>(i)];
                const double original = slot;
                slot = original + h;
                const double plus = frozen_total_loss(model, batch).item();
                slot = original - h;
                const double minus = frozen_total_loss(model, batch).item();
                slot = original;
                const double numeric = (plus - minus) / (2.0 * h);
                rep.max_err = std::max(rep.max_err, scaled_err(analytic[li][static_cast<std::size_t>(i)], numeric));
            }
            rep.pass = rep.max_err <= tolerance;
            reports.push_back(std::move(rep));
        }
        return reports;
    }
    throw StateError("no gradcheck seed produced safe selection margins");
}

bool all_passed(const std::vector<GradCheckReport>& reports) {
    for (const auto& r : reports) {
        if (!r.pass) return false;
    }
    return true;
}

} // namespace bus
