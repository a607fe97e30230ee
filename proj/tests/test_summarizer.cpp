#include <doctest.h>

#include "bus/errors.hpp"
#include "bus/model.hpp"
#include "bus/rng.hpp"
#include "bus/summarizer.hpp"
#include "bus/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace bus;

namespace {

// Brute-force oracle: top-k indices by (score desc, index asc), returned in
// ascending index order.
std::vector<int> brute_force_top_k(const std::vector<double>& scores, int k) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
            return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

PatchSequence make_seq(int n, Rng& rng, int d = 8, bool requires_grad = false) {
    PatchSequence seq;
    seq.states = Tensor::randn({1 + n, d}, rng, 1.0, requires_grad);
    seq.grid_indices.resize(static_cast<std::size_t>(n) + 1);
    seq.grid_indices[0] = kClsIndex;
    std::iota(seq.grid_indices.begin() + 1, seq.grid_indices.end(), 0);
    return seq;
}

// Plain-double reimplementation of the three-layer selector for the oracle.
std::vector<double> tsps_reference(const PatchSequence& seq, const std::vector<double>& t_cls,
                                   const BusModel& model, int d) {
    auto w1 = model.params().get("tsps.l1.w").data();
    auto b1 = model.params().get("tsps.l1.b").data();
    auto w2 = model.params().get("tsps.l2.w").data();
    auto b2 = model.params().get("tsps.l2.b").data();
    auto w3 = model.params().get("tsps.l3.w").data();
    auto b3 = model.params().get("tsps.l3.b").data();
    auto act = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
    const int n = seq.patch_count();
    std::vector<double> out;
    for (int i = 0; i < n; ++i) {
        std::vector<double> joint(static_cast<std::size_t>(2 * d));
        for (int c = 0; c < d; ++c) joint[static_cast<std::size_t>(c)] = seq.states.at(1 + i, c);
        for (int c = 0; c < d; ++c) joint[static_cast<std::size_t>(d + c)] = t_cls[static_cast<std::size_t>(c)];
        std::vector<double> h1(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            double acc = b1[static_cast<std::size_t>(j)];
            for (int c = 0; c < 2 * d; ++c) acc += joint[static_cast<std::size_t>(c)] * w1[static_cast<std::size_t>(c) * d + j];
            h1[static_cast<std::size_t>(j)] = act(acc);
        }
        std::vector<double> h2(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            double acc = b2[static_cast<std::size_t>(j)];
            for (int c = 0; c < d; ++c) acc += h1[static_cast<std::size_t>(c)] * w2[static_cast<std::size_t>(c) * d + j];
            h2[static_cast<std::size_t>(j)] = act(acc);
        }
        double logit = b3[0];
        for (int c = 0; c < d; ++c) logit += h2[static_cast<std::size_t>(c)] * w3[static_cast<std::size_t>(c)];
        out.push_back(1.0 / (1.0 + std::exp(-logit)));
    }
    return out;
}

} // namespace

TEST_CASE("tsps_score: per-patch, equivariant, matches the reimplementation oracle") {
    Config cfg;
    BusModel model(cfg, 71);
    Rng rng(5);
    const int n = 6;
    PatchSequence seq;
    seq.states = Tensor::randn({1 + n, cfg.d}, rng, 1.0);
    // Two identical patch states.
    auto& data = seq.states.mutable_data();
    for (int c = 0; c < cfg.d; ++c)
        data[static_cast<std::size_t>(3) * cfg.d + c] = data[static_cast<std::size_t>(1) * cfg.d + c];
    seq.grid_indices = {kClsIndex, 0, 1, 2, 3, 4, 5};

    Tensor t_cls = Tensor::randn({cfg.d}, rng, 1.0);
    Tensor patch_states = slice_rows(seq.states, 1, n);
    Tensor scores = tsps_score(patch_states, t_cls, model.tsps());
    REQUIRE(scores.dim(0) == n);
    for (double s : scores.data()) {
        CHECK(s > 0.0);
        CHECK(s < 1.0);
    }
    CHECK(scores.data()[0] == scores.data()[2]); // identical patches, identical scores

    // Permuting patch rows permutes scores identically.
    std::vector<int> perm = {5, 3, 4, 0, 1, 2};
    std::vector<int> perm_slots = {6, 4, 5, 1, 2, 3};
    Tensor permuted = gather_rows(seq.states, perm_slots);
    Tensor perm_scores = tsps_score(permuted, t_cls, model.tsps());
    for (int i = 0; i < n; ++i) {
        CHECK(perm_scores.data()[static_cast<std::size_t>(i)] ==
              scores.data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    }

    auto reference = tsps_reference(seq, t_cls.data(), model, cfg.d);
    for (int i = 0; i < n; ++i) {
        CHECK(scores.data()[static_cast<std::size_t>(i)] ==
              doctest::Approx(reference[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("mix_saliency endpoints and the hand-evaluated constant-vector case") {
    Tensor a = Tensor::from_data({2}, {0.2, 0.8});
    Tensor p = Tensor::from_data({2}, {0.5, 0.5});

    Tensor beta0 = mix_saliency(a, p, 0.0, NormKind::MinMax);
    CHECK(beta0.data()[0] == 0.5); // F_N of a constant vector
    CHECK(beta0.data()[1] == 0.5);

    Tensor beta1 = mix_saliency(a, p, 1.0, NormKind::MinMax);
    CHECK(beta1.data()[0] == doctest::Approx(0.0));
    CHECK(beta1.data()[1] == doctest::Approx(1.0));

    Tensor mixed = mix_saliency(a, p, 0.5, NormKind::MinMax);
    CHECK(mixed.data()[0] == doctest::Approx(0.25));
    CHECK(mixed.data()[1] == doctest::Approx(0.75));
}

TEST_CASE("mix_saliency beta=0 equals normalized attention exactly") {
    Rng rng(9);
    Tensor a = Tensor::randn({8}, rng, 1.0);
    Tensor p = Tensor::randn({8}, rng, 1.0);
    Tensor mixed = mix_saliency(a, p, 0.0, NormKind::MinMax);
    Tensor norm_p = minmax_norm(p);
    for (int i = 0; i < 8; ++i)
        CHECK(mixed.data()[static_cast<std::size_t>(i)] ==
              doctest::Approx(norm_p.data()[static_cast<std::size_t>(i)]).epsilon(1e-15));
}

TEST_CASE("mix_saliency degenerate single-patch rule and beta domain") {
    Tensor a = Tensor::from_data({1}, {0.9});
    Tensor p = Tensor::from_data({1}, {0.1});
    Tensor mixed = mix_saliency(a, p, 0.3, NormKind::MinMax);
    CHECK(mixed.data()[0] == 0.5);
    CHECK_THROWS_AS(mix_saliency(a, p, -0.1, NormKind::MinMax), ConfigError);
}

TEST_CASE("kpe_select: identity, hand case, reference-scale count") {
    Rng rng(31);
    SUBCASE("alpha=1 keeps everything in order with no fusion token") {
        PatchSequence seq = make_seq(6, rng);
        Tensor a_dot = Tensor::from_data({6}, {.1, .9, .3, .8, .2, .7});
        PatchSequence out = kpe_select(seq, a_dot, 1.0, true);
        CHECK(out.grid_indices == std::vector<int>{kClsIndex, 0, 1, 2, 3, 4, 5});
        CHECK_FALSE(out.has_fusion());
        CHECK(out.states.data() == seq.states.data());
    }
    SUBCASE("top-3 of the hand-built score vector") {
        PatchSequence seq = make_seq(6, rng);
        Tensor a_dot = Tensor::from_data({6}, {.1, .9, .3, .8, .2, .7});
        PatchSequence out = kpe_select(seq, a_dot, 0.5, false);
        CHECK(out.grid_indices == std::vector<int>{kClsIndex, 1, 3, 5});
    }
    SUBCASE("reference-scale keep count") {
        Config ref = Config::reference_scale();
        CHECK(ref.n_patches() == 196);
        CHECK(ref.kpe_keep() == 137);
        CHECK(ref.tpa_keep() == 27);
    }
}

TEST_CASE("kpe_select fusion token is the renormalized weighted mean of discards") {
    Rng rng(33);
    PatchSequence seq = make_seq(4, rng, 3);
    Tensor a_dot = Tensor::from_data({4}, {0.9, 0.05, 0.8, 0.15});
    PatchSequence out = kpe_select(seq, a_dot, 0.5, true);
    CHECK(out.grid_indices == std::vector<int>{kClsIndex, 0, 2, kFusionIndex});
    REQUIRE(out.slots() == 4);

    const double eps = 1e-12;
    const double w1 = 0.05 + eps, w3 = 0.15 + eps;
    for (int c = 0; c < 3; ++c) {
        const double expect = (w1 * seq.states.at(2, c) + w3 * seq.states.at(4, c)) / (w1 + w3);
        CHECK(out.states.at(3, c) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("kpe_select tie-break prefers the lower grid index") {
    Rng rng(35);
    PatchSequence seq = make_seq(4, rng);
    Tensor a_dot = Tensor::from_data({4}, {0.5, 0.5, 0.5, 0.9});
    PatchSequence out = kpe_select(seq, a_dot, 0.5, false);
    CHECK(out.grid_indices == std::vector<int>{kClsIndex, 0, 3});
}

TEST_CASE("kpe_select rejects a keep ratio that floors to zero") {
    Rng rng(36);
    PatchSequence seq = make_seq(4, rng);
    Tensor a_dot = Tensor::from_data({4}, {.1, .2, .3, .4});
    CHECK_THROWS_AS(kpe_select(seq, a_dot, 0.2, false), ConfigError);
}

TEST_CASE("tpa_select: identity, brute force, fusion token never seeds") {
    Rng rng(41);
    SUBCASE("gamma=1 keeps every retained patch as a seed") {
        PatchSequence seq = make_seq(5, rng);
        Tensor a_dot = Tensor::from_data({5}, {.5, .4, .3, .2, .1});
        PatchSequence seeds = tpa_select(seq, a_dot, 1.0);
        CHECK(seeds.grid_indices == std::vector<int>{kClsIndex, 0, 1, 2, 3, 4});
    }
    SUBCASE("u=10, gamma=0.3 equals brute-force top-3") {
        PatchSequence seq = make_seq(10, rng);
        std::vector<double> scores;
        Rng srng(43);
        for (int i = 0; i < 10; ++i) scores.push_back(srng.next_f64());
        Tensor a_dot = Tensor::from_data({10}, scores);
        PatchSequence seeds = tpa_select(seq, a_dot, 0.3);
        std::vector<int> got;
        for (int g : seeds.grid_indices)
            if (g >= 0) got.push_back(g);
        CHECK(got == brute_force_top_k(scores, 3));
    }
    SUBCASE("fusion slot is skipped") {
        PatchSequence seq = make_seq(4, rng);
        Tensor a_dot = Tensor::from_data({4}, {0.9, 0.05, 0.8, 0.15});
        PatchSequence reduced = kpe_select(seq, a_dot, 0.5, true);
        REQUIRE(reduced.has_fusion());
        PatchSequence seeds = tpa_select(reduced, a_dot, 0.5);
        for (int g : seeds.grid_indices) CHECK(g != kFusionIndex);
        CHECK(seeds.grid_indices == std::vector<int>{kClsIndex, 0});
    }
    SUBCASE("zero seeds is a configuration error") {
        PatchSequence seq = make_seq(4, rng);
        Tensor a_dot = Tensor::from_data({4}, {.1, .2, .3, .4});
        CHECK_THROWS_AS(tpa_select(seq, a_dot, 0.2), ConfigError);
    }
}

TEST_CASE("selection sets equal the exhaustive oracle on random instances") {
    Rng rng(51);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(63));
        std::vector<double> scores(static_cast<std::size_t>(n));
        for (auto& s : scores) s = rng.next_f64();
        const int u = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n)));
        PatchSequence seq = make_seq(n, rng, 4);
        const double alpha = (static_cast<double>(u) + 0.5) / static_cast<double>(n);
        PatchSequence out = kpe_select(seq, Tensor::from_data({n}, scores), std::min(alpha, 1.0), false);
        std::vector<int> got;
        for (int g : out.grid_indices)
            if (g >= 0) got.push_back(g);
        const int expect_u = static_cast<int>(std::floor(static_cast<double>(n) * std::min(alpha, 1.0)));
        CHECK(got == brute_force_top_k(scores, expect_u));
    }
}

TEST_CASE("argsort of mixed scores is invariant to positive affine raw-score maps") {
    Rng rng(61);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 3 + static_cast<int>(rng.next_below(20));
        std::vector<double> raw(static_cast<std::size_t>(n)), att(static_cast<std::size_t>(n));
        for (auto& v : raw) v = rng.next_f64();
        for (auto& v : att) v = rng.next_f64();
        const double c = 0.1 + 3.0 * rng.next_f64();
        const double b = -2.0 + 4.0 * rng.next_f64();
        std::vector<double> mapped(raw);
        for (auto& v : mapped) v = c * v + b;

        Tensor base = mix_saliency(Tensor::from_data({n}, raw), Tensor::from_data({n}, att), 0.6, NormKind::MinMax);
        Tensor moved = mix_saliency(Tensor::from_data({n}, mapped), Tensor::from_data({n}, att), 0.6, NormKind::MinMax);
        std::vector<int> o1(static_cast<std::size_t>(n)), o2(static_cast<std::size_t>(n));
        std::iota(o1.begin(), o1.end(), 0);
        std::iota(o2.begin(), o2.end(), 0);
        auto by = [](const Tensor& t) {
            return [&t](int x, int y) {
                if (t.data()[static_cast<std::size_t>(x)] != t.data()[static_cast<std::size_t>(y)])
                    return t.data()[static_cast<std::size_t>(x)] > t.data()[static_cast<std::size_t>(y)];
                return x < y;
            };
        };
        std::sort(o1.begin(), o1.end(), by(base));
        std::sort(o2.begin(), o2.end(), by(moved));
        CHECK(o1 == o2);
    }
}

TEST_CASE("mix_saliency is monotone per coordinate at fixed normalization statistics") {
    // Perturb one interior coordinate upward while min and max stay put: the
    // mixed score at that coordinate must not decrease (beta > 0 on a-side,
    // beta < 1 on p-side).
    Tensor a = Tensor::from_data({5}, {0.0, 0.4, 0.5, 0.6, 1.0});
    Tensor p = Tensor::from_data({5}, {0.0, 0.3, 0.5, 0.7, 1.0});
    Tensor base = mix_saliency(a, p, 0.5, NormKind::MinMax);

    Tensor a_up = Tensor::from_data({5}, {0.0, 0.4, 0.55, 0.6, 1.0});
    Tensor up = mix_saliency(a_up, p, 0.5, NormKind::MinMax);
    CHECK(up.data()[2] > base.data()[2]);

    Tensor p_up = Tensor::from_data({5}, {0.0, 0.3, 0.55, 0.7, 1.0});
    Tensor up2 = mix_saliency(a, p_up, 0.5, NormKind::MinMax);
    CHECK(up2.data()[2] > base.data()[2]);
}

TEST_CASE("pad_forward shape contract is independent of backbone length") {
    Config cfg;
    BusModel model(cfg, 81);
    Rng rng(83);
    PatchSequence seeds = make_seq(2, rng, cfg.d);
    for (int full_n : {4, 9, 16}) {
        PatchSequence full = make_seq(full_n, rng, cfg.d);
        PatchSequence out = pad_forward(seeds, full, model.pad());
        CHECK(out.slots() == seeds.slots());
        CHECK(out.grid_indices == seeds.grid_indices);
    }
}

TEST_CASE("pad_forward with zeroed cross-value path equals self-only recomputation") {
    Config cfg;
    BusModel model(cfg, 85);
    // Zero every cross-attention value/output path in the abstraction blocks.
    for (const auto& name : model.params().names()) {
        if (name.rfind("pad.", 0) == 0 &&
            (name.find(".cross.v.") != std::string::npos || name.find(".cross.o.") != std::string::npos)) {
            Tensor t = model.params().get(name);
            std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
        }
    }
    Rng rng(87);
    PatchSequence seeds = make_seq(3, rng, cfg.d);
    PatchSequence full = make_seq(10, rng, cfg.d);
    PatchSequence out = pad_forward(seeds, full, model.pad());

    // Self-attention-only recomputation: identical blocks minus the cross
    // sublayer (which is exactly zero under the zeroed projections).
    Tensor x = seeds.states;
    for (const auto& block : model.pad().blocks) {
        Tensor normed = block.ln_self(x);
        x = add(x, block.self_attn.forward(normed, normed, nullptr, false).out);
        x = add(x, block.ffn(block.ln_ffn(x)));
    }
    x = model.pad().final_ln(x);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(out.states.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("pad_forward output is sensitive to every backbone token") {
    Config cfg;
    BusModel model(cfg, 91);
    Rng rng(93);
    PatchSequence seeds = make_seq(2, rng, cfg.d);
    PatchSequence full = make_seq(6, rng, cfg.d);
    Tensor base = pad_forward(seeds, full, model.pad()).states;

    for (int slot = 0; slot < full.slots(); ++slot) {
        PatchSequence bumped = full;
        std::vector<double> data = full.states.data();
        data[static_cast<std::size_t>(slot) * cfg.d + 1] += 0.4;
        bumped.states = Tensor::from_data(full.states.shape(), std::move(data));
        Tensor moved = pad_forward(seeds, bumped, model.pad()).states;
        double diff = 0.0;
        for (std::size_t i = 0; i < moved.data().size(); ++i) diff += std::abs(moved.data()[i] - base.data()[i]);
        CHECK(diff > 0.0);
    }
}

TEST_CASE("pad_forward requires a non-empty backbone sequence") {
    Config cfg;
    BusModel model(cfg, 95);
    Rng rng(97);
    PatchSequence seeds = make_seq(2, rng, cfg.d);
    PatchSequence empty;
    CHECK_THROWS_AS(pad_forward(seeds, empty, model.pad()), StateError);
}

TEST_CASE("discarded tokens get zero gradient without fusion, nonzero with it") {
    Rng rng(101);
    Tensor a_dot = Tensor::from_data({4}, {0.9, 0.05, 0.8, 0.15}); // discards slots 2 and 4

    SUBCASE("fusion disabled") {
        PatchSequence seq = make_seq(4, rng, 3, /*requires_grad=*/true);
        PatchSequence out = kpe_select(seq, a_dot, 0.5, false);
        backward(sum_all(out.states));
        const auto& g = seq.states.grad();
        for (int c = 0; c < 3; ++c) {
            CHECK(g[static_cast<std::size_t>(2) * 3 + c] == 0.0);
            CHECK(g[static_cast<std::size_t>(4) * 3 + c] == 0.0);
            CHECK(g[static_cast<std::size_t>(1) * 3 + c] == 1.0);
        }
    }
    SUBCASE("fusion enabled") {
        PatchSequence seq = make_seq(4, rng, 3, /*requires_grad=*/true);
        PatchSequence out = kpe_select(seq, a_dot, 0.5, true);
        backward(sum_all(out.states));
        const auto& g = seq.states.grad();
        for (int slot : {2, 4}) {
            double mag = 0.0;
            for (int c = 0; c < 3; ++c) mag += std::abs(g[static_cast<std::size_t>(slot) * 3 + c]);
            CHECK(mag > 0.0);
        }
    }
}

TEST_CASE("retained-token gradients reach the raw image") {
    Config cfg;
    cfg.alpha = 0.5;
    cfg.fusion_token = false;
    BusModel model(cfg, 101);
    Rng rng(103);
    Tensor image = Tensor::randn({cfg.image_size, cfg.image_size, 3}, rng, 0.3, true);
    auto caption = Vocab::instance().tokenize("a red square alone in the image");

    TextEncoding text = model.text_encoder().encode(caption);
    auto vit = model.vision_encoder().forward(image, &text, 0.7, &model.tsps(), cfg);
    backward(sum_all(slice_rows(vit.seq.states, 1, vit.seq.patch_count())));
    double mag = 0.0;
    for (double g : image.grad()) mag += std::abs(g);
    CHECK(mag > 0.0);
}

TEST_CASE("mix_saliency softmax normalization alternative") {
    Tensor a = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor p = Tensor::from_data({3}, {0.2, 0.5, 0.3});

    Tensor mixed = mix_saliency(a, p, 1.0, NormKind::Softmax);
    Tensor expect = softmax_rows(a);
    for (int i = 0; i < 3; ++i)
        CHECK(mixed.data()[static_cast<std::size_t>(i)] ==
              doctest::Approx(expect.data()[static_cast<std::size_t>(i)]).epsilon(1e-15));

    // Softmax rows sum to one, so the mix at any beta sums to one as well.
    Tensor half = mix_saliency(a, p, 0.5, NormKind::Softmax);
    double sum = 0.0;
    for (double v : half.data()) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}
