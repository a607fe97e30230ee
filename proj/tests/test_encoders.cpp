#include <doctest.h>

#include "bus/encoders.hpp"
#include "bus/errors.hpp"
#include "bus/model.hpp"
#include "bus/rng.hpp"
#include "bus/vocab.hpp"

#include <cmath>
#include <filesystem>

using namespace bus;

namespace {

Config desk() { return Config{}; }

Tensor random_image(const Config& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> px(static_cast<std::size_t>(cfg.image_size) * cfg.image_size * 3);
    for (auto& v : px) v = rng.next_f64();
    return Tensor::from_data({cfg.image_size, cfg.image_size, 3}, std::move(px));
}

std::vector<int> tokens(const std::string& text) { return Vocab::instance().tokenize(text); }

} // namespace

TEST_CASE("patchify slot counts at both scales") {
    Config cfg = desk();
    BusModel model(cfg, 1);
    PatchSequence seq = model.vision_encoder().patchify(random_image(cfg, 3));
    CHECK(seq.slots() == 17); // 16 patches + CLS
    CHECK(seq.grid_indices[0] == kClsIndex);

    Config big = desk();
    big.image_size = 224;
    big.patch_size = 16;
    BusModel big_model(big, 1);
    PatchSequence big_seq = big_model.vision_encoder().patchify(random_image(big, 3));
    CHECK(big_seq.slots() == 197); // 196 patches + CLS
}

TEST_CASE("patchify rejects indivisible dimensions") {
    Tensor image = Tensor::zeros({30, 30, 3});
    CHECK_THROWS_AS(extract_patches(image, 8), ConfigError);
}

TEST_CASE("constant image yields identical patch vectors and embeddings before positions") {
    Config cfg = desk();
    Tensor image = Tensor::full({cfg.image_size, cfg.image_size, 3}, 0.75);
    Tensor patches = extract_patches(image, cfg.patch_size);
    for (int i = 1; i < patches.dim(0); ++i)
        for (int j = 0; j < patches.dim(1); ++j)
            CHECK(patches.at(i, j) == patches.at(0, j));

    BusModel model(cfg, 1);
    Tensor embedded = linear(patches, model.params().get("vit.patch.w"), model.params().get("vit.patch.b"));
    for (int i = 1; i < embedded.dim(0); ++i)
        for (int j = 0; j < embedded.dim(1); ++j)
            CHECK(embedded.at(i, j) == doctest::Approx(embedded.at(0, j)).epsilon(1e-14));
}

TEST_CASE("vit_forward at alpha=1 is bitwise identical to a disabled summarizer") {
    Config cfg = desk();
    cfg.alpha = 1.0;
    BusModel model(cfg, 5);
    Tensor image = random_image(cfg, 7);
    TextEncoding text = model.text_encoder().encode(tokens("a red square alone in the image"));

    auto with_kpe = model.vision_encoder().forward(image, &text, 0.4, &model.tsps(), cfg);
    Config off = cfg;
    off.kpe_enabled = false;
    auto without = model.vision_encoder().forward(image, &text, 0.4, nullptr, off);

    REQUIRE(with_kpe.seq.slots() == without.seq.slots());
    CHECK(with_kpe.seq.states.data() == without.seq.states.data());
    CHECK_FALSE(with_kpe.seq.has_fusion()); // full retention keeps no fusion token
}

TEST_CASE("vit_forward slot counts and retained-set oracle") {
    Config cfg = desk();
    cfg.alpha = 0.5; // u = 8 of 16
    BusModel model(cfg, 11);
    Tensor image = random_image(cfg, 13);
    TextEncoding text = model.text_encoder().encode(tokens("a blue circle alone in the image"));
    auto res = model.vision_encoder().forward(image, &text, 0.5, &model.tsps(), cfg);

    CHECK(res.seq.patch_count() == 8);
    CHECK(res.seq.has_fusion());
    CHECK(res.seq.slots() == 10); // CLS + 8 + fusion

    // Exhaustive-sort oracle over the mixed scores.
    REQUIRE(res.saliency.has_value());
    const auto& a_dot = res.saliency->a_dot.data();
    std::vector<int> order(a_dot.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int l, int r) {
        if (a_dot[static_cast<std::size_t>(l)] != a_dot[static_cast<std::size_t>(r)])
            return a_dot[static_cast<std::size_t>(l)] > a_dot[static_cast<std::size_t>(r)];
        return l < r;
    });
    std::vector<int> expect(order.begin(), order.begin() + 8);
    std::sort(expect.begin(), expect.end());
    std::vector<int> got;
    for (int g : res.seq.grid_indices)
        if (g >= 0) got.push_back(g);
    CHECK(got == expect);
}

TEST_CASE("vit_forward rejects beta outside [0,1]") {
    Config cfg = desk();
    BusModel model(cfg, 2);
    Tensor image = random_image(cfg, 2);
    TextEncoding text = model.text_encoder().encode(tokens("a red square alone in the image"));
    CHECK_THROWS_AS(model.vision_encoder().forward(image, &text, 1.5, &model.tsps(), cfg), ConfigError);
}

TEST_CASE("cls_attention: state error first, then head-mean of stochastic rows") {
    Config cfg = desk();
    BusModel model(cfg, 21);
    CHECK_THROWS_AS(model.vision_encoder().cls_attention(), StateError);

    Tensor image = random_image(cfg, 23);
    TextEncoding text = model.text_encoder().encode(tokens("a green circle alone in the image"));
    auto res = model.vision_encoder().forward(image, &text, 0.0, &model.tsps(), cfg);
    (void)res;

    Tensor p = model.vision_encoder().cls_attention();
    REQUIRE(p.dim(0) == cfg.n_patches());
    double sum = 0.0;
    for (double v : p.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        sum += v;
    }
    CHECK(sum <= 1.0 + 1e-12); // CLS self-attention excluded

    // Mean of the stored per-head rows reproduces it exactly.
    const auto& heads = model.vision_encoder().cls_attention_heads();
    REQUIRE(static_cast<int>(heads.size()) == cfg.heads);
    for (int i = 0; i < cfg.n_patches(); ++i) {
        double manual = 0.0;
        for (const auto& row : heads) manual += row.data()[static_cast<std::size_t>(i)];
        manual /= static_cast<double>(heads.size());
        CHECK(p.data()[static_cast<std::size_t>(i)] == doctest::Approx(manual).epsilon(1e-14));
    }
}

TEST_CASE("cls_attention is uniform for uniform keys") {
    Config cfg = desk();
    cfg.heads = 1;
    BusModel model(cfg, 22);
    // Constant image: every patch key at layer k is identical, so the CLS
    // query distributes attention equally over the patch slots.
    Tensor image = Tensor::full({cfg.image_size, cfg.image_size, 3}, 0.5);

    // Zero the position embeddings so patch states stay identical.
    Tensor pos = model.params().get("vit.pos");
    std::fill(pos.mutable_data().begin(), pos.mutable_data().end(), 0.0);

    TextEncoding text = model.text_encoder().encode(tokens("a red square alone in the image"));
    (void)model.vision_encoder().forward(image, &text, 0.0, &model.tsps(), cfg);
    Tensor p = model.vision_encoder().cls_attention();
    for (int i = 1; i < p.dim(0); ++i) {
        CHECK(p.data()[static_cast<std::size_t>(i)] ==
              doctest::Approx(p.data()[0]).epsilon(1e-12));
    }
}

TEST_CASE("text_encode: determinism, degenerate input, position sensitivity") {
    Config cfg = desk();
    BusModel model(cfg, 31);
    auto& text = model.text_encoder();

    TextEncoding empty = text.encode({});
    CHECK(empty.sequence.dim(0) == 1 + cfg.max_text_len);
    TextEncoding empty2 = text.encode({});
    CHECK(empty.sequence.data() == empty2.sequence.data());

    auto ids = tokens("a red square above a blue circle");
    TextEncoding e1 = text.encode(ids);
    TextEncoding e2 = text.encode(ids);
    CHECK(e1.t_cls.data() == e2.t_cls.data());

    std::swap(ids[1], ids[2]); // permute two non-pad tokens
    TextEncoding e3 = text.encode(ids);
    CHECK(e1.t_cls.data() != e3.t_cls.data());
}

TEST_CASE("text_encode rejects overlong and out-of-vocab input") {
    Config cfg = desk();
    BusModel model(cfg, 32);
    std::vector<int> too_long(static_cast<std::size_t>(cfg.max_text_len) + 1, 5);
    CHECK_THROWS_AS(model.text_encoder().encode(too_long), DataError);
    CHECK_THROWS_AS(model.text_encoder().encode({99999}), DataError);
}

TEST_CASE("fuse length contract and gradient reach back to pixels") {
    Config cfg = desk();
    BusModel model(cfg, 41);
    Tensor image = random_image(cfg, 43);
    Tensor leaf = Tensor::from_data(image.shape(), image.data(), true);

    auto fwd = model.forward_pair(leaf, tokens("a red square alone in the image"), 0.3);
    // s = floor(0.2 * 11) = 2 summary tokens + CLS on the visual side.
    CHECK(fwd.summary.slots() == 3);
    CHECK(fwd.fused.states.dim(0) == 3 + 1 + cfg.max_text_len);
    CHECK(fwd.fused.text_cls_slot == 3);

    backward(sum_all(fwd.fused.states));
    double grad_mag = 0.0;
    for (double g : leaf.grad()) grad_mag += std::abs(g);
    CHECK(grad_mag > 0.0);
}

TEST_CASE("fuse length: three summary tokens and five text slots make ten") {
    Config cfg = desk();
    cfg.max_text_len = 5;
    BusModel model(cfg, 46);
    PatchSequence summary;
    Rng rng(47);
    summary.states = Tensor::randn({4, cfg.d}, rng, 1.0); // CLS + s=3
    summary.grid_indices = {kClsIndex, 0, 1, 2};
    TextEncoding text = model.text_encoder().encode(tokens("a red square"));
    FusedStates fused = model.fusion_encoder().fuse(summary, text);
    CHECK(fused.states.dim(0) == 10); // two CLS slots + 8
}

TEST_CASE("fuse of zeroed states stays finite") {
    Config cfg = desk();
    BusModel model(cfg, 44);
    PatchSequence summary;
    summary.states = Tensor::zeros({3, cfg.d});
    summary.grid_indices = {kClsIndex, 0, 1};
    TextEncoding text = model.text_encoder().encode(tokens("a red square alone in the image"));
    text.sequence = Tensor::zeros({1 + cfg.max_text_len, cfg.d});
    FusedStates fused = model.fusion_encoder().fuse(summary, text);
    for (double v : fused.states.data()) CHECK(std::isfinite(v));
}

TEST_CASE("decoder causality and fused-state sensitivity") {
    Config cfg = desk();
    BusModel model(cfg, 51);
    Tensor image = random_image(cfg, 53);
    auto caption = tokens("a red square left of a blue circle");
    auto fwd = model.forward_pair(image, caption, 0.2);

    NoGradGuard no_grad;
    Tensor base = model.decoder().decode(fwd.fused, caption);
    REQUIRE(base.dim(0) == static_cast<int>(caption.size()) + 1);

    // Changing the token at position t leaves logits at positions <= t unchanged.
    auto changed = caption;
    changed[3] = tokens("circle")[0];
    Tensor after = model.decoder().decode(fwd.fused, changed);
    for (int t = 0; t <= 3; ++t)
        for (int vtok = 0; vtok < base.dim(1); ++vtok)
            CHECK(base.at(t, vtok) == after.at(t, vtok));
    bool later_differs = false;
    for (int vtok = 0; vtok < base.dim(1); ++vtok)
        if (base.at(4, vtok) != after.at(4, vtok)) later_differs = true;
    CHECK(later_differs);

    // Empty prefix: logits for the first token only.
    Tensor first = model.decoder().decode(fwd.fused, {});
    CHECK(first.dim(0) == 1);

    // Perturbing a fused state moves the logits at every position.
    FusedStates perturbed = fwd.fused;
    std::vector<double> bumped = fwd.fused.states.data();
    bumped[5] += 0.5;
    perturbed.states = Tensor::from_data(fwd.fused.states.shape(), std::move(bumped));
    Tensor moved = model.decoder().decode(perturbed, caption);
    for (int t = 0; t < moved.dim(0); ++t) {
        bool differs = false;
        for (int vtok = 0; vtok < moved.dim(1); ++vtok)
            if (moved.at(t, vtok) != base.at(t, vtok)) differs = true;
        CHECK(differs);
    }
}

TEST_CASE("decoder rejects an overlong prefix") {
    Config cfg = desk();
    BusModel model(cfg, 52);
    auto fwd = model.forward_pair(random_image(cfg, 55), tokens("a red square alone in the image"), 0.0);
    std::vector<int> prefix(static_cast<std::size_t>(cfg.max_text_len) + 1, 5);
    CHECK_THROWS_AS(model.decoder().decode(fwd.fused, prefix), DataError);
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
    Config cfg = desk();
    BusModel model(cfg, 61);
    const std::string path = (std::filesystem::temp_directory_path() / "bus_ckpt_test.bin").string();
    save_params(path, model.params());

    BusModel other(cfg, 62); // different init
    bool differed = false;
    for (const auto& name : model.params().names()) {
        if (model.params().get(name).data() != other.params().get(name).data()) differed = true;
    }
    CHECK(differed);

    load_params(path, other.params(), nullptr);
    for (const auto& name : model.params().names()) {
        CHECK(model.params().get(name).data() == other.params().get(name).data());
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint reader rejects corruption") {
    Config cfg = desk();
    BusModel model(cfg, 63);
    const auto path = std::filesystem::temp_directory_path() / "bus_ckpt_corrupt.bin";
    save_params(path.string(), model.params());

    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    ParamStore& store = model.params();
    CHECK_THROWS_AS(load_params(path.string(), store, nullptr), FormatError);
    std::filesystem::remove(path);
}
