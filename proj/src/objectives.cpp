#include "bus/objectives.hpp"

#include "bus/errors.hpp"
#include "bus/rng.hpp"
#include "bus/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bus {

PatchLabelMask bbox_to_patch_labels(const BoundingBox& box, int image_size, int patch_size) {
    if (box.w <= 0 || box.h <= 0) {
        throw DataError("degenerate bounding box " + std::to_string(box.w) + "x" + std::to_string(box.h));
    }
    if (patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch " + std::to_string(patch_size));
    }
    if (box.x + box.w <= 0 || box.y + box.h <= 0 || box.x >= image_size || box.y >= image_size) {
        throw DataError("bounding box lies fully outside the image");
    }
    const int grid = image_size / patch_size;
    PatchLabelMask mask;
    mask.y.assign(static_cast<std::size_t>(grid) * grid, 0.0);
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            const int px0 = gx * patch_size, px1 = px0 + patch_size;
            const int py0 = gy * patch_size, py1 = py0 + patch_size;
            const int ix = std::max(box.x, px0), iax = std::min(box.x + box.w, px1);
            const int iy = std::max(box.y, py0), iay = std::min(box.y + box.h, py1);
            if (ix < iax && iy < iay) mask.y[static_cast<std::size_t>(gy) * grid + gx] = 1.0;
        }
    }
    return mask;
}

std::vector<int> class_label_to_text(const std::string& label) {
    if (label.empty()) throw DataError("empty class label");
    return Vocab::instance().tokenize("this is a " + label);
}

Tensor ptm_loss(const Tensor& scores, const PatchLabelMask& labels) {
    if (scores.rank() != 1 || scores.dim(0) != labels.n()) {
        throw ShapeError("ptm_loss scores " + shape_str(scores.shape()) + " vs " +
                         std::to_string(labels.n()) + " labels");
    }
    return bce_mean(scores, labels.y, 1e-7);
}

ItcResult itc_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& tau) {
    if (img_emb.rank() != 2 || img_emb.shape() != txt_emb.shape()) {
        throw ShapeError("itc_loss embeddings " + shape_str(img_emb.shape()) + " vs " + shape_str(txt_emb.shape()));
    }
    const int B = img_emb.dim(0);
    if (B < 2) throw ConfigError("itc_loss needs a batch of at least 2, got " + std::to_string(B));
    if (tau.data()[0] <= 0.0) throw ConfigError("itc_loss temperature must be positive");

    Tensor zi = l2_normalize_rows(img_emb);
    Tensor zt = l2_normalize_rows(txt_emb);
    Tensor sim = matmul(zi, transpose(zt));
    Tensor logits = mul_scalar_t(sim, recip(tau));

    std::vector<int> diag(static_cast<std::size_t>(B));
    std::iota(diag.begin(), diag.end(), 0);
    Tensor i2t = cross_entropy_rows(logits, diag);
    Tensor t2i = cross_entropy_rows(transpose(logits), diag);
    return {scale(add(i2t, t2i), 0.5), sim};
}

std::vector<int> hard_negative_sample(const Tensor& sim, Rng& rng) {
    if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) {
        throw ShapeError("hard_negative_sample expects a square similarity matrix, got " + shape_str(sim.shape()));
    }
    const int B = sim.dim(0);
    if (B < 2) throw ConfigError("hard_negative_sample needs a batch of at least 2");
    std::vector<int> negatives(static_cast<std::size_t>(B));
    std::vector<double> probs(static_cast<std::size_t>(B - 1));
    std::vector<int> candidates(static_cast<std::size_t>(B - 1));
    for (int i = 0; i < B; ++i) {
        double row_max = -1e300;
        for (int j = 0; j < B; ++j) {
            if (j != i) row_max = std::max(row_max, sim.at(i, j));
        }
        int c = 0;
        for (int j = 0; j < B; ++j) {
            if (j == i) continue;
            candidates[static_cast<std::size_t>(c)] = j;
            probs[static_cast<std::size_t>(c)] = std::exp(sim.at(i, j) - row_max);
            ++c;
        }
        negatives[static_cast<std::size_t>(i)] =
            candidates[categorical_pick(probs, rng.next_f64())];
    }
    return negatives;
}

MlmMasking mlm_mask(const std::vector<int>& ids, double rate, Rng& rng) {
    const auto& vocab = Vocab::instance();
    std::vector<int> maskable;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!vocab.is_special(ids[i])) maskable.push_back(static_cast<int>(i));
    }
    if (maskable.empty()) throw DataError("mlm_mask input has no maskable token");

    MlmMasking out;
    out.masked_ids = ids;
    for (int pos : maskable) {
        if (rng.next_f64() < rate) out.positions.push_back(pos);
    }
    if (out.positions.empty()) {
        out.positions.push_back(maskable[static_cast<std::size_t>(rng.next_below(maskable.size()))]);
    }
    for (int pos : out.positions) out.masked_ids[static_cast<std::size_t>(pos)] = vocab.mask();
    return out;
}

LossBundle make_loss_bundle(double itc, double itm, double mlm, double prefix, double ptm) {
    const std::pair<const char*, double> parts[] = {
        {"itc", itc}, {"itm", itm}, {"mlm", mlm}, {"prefix", prefix}, {"ptm", ptm}};
    for (const auto& [name, value] : parts) {
        if (!std::isfinite(value)) {
            throw NumericError(std::string("loss part ") + name + " is not finite");
        }
    }
    LossBundle b{itc, itm, mlm, prefix, ptm, 0.0};
    b.total = ((((itc + itm) + mlm) + prefix) + ptm);
    return b;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw ShapeError("roc_auc needs matching non-empty scores and labels");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Mid-rank assignment for ties, then the Mann-Whitney statistic.
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    double pos = 0.0, rank_sum = 0.0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        if (labels[k] == 1) {
            pos += 1.0;
            rank_sum += rank[k];
        }
    }
    const double neg = static_cast<double>(labels.size()) - pos;
    if (pos == 0.0 || neg == 0.0) throw DataError("roc_auc needs both classes present");
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

} // namespace bus
