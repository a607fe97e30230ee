#pragma once

#include "bus/synthdata.hpp"
#include "bus/tensor.hpp"

#include <string>
#include <vector>

namespace bus {

class Rng;

// Binary patch labels over the grid, row-major.
struct PatchLabelMask {
    std::vector<double> y;
    int n() const { return static_cast<int>(y.size()); }
};

// Y_i = 1 iff patch i's pixel rectangle and the box intersect with positive
// area. Degenerate boxes and boxes fully outside the image are data errors.
PatchLabelMask bbox_to_patch_labels(const BoundingBox& box, int image_size, int patch_size);

// "this is a <label>" templated and tokenized; unknown words throw.
std::vector<int> class_label_to_text(const std::string& label);

// Mean binary cross-entropy between alignment scores and patch labels,
// scores clamped to [1e-7, 1-1e-7]. Non-negative; zero iff clamped scores
// equal the labels.
Tensor ptm_loss(const Tensor& scores, const PatchLabelMask& labels);

struct ItcResult {
    Tensor loss;
    Tensor sim; // [BxB] cosine similarities of the normalized projections
};

// Symmetric InfoNCE over L2-normalized rows with matched diagonal targets;
// tau is the learnable temperature as a [1] tensor.
ItcResult itc_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& tau);

// For each image row, one negative text index sampled with probability
// proportional to exp(similarity), self excluded.
std::vector<int> hard_negative_sample(const Tensor& sim, Rng& rng);

struct MlmMasking {
    std::vector<int> masked_ids;
    std::vector<int> positions; // indices into the token list
};

// Independently masks non-special tokens with probability `rate`, replacing
// them with [MASK]; forces one masked position when none is drawn. Input with
// no maskable token is a data error.
MlmMasking mlm_mask(const std::vector<int>& ids, double rate, Rng& rng);

struct LossBundle {
    double itc = 0.0;
    double itm = 0.0;
    double mlm = 0.0;
    double prefix = 0.0;
    double ptm = 0.0;
    double total = 0.0;
};

// total = itc+itm+mlm+prefix+ptm in exactly that order; a non-finite part is
// a numeric error naming the part.
LossBundle make_loss_bundle(double itc, double itm, double mlm, double prefix, double ptm);

// Rank-based ROC AUC (ties get mid-ranks); labels are 0/1.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

} // namespace bus
