#pragma once

#include "bus/config.hpp"
#include "bus/encoders.hpp"
#include "bus/objectives.hpp"
#include "bus/summarizer.hpp"

#include <memory>
#include <vector>

namespace bus {

// The full pipeline: text encoder, ViT with in-backbone key patch
// extraction, seed selection plus abstraction decoder, cross-modal fusion,
// generation decoder, and the loss heads.
class BusModel {
public:
    BusModel(const Config& cfg, std::uint64_t init_seed);

    struct PairForward {
        TextEncoding text;
        VisionEncoder::ForwardResult vit;
        PatchSequence summary;   // abstraction output fed to fusion
        FusedStates fused;
        Tensor img_emb;          // [1xd] contrastive projections
        Tensor txt_emb;
    };

    // Full forward on one image-caption pair. The text encoder always runs
    // first because extraction at layer k needs t_cls.
    PairForward forward_pair(const Tensor& image, const std::vector<int>& caption, double beta);

    // Seed selection + abstraction on a backbone result (no fusion).
    PatchSequence summarize(const VisionEncoder::ForwardResult& vit) const;

    Tensor itm_probability(const FusedStates& fused) const;  // [1]
    // Cross-entropy over masked positions of the fused text states.
    Tensor mlm_loss_from(const FusedStates& fused, const MlmMasking& masking,
                         const std::vector<int>& clean_ids) const;
    // Mean token cross-entropy of the decoder over shifted targets.
    Tensor prefix_lm_loss(const FusedStates& fused, const std::vector<int>& target_ids) const;

    Tensor temperature() const { return exp_t(log_tau_); }

    const Config& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    int vocab_size() const { return vocab_size_; }

    TextEncoder& text_encoder() { return text_; }
    VisionEncoder& vision_encoder() { return vision_; }
    const TspsHead& tsps() const { return tsps_; }
    const PadDecoder& pad() const { return pad_; }
    FusionEncoder& fusion_encoder() { return fusion_; }
    GenDecoder& decoder() { return decoder_; }

    // Names of the selector's parameters, for ablation checks.
    std::vector<std::string> tsps_param_names() const;

private:
    Config cfg_;
    int vocab_size_ = 0;
    ParamStore params_;
    TextEncoder text_;
    VisionEncoder vision_;
    TspsHead tsps_;
    PadDecoder pad_;
    FusionEncoder fusion_;
    GenDecoder decoder_;
    Linear itc_img_proj_, itc_txt_proj_;
    Tensor log_tau_;
    Linear itm_hidden_, itm_out_;
    Linear mlm_head_;
};

} // namespace bus
