#include "bus/model.hpp"

#include "bus/errors.hpp"
#include "bus/rng.hpp"
#include "bus/vocab.hpp"

#include <cmath>

namespace bus {

BusModel::BusModel(const Config& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    vocab_size_ = Vocab::instance().size();
    Rng rng = Rng(init_seed).split("init");

    text_ = TextEncoder(params_, "text", cfg_, vocab_size_, rng);
    vision_ = VisionEncoder(params_, "vit", cfg_, rng);
    tsps_ = TspsHead(params_, "tsps", cfg_.d, cfg_.d, rng);
    pad_ = PadDecoder(params_, "pad", cfg_.pad_layers, cfg_.d, cfg_.heads, rng);
    fusion_ = FusionEncoder(params_, "fusion", cfg_, rng);
    decoder_ = GenDecoder(params_, "decoder", cfg_, vocab_size_, rng);

    itc_img_proj_ = Linear(params_, "itc.img", cfg_.d, cfg_.d, rng);
    itc_txt_proj_ = Linear(params_, "itc.txt", cfg_.d, cfg_.d, rng);
    log_tau_ = params_.create_const("itc.log_tau", {1}, std::log(cfg_.itc_temperature));
    itm_hidden_ = Linear(params_, "itm.hidden", cfg_.d, cfg_.d, rng);
    itm_out_ = Linear(params_, "itm.out", cfg_.d, 1, rng);
    mlm_head_ = Linear(params_, "mlm.head", cfg_.d, vocab_size_, rng);
}

PatchSequence BusModel::summarize(const VisionEncoder::ForwardResult& vit) const {
    if (!cfg_.tpa_enabled) return vit.seq;
    if (!vit.saliency) throw StateError("abstraction needs the layer-k saliency record");
    PatchSequence seeds = tpa_select(vit.seq, vit.saliency->a_dot, cfg_.gamma);
    return pad_forward(seeds, vit.seq, pad_);
}

BusModel::PairForward BusModel::forward_pair(const Tensor& image, const std::vector<int>& caption, double beta) {
    PairForward out;
    out.text = text_.encode(caption);
    out.vit = vision_.forward(image, &out.text, beta, &tsps_, cfg_);
    out.summary = summarize(out.vit);
    out.fused = fusion_.fuse(out.summary, out.text);
    out.img_emb = itc_img_proj_(out.vit.img_cls);
    Tensor t_cls_row = slice_rows(out.text.sequence, 0, 1);
    out.txt_emb = itc_txt_proj_(t_cls_row);
    return out;
}

Tensor BusModel::itm_probability(const FusedStates& fused) const {
    Tensor joint = slice_rows(fused.states, fused.text_cls_slot, 1);
    Tensor h = gelu(itm_hidden_(joint));
    return sigmoid(itm_out_(h)); // [1x1]
}

Tensor BusModel::mlm_loss_from(const FusedStates& fused, const MlmMasking& masking,
                               const std::vector<int>& clean_ids) const {
    if (masking.positions.empty()) throw DataError("mlm loss needs at least one masked position");
    std::vector<int> slot_idx;
    std::vector<int> targets;
    for (int pos : masking.positions) {
        if (pos < 0 || pos >= static_cast<int>(clean_ids.size())) {
            throw ShapeError("masked position " + std::to_string(pos) + " outside the token list");
        }
        slot_idx.push_back(fused.visual_len + 1 + pos);
        targets.push_back(clean_ids[static_cast<std::size_t>(pos)]);
    }
    Tensor states = gather_rows(fused.states, slot_idx);
    return cross_entropy_rows(mlm_head_(states), targets);
}

Tensor BusModel::prefix_lm_loss(const FusedStates& fused, const std::vector<int>& target_ids) const {
    if (target_ids.empty()) throw DataError("prefix loss needs a non-empty target");
    std::vector<int> prefix(target_ids.begin(), target_ids.end() - 1);
    Tensor logits = decoder_.decode(fused, prefix); // rows: one per target
    return cross_entropy_rows(logits, target_ids);
}

std::vector<std::string> BusModel::tsps_param_names() const {
    std::vector<std::string> names;
    for (const auto& name : params_.names()) {
        if (name.rfind("tsps.", 0) == 0) names.push_back(name);
    }
    return names;
}

} // namespace bus
