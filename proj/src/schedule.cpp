#include "bus/schedule.hpp"

#include "bus/errors.hpp"

#include <chrono>
#include <cmath>
#include <cstring>

namespace bus {

AdamW::AdamW(const Config& cfg, int total_steps)
    : lr_(cfg.lr),
      lr_floor_(cfg.lr_floor),
      wd_(cfg.weight_decay),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      clip_(cfg.clip_norm),
      warmup_(cfg.warmup_iters),
      total_steps_(std::max(total_steps, 1)) {}

double AdamW::lr_at(int step) const {
    if (warmup_ > 0 && step < warmup_) {
        return lr_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
    }
    const int decay_span = std::max(total_steps_ - warmup_, 1);
    const double progress = std::min(1.0, static_cast<double>(step - warmup_) / static_cast<double>(decay_span));
    return lr_floor_ + 0.5 * (lr_ - lr_floor_) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void AdamW::step(ParamStore& params) {
    // Global gradient-norm clip across every parameter.
    double sq = 0.0;
    for (const auto& name : params.names()) {
        const auto& g = params.get(name).grad();
        for (double x : g) {
            if (std::isnan(x)) throw NumericError("NaN gradient in parameter " + name);
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    const double clip_scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;

    const double lr = lr_at(t_);
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& name : params.names()) {
        Tensor p = params.get(name);
        const auto& grad = p.grad();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() != p.data().size()) m.assign(p.data().size(), 0.0);
        if (v.size() != p.data().size()) v.assign(p.data().size(), 0.0);
        auto& w = p.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = (grad.empty() ? 0.0 : grad[i]) * clip_scale;
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
        }
    }
}

std::vector<std::pair<std::string, Tensor>> AdamW::moments() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, m] : m_) {
        out.emplace_back("opt.m." + name, Tensor::from_data({static_cast<int>(m.size())}, m));
    }
    for (const auto& [name, v] : v_) {
        out.emplace_back("opt.v." + name, Tensor::from_data({static_cast<int>(v.size())}, v));
    }
    return out;
}

void AdamW::restore_moments(const std::vector<std::pair<std::string, Tensor>>& entries, int steps_taken) {
    t_ = steps_taken;
    for (const auto& [name, tensor] : entries) {
        if (name.rfind("opt.m.", 0) == 0) {
            m_[name.substr(6)] = tensor.data();
        } else if (name.rfind("opt.v.", 0) == 0) {
            v_[name.substr(6)] = tensor.data();
        }
    }
}

double beta_schedule(const TrainState& state, const Config& cfg) {
    if (cfg.beta_max <= 0.0) return 0.0;
    if (state.gate_step < 0) return 0.0;
    const int ramp = std::max(cfg.beta_warmup_steps, 1);
    const double frac = std::min(1.0, static_cast<double>(state.step - state.gate_step) / static_cast<double>(ramp));
    return cfg.beta_max * frac;
}

Trainer::Trainer(BusModel& model, const Config& cfg, int total_steps)
    : model_(model),
      cfg_(cfg),
      opt_(cfg, total_steps),
      mask_rng_(Rng(cfg.seed).split("masking")),
      negative_rng_(Rng(cfg.seed).split("negatives")) {}

StepReport Trainer::train_step(const std::vector<SynthSample>& batch_o,
                               const std::vector<SynthSample>& batch_d) {
    if (batch_d.size() < 2) {
        throw ConfigError("train_step needs a paired batch of at least 2 for in-batch contrast");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const double beta = beta_schedule(state_, cfg_);

    StepReport report;
    report.step = state_.step;
    report.beta = beta;

    // Object/region pass: alignment-score supervision from box labels.
    Tensor ptm_total;
    for (const auto& sample : batch_o) {
        if (!sample.has_box) throw DataError("object/region sample without a bounding box");
        TextEncoding text = model_.text_encoder().encode(sample.caption);
        auto vit = model_.vision_encoder().forward(sample.image(), &text, beta, &model_.tsps(), cfg_);
        if (!vit.saliency) throw StateError("object/region pass needs the saliency record");
        PatchLabelMask labels = bbox_to_patch_labels(sample.box, cfg_.image_size, cfg_.patch_size);
        Tensor loss = ptm_loss(vit.saliency->a, labels);
        ptm_total = ptm_total.defined() ? add(ptm_total, loss) : loss;
    }
    if (ptm_total.defined()) ptm_total = scale(ptm_total, 1.0 / static_cast<double>(batch_o.size()));

    // Paired pass: the four standard objectives.
    const int B = static_cast<int>(batch_d.size());
    std::vector<BusModel::PairForward> forwards;
    forwards.reserve(static_cast<std::size_t>(B));
    std::vector<Tensor> img_rows, txt_rows;
    for (const auto& sample : batch_d) {
        forwards.push_back(model_.forward_pair(sample.image(), sample.caption, beta));
        img_rows.push_back(forwards.back().img_emb);
        txt_rows.push_back(forwards.back().txt_emb);
    }
    ItcResult itc = itc_loss(concat_rows(img_rows), concat_rows(txt_rows), model_.temperature());

    std::vector<int> negatives = hard_negative_sample(itc.sim, negative_rng_);
    std::vector<Tensor> itm_probs;
    std::vector<double> itm_labels;
    for (int i = 0; i < B; ++i) {
        itm_probs.push_back(model_.itm_probability(forwards[static_cast<std::size_t>(i)].fused));
        itm_labels.push_back(1.0);
        FusedStates neg = model_.fusion_encoder().fuse(forwards[static_cast<std::size_t>(i)].summary,
                                                       forwards[static_cast<std::size_t>(negatives[static_cast<std::size_t>(i)])].text);
        itm_probs.push_back(model_.itm_probability(neg));
        itm_labels.push_back(0.0);
    }
    Tensor itm = bce_mean(flatten(concat_rows(itm_probs)), itm_labels);

    Tensor mlm_total, prefix_total;
    for (int i = 0; i < B; ++i) {
        const auto& sample = batch_d[static_cast<std::size_t>(i)];
        MlmMasking masking = mlm_mask(sample.caption, cfg_.mlm_rate, mask_rng_);
        TextEncoding masked_text = model_.text_encoder().encode(masking.masked_ids);
        FusedStates fused_mlm = model_.fusion_encoder().fuse(forwards[static_cast<std::size_t>(i)].summary, masked_text);
        Tensor mlm_i = model_.mlm_loss_from(fused_mlm, masking, sample.caption);
        mlm_total = mlm_total.defined() ? add(mlm_total, mlm_i) : mlm_i;

        Tensor prefix_i = model_.prefix_lm_loss(forwards[static_cast<std::size_t>(i)].fused, sample.caption);
        prefix_total = prefix_total.defined() ? add(prefix_total, prefix_i) : prefix_i;
    }
    mlm_total = scale(mlm_total, 1.0 / static_cast<double>(B));
    prefix_total = scale(prefix_total, 1.0 / static_cast<double>(B));

    // Equal weights, fixed summation order, one backward over the sum.
    Tensor total = add(add(add(itc.loss, itm), mlm_total), prefix_total);
    if (ptm_total.defined()) total = add(total, ptm_total);
    const double ptm_value = ptm_total.defined() ? ptm_total.item() : 0.0;
    report.losses = make_loss_bundle(itc.loss.item(), itm.item(), mlm_total.item(),
                                     prefix_total.item(), ptm_value);

    model_.params().zero_grads();
    backward(total);
    opt_.step(model_.params());

    // Gate bookkeeping: EMA over the PTM loss, latched ramp start.
    if (ptm_total.defined()) {
        state_.ptm_ema = std::isnan(state_.ptm_ema)
                             ? ptm_value
                             : cfg_.ema_decay * state_.ptm_ema + (1.0 - cfg_.ema_decay) * ptm_value;
        if (state_.gate_step < 0 && state_.ptm_ema < cfg_.ema_threshold) {
            state_.gate_step = state_.step;
        }
    }
    state_.beta = beta;
    ++state_.step;

    report.u = forwards.back().vit.seq.patch_count();
    report.s = forwards.back().summary.patch_count();
    report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

namespace {

double bits_as_double(std::uint64_t bits) {
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

std::uint64_t double_as_bits(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    return bits;
}

} // namespace

void Trainer::save_checkpoint(const std::string& path) const {
    std::vector<std::pair<std::string, Tensor>> extra = opt_.moments();
    extra.emplace_back("state.step", Tensor::scalar(static_cast<double>(state_.step)));
    extra.emplace_back("state.gate_step", Tensor::scalar(static_cast<double>(state_.gate_step)));
    extra.emplace_back("state.ptm_ema", Tensor::scalar(state_.ptm_ema));
    extra.emplace_back("state.beta", Tensor::scalar(state_.beta));
    extra.emplace_back("state.opt_steps", Tensor::scalar(static_cast<double>(opt_.steps_taken())));
    extra.emplace_back("state.mask_rng", Tensor::scalar(bits_as_double(mask_rng_.state())));
    extra.emplace_back("state.negative_rng", Tensor::scalar(bits_as_double(negative_rng_.state())));
    save_params(path, model_.params(), extra);
}

void Trainer::load_checkpoint(const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> extra;
    load_params(path, model_.params(), &extra);
    std::vector<std::pair<std::string, Tensor>> moment_entries;
    int opt_steps = 0;
    for (const auto& [name, tensor] : extra) {
        if (name == "state.step") state_.step = static_cast<int>(tensor.item());
        else if (name == "state.gate_step") state_.gate_step = static_cast<int>(tensor.item());
        else if (name == "state.ptm_ema") state_.ptm_ema = tensor.item();
        else if (name == "state.beta") state_.beta = tensor.item();
        else if (name == "state.opt_steps") opt_steps = static_cast<int>(tensor.item());
        else if (name == "state.mask_rng") mask_rng_.set_state(double_as_bits(tensor.item()));
        else if (name == "state.negative_rng") negative_rng_.set_state(double_as_bits(tensor.item()));
        else moment_entries.emplace_back(name, tensor);
    }
    opt_.restore_moments(moment_entries, opt_steps);
}

EvalReport evaluate(BusModel& model, const std::vector<SynthSample>& paired,
                    const std::vector<SynthSample>& region, double beta, std::uint64_t eval_seed) {
    NoGradGuard no_grad;
    const Config& cfg = model.config();
    Rng mask_rng = Rng(eval_seed).split("eval-mask");
    Rng neg_rng = Rng(eval_seed).split("eval-neg");

    double ptm_sum = 0.0;
    for (const auto& sample : region) {
        TextEncoding text = model.text_encoder().encode(sample.caption);
        auto vit = model.vision_encoder().forward(sample.image(), &text, beta, &model.tsps(), cfg);
        PatchLabelMask labels = bbox_to_patch_labels(sample.box, cfg.image_size, cfg.patch_size);
        ptm_sum += ptm_loss(vit.saliency->a, labels).item();
    }
    const double ptm = region.empty() ? 0.0 : ptm_sum / static_cast<double>(region.size());

    const int B = static_cast<int>(paired.size());
    if (B < 2) throw ConfigError("evaluate needs at least 2 paired samples");
    std::vector<BusModel::PairForward> forwards;
    std::vector<Tensor> img_rows, txt_rows;
    for (const auto& sample : paired) {
        forwards.push_back(model.forward_pair(sample.image(), sample.caption, beta));
        img_rows.push_back(forwards.back().img_emb);
        txt_rows.push_back(forwards.back().txt_emb);
    }
    ItcResult itc = itc_loss(concat_rows(img_rows), concat_rows(txt_rows), model.temperature());
    std::vector<int> negatives = hard_negative_sample(itc.sim, neg_rng);
    std::vector<Tensor> itm_probs;
    std::vector<double> itm_labels;
    double mlm_sum = 0.0, prefix_sum = 0.0;
    for (int i = 0; i < B; ++i) {
        itm_probs.push_back(model.itm_probability(forwards[static_cast<std::size_t>(i)].fused));
        itm_labels.push_back(1.0);
        FusedStates neg = model.fusion_encoder().fuse(forwards[static_cast<std::size_t>(i)].summary,
                                                      forwards[static_cast<std::size_t>(negatives[static_cast<std::size_t>(i)])].text);
        itm_probs.push_back(model.itm_probability(neg));
        itm_labels.push_back(0.0);

        const auto& sample = paired[static_cast<std::size_t>(i)];
        MlmMasking masking = mlm_mask(sample.caption, cfg.mlm_rate, mask_rng);
        TextEncoding masked_text = model.text_encoder().encode(masking.masked_ids);
        FusedStates fused_mlm = model.fusion_encoder().fuse(forwards[static_cast<std::size_t>(i)].summary, masked_text);
        mlm_sum += model.mlm_loss_from(fused_mlm, masking, sample.caption).item();
        prefix_sum += model.prefix_lm_loss(forwards[static_cast<std::size_t>(i)].fused, sample.caption).item();
    }
    Tensor itm = bce_mean(flatten(concat_rows(itm_probs)), itm_labels);

    EvalReport report;
    report.losses = make_loss_bundle(itc.loss.item(), itm.item(), mlm_sum / B, prefix_sum / B, ptm);
    report.tsps_auc = region.empty() ? 0.0 : tsps_patch_auc(model, region, beta);
    return report;
}

double tsps_patch_auc(BusModel& model, const std::vector<SynthSample>& region, double beta) {
    NoGradGuard no_grad;
    const Config& cfg = model.config();
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& sample : region) {
        TextEncoding text = model.text_encoder().encode(sample.caption);
        auto vit = model.vision_encoder().forward(sample.image(), &text, beta, &model.tsps(), cfg);
        PatchLabelMask mask = bbox_to_patch_labels(sample.box, cfg.image_size, cfg.patch_size);
        const auto& a = vit.saliency->a.data();
        for (int i = 0; i < mask.n(); ++i) {
            scores.push_back(a[static_cast<std::size_t>(i)]);
            labels.push_back(mask.y[static_cast<std::size_t>(i)] > 0.5 ? 1 : 0);
        }
    }
    return roc_auc(scores, labels);
}

SynthSample batch_sample(std::uint64_t data_seed, SampleKind kind, int step, int index, int image_size) {
    Rng stream = Rng(data_seed).split(kind == SampleKind::Paired ? "data-paired" : "data-region");
    // Per-(step, index) leaf seed; the generator derives its own stream.
    const std::uint64_t leaf = stream.state() ^ (static_cast<std::uint64_t>(step) * 0x9e3779b97f4a7c15ULL) ^
                               (static_cast<std::uint64_t>(index) + 0x51ed2701u);
    return generate(leaf, kind, image_size);
}

} // namespace bus
