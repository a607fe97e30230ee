#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bus {

// Saliency normalization choices for the score mixing step.
enum class NormKind { MinMax, Softmax };

NormKind norm_kind_from_string(const std::string& s);
std::string to_string(NormKind k);

// All architecture and summarization hyperparameters plus run settings, as a
// flat structured-text config of dotted keys. Every key has a default; an
// unknown key is an error naming the key (no silent fallthrough for typos).
struct Config {
    // model.*
    int image_size = 32;
    int patch_size = 8;
    int d = 64;
    int heads = 4;
    int vit_layers = 4;     // N
    int text_layers = 3;
    int pad_layers = 2;
    int fusion_layers = 2;
    int decoder_layers = 2;
    int max_text_len = 12;  // m

    // kpe.*
    int k = 2;              // insertion layer, 1 <= k < N
    double alpha = 0.7;     // keep ratio, (0,1]
    bool fusion_token = true;
    NormKind norm = NormKind::MinMax;

    // tpa.*
    double gamma = 0.2;     // keep ratio over retained tokens, (0,1]
    bool kpe_enabled = true;
    bool tpa_enabled = true;

    // schedule.*
    double beta_max = 0.8;
    int beta_warmup_steps = 100;
    double ema_decay = 0.99;
    double ema_threshold = 0.311916; // 0.45 * ln 2
    bool text_guidance = true;       // ablation: force beta = 0 when false

    // opt.*
    double lr = 2e-3;          // eta
    double lr_floor = 1e-5;
    int warmup_iters = 10;
    double weight_decay = 0.02;
    double clip_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    // losses
    double itc_temperature = 0.07;
    double mlm_rate = 0.15;

    // train.*
    int steps = 200;
    int batch_d = 8;
    int batch_o = 8;
    int checkpoint_every = 0;  // 0: only at end
    int eval_samples = 200;

    // bench.*
    int bench_warmup = 5;
    int bench_iters = 30;
    int bench_batch = 4;

    std::uint64_t seed = 42;

    // Derived quantities.
    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int kpe_keep() const;   // u = floor(n * alpha)
    int tpa_keep() const;   // s = floor(gamma * u)

    void validate() const;

    // key=value application; throws ConfigError naming unknown keys.
    void set(const std::string& key, const std::string& value);
    // Effective config as "key=value" lines in a fixed order.
    std::string serialize() const;

    static Config from_file(const std::string& path);
    static Config reference_scale(); // reference dims used by the FLOPs model
};

Config parse_config_text(const std::string& text);

} // namespace bus
