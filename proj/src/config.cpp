#include "bus/config.hpp"

#include "bus/errors.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace bus {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("key " + key + " expects an integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("key " + key + " expects a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("key " + key + " expects a boolean, got '" + v + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(r);
    } catch (const std::exception&) {
        throw ConfigError("key " + key + " expects an unsigned integer, got '" + v + "'");
    }
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

std::string num_str(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

NormKind norm_kind_from_string(const std::string& s) {
    if (s == "minmax") return NormKind::MinMax;
    if (s == "softmax") return NormKind::Softmax;
    throw ConfigError("key kpe.norm expects minmax|softmax, got '" + s + "'");
}

std::string to_string(NormKind k) { return k == NormKind::MinMax ? "minmax" : "softmax"; }

int Config::kpe_keep() const {
    return static_cast<int>(std::floor(static_cast<double>(n_patches()) * alpha));
}

int Config::tpa_keep() const {
    return static_cast<int>(std::floor(gamma * static_cast<double>(kpe_keep())));
}

void Config::validate() const {
    if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("model.image_size must be a positive multiple of model.patch_size");
    }
    if (d <= 0 || heads <= 0 || d % heads != 0) throw ConfigError("model.d must be divisible by model.heads");
    if (vit_layers < 2) throw ConfigError("model.vit_layers must be at least 2");
    if (k < 1 || k >= vit_layers) throw ConfigError("kpe.k must satisfy 1 <= k < model.vit_layers");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("kpe.alpha must be in (0,1]");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("tpa.gamma must be in (0,1]");
    if (beta_max < 0.0 || beta_max > 1.0) throw ConfigError("schedule.beta_max must be in [0,1]");
    if (max_text_len < 1) throw ConfigError("model.max_text_len must be positive");
    if (kpe_enabled && kpe_keep() == 0) {
        throw ConfigError("kpe.alpha " + num_str(alpha) + " keeps zero of " + std::to_string(n_patches()) + " patches");
    }
    if (tpa_enabled && tpa_keep() == 0) {
        throw ConfigError("tpa.gamma " + num_str(gamma) + " keeps zero of " + std::to_string(kpe_keep()) + " retained tokens");
    }
}

namespace {

struct KeyBinding {
    std::function<void(Config&, const std::string&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

const std::vector<std::pair<std::string, KeyBinding>>& key_table() {
    static const std::vector<std::pair<std::string, KeyBinding>> table = {
        {"model.image_size", {[](Config& c, const std::string& k, const std::string& v) { c.image_size = to_int(k, v); },
                              [](const Config& c) { return std::to_string(c.image_size); }}},
        {"model.patch_size", {[](Config& c, const std::string& k, const std::string& v) { c.patch_size = to_int(k, v); },
                              [](const Config& c) { return std::to_string(c.patch_size); }}},
        {"model.d", {[](Config& c, const std::string& k, const std::string& v) { c.d = to_int(k, v); },
                     [](const Config& c) { return std::to_string(c.d); }}},
        {"model.heads", {[](Config& c, const std::string& k, const std::string& v) { c.heads = to_int(k, v); },
                         [](const Config& c) { return std::to_string(c.heads); }}},
        {"model.vit_layers", {[](Config& c, const std::string& k, const std::string& v) { c.vit_layers = to_int(k, v); },
                              [](const Config& c) { return std::to_string(c.vit_layers); }}},
        {"model.text_layers", {[](Config& c, const std::string& k, const std::string& v) { c.text_layers = to_int(k, v); },
                               [](const Config& c) { return std::to_string(c.text_layers); }}},
        {"model.pad_layers", {[](Config& c, const std::string& k, const std::string& v) { c.pad_layers = to_int(k, v); },
                              [](const Config& c) { return std::to_string(c.pad_layers); }}},
        {"model.fusion_layers", {[](Config& c, const std::string& k, const std::string& v) { c.fusion_layers = to_int(k, v); },
                                 [](const Config& c) { return std::to_string(c.fusion_layers); }}},
        {"model.decoder_layers", {[](Config& c, const std::string& k, const std::string& v) { c.decoder_layers = to_int(k, v); },
                                  [](const Config& c) { return std::to_string(c.decoder_layers); }}},
        {"model.max_text_len", {[](Config& c, const std::string& k, const std::string& v) { c.max_text_len = to_int(k, v); },
                                [](const Config& c) { return std::to_string(c.max_text_len); }}},
        {"kpe.k", {[](Config& c, const std::string& k, const std::string& v) { c.k = to_int(k, v); },
                   [](const Config& c) { return std::to_string(c.k); }}},
        {"kpe.alpha", {[](Config& c, const std::string& k, const std::string& v) { c.alpha = to_double(k, v); },
                       [](const Config& c) { return num_str(c.alpha); }}},
        {"kpe.fusion_token", {[](Config& c, const std::string& k, const std::string& v) { c.fusion_token = to_bool(k, v); },
                              [](const Config& c) { return bool_str(c.fusion_token); }}},
        {"kpe.norm", {[](Config& c, const std::string&, const std::string& v) { c.norm = norm_kind_from_string(v); },
                      [](const Config& c) { return to_string(c.norm); }}},
        {"kpe.enabled", {[](Config& c, const std::string& k, const std::string& v) { c.kpe_enabled = to_bool(k, v); },
                         [](const Config& c) { return bool_str(c.kpe_enabled); }}},
        {"tpa.gamma", {[](Config& c, const std::string& k, const std::string& v) { c.gamma = to_double(k, v); },
                       [](const Config& c) { return num_str(c.gamma); }}},
        {"tpa.enabled", {[](Config& c, const std::string& k, const std::string& v) { c.tpa_enabled = to_bool(k, v); },
                         [](const Config& c) { return bool_str(c.tpa_enabled); }}},
        {"schedule.beta_max", {[](Config& c, const std::string& k, const std::string& v) { c.beta_max = to_double(k, v); },
                               [](const Config& c) { return num_str(c.beta_max); }}},
        {"schedule.beta_warmup_steps", {[](Config& c, const std::string& k, const std::string& v) { c.beta_warmup_steps = to_int(k, v); },
                                        [](const Config& c) { return std::to_string(c.beta_warmup_steps); }}},
        {"schedule.ema_decay", {[](Config& c, const std::string& k, const std::string& v) { c.ema_decay = to_double(k, v); },
                                [](const Config& c) { return num_str(c.ema_decay); }}},
        {"schedule.ema_threshold", {[](Config& c, const std::string& k, const std::string& v) { c.ema_threshold = to_double(k, v); },
                                    [](const Config& c) { return num_str(c.ema_threshold); }}},
        {"schedule.text_guidance", {[](Config& c, const std::string& k, const std::string& v) { c.text_guidance = to_bool(k, v); },
                                    [](const Config& c) { return bool_str(c.text_guidance); }}},
        {"opt.lr", {[](Config& c, const std::string& k, const std::string& v) { c.lr = to_double(k, v); },
                    [](const Config& c) { return num_str(c.lr); }}},
        {"opt.lr_floor", {[](Config& c, const std::string& k, const std::string& v) { c.lr_floor = to_double(k, v); },
                          [](const Config& c) { return num_str(c.lr_floor); }}},
        {"opt.warmup_iters", {[](Config& c, const std::string& k, const std::string& v) { c.warmup_iters = to_int(k, v); },
                              [](const Config& c) { return std::to_string(c.warmup_iters); }}},
        {"opt.weight_decay", {[](Config& c, const std::string& k, const std::string& v) { c.weight_decay = to_double(k, v); },
                              [](const Config& c) { return num_str(c.weight_decay); }}},
        {"opt.clip_norm", {[](Config& c, const std::string& k, const std::string& v) { c.clip_norm = to_double(k, v); },
                           [](const Config& c) { return num_str(c.clip_norm); }}},
        {"opt.adam_beta1", {[](Config& c, const std::string& k, const std::string& v) { c.adam_beta1 = to_double(k, v); },
                            [](const Config& c) { return num_str(c.adam_beta1); }}},
        {"opt.adam_beta2", {[](Config& c, const std::string& k, const std::string& v) { c.adam_beta2 = to_double(k, v); },
                            [](const Config& c) { return num_str(c.adam_beta2); }}},
        {"opt.adam_eps", {[](Config& c, const std::string& k, const std::string& v) { c.adam_eps = to_double(k, v); },
                          [](const Config& c) { return num_str(c.adam_eps); }}},
        {"itc.temperature", {[](Config& c, const std::string& k, const std::string& v) { c.itc_temperature = to_double(k, v); },
                             [](const Config& c) { return num_str(c.itc_temperature); }}},
        {"mlm.rate", {[](Config& c, const std::string& k, const std::string& v) { c.mlm_rate = to_double(k, v); },
                      [](const Config& c) { return num_str(c.mlm_rate); }}},
        {"train.steps", {[](Config& c, const std::string& k, const std::string& v) { c.steps = to_int(k, v); },
                         [](const Config& c) { return std::to_string(c.steps); }}},
        {"train.batch_d", {[](Config& c, const std::string& k, const std::string& v) { c.batch_d = to_int(k, v); },
                           [](const Config& c) { return std::to_string(c.batch_d); }}},
        {"train.batch_o", {[](Config& c, const std::string& k, const std::string& v) { c.batch_o = to_int(k, v); },
                           [](const Config& c) { return std::to_string(c.batch_o); }}},
        {"train.checkpoint_every", {[](Config& c, const std::string& k, const std::string& v) { c.checkpoint_every = to_int(k, v); },
                                    [](const Config& c) { return std::to_string(c.checkpoint_every); }}},
        {"train.eval_samples", {[](Config& c, const std::string& k, const std::string& v) { c.eval_samples = to_int(k, v); },
                                [](const Config& c) { return std::to_string(c.eval_samples); }}},
        {"bench.warmup", {[](Config& c, const std::string& k, const std::string& v) { c.bench_warmup = to_int(k, v); },
                          [](const Config& c) { return std::to_string(c.bench_warmup); }}},
        {"bench.iters", {[](Config& c, const std::string& k, const std::string& v) { c.bench_iters = to_int(k, v); },
                         [](const Config& c) { return std::to_string(c.bench_iters); }}},
        {"bench.batch", {[](Config& c, const std::string& k, const std::string& v) { c.bench_batch = to_int(k, v); },
                         [](const Config& c) { return std::to_string(c.bench_batch); }}},
        {"seed", {[](Config& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); },
                  [](const Config& c) { return std::to_string(c.seed); }}},
    };
    return table;
}

} // namespace

void Config::set(const std::string& key, const std::string& value) {
    for (const auto& [name, binding] : key_table()) {
        if (name == key) {
            binding.set(*this, key, trim(value));
            return;
        }
    }
    throw ConfigError("unknown config key: " + key);
}

std::string Config::serialize() const {
    std::ostringstream os;
    for (const auto& [name, binding] : key_table()) {
        os << name << "=" << binding.get(*this) << "\n";
    }
    return os.str();
}

Config parse_config_text(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
        }
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config_text(os.str());
}

Config Config::reference_scale() {
    Config c;
    c.image_size = 224;
    c.patch_size = 16;
    c.d = 768;
    c.heads = 12;
    c.vit_layers = 12;
    c.text_layers = 10;
    c.pad_layers = 2;
    c.fusion_layers = 3;
    c.decoder_layers = 12;
    c.max_text_len = 40;
    c.k = 6;
    c.alpha = 0.7;
    c.gamma = 0.2;
    return c;
}

} // namespace bus
