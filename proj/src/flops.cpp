#include "bus/flops.hpp"

#include "bus/errors.hpp"
#include "bus/model.hpp"
#include "bus/schedule.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <vector>

namespace bus {

double self_attn_flops(std::int64_t L, std::int64_t d) {
    // QKVO projections + the two attention matmuls.
    return 2.0 * (4.0 * static_cast<double>(L) * d * d) + 2.0 * (2.0 * static_cast<double>(L) * L * d);
}

double cross_attn_flops(std::int64_t Lq, std::int64_t Lkv, std::int64_t d) {
    // Q,O on the queries; K,V on the memory; two Lq x Lkv matmuls.
    return 2.0 * (2.0 * static_cast<double>(Lq) * d * d) + 2.0 * (2.0 * static_cast<double>(Lkv) * d * d) +
           2.0 * (2.0 * static_cast<double>(Lq) * Lkv * d);
}

double ffn_flops(std::int64_t L, std::int64_t d, std::int64_t ffn_mult) {
    return 2.0 * (2.0 * static_cast<double>(L) * d * ffn_mult * d);
}

double layer_flops(std::int64_t L, std::int64_t d, std::int64_t ffn_mult) {
    if (L < 1 || d < 1) throw ConfigError("layer_flops needs positive extents");
    return self_attn_flops(L, d) + ffn_flops(L, d, ffn_mult);
}

namespace {

double selector_flops(std::int64_t n, std::int64_t d, std::int64_t hidden) {
    // Three linear layers on the [n x 2d] concatenation.
    return 2.0 * static_cast<double>(n) * (2.0 * d * hidden + static_cast<double>(hidden) * hidden + hidden);
}

FlopsBreakdown count(const Config& cfg, int n_img, int n_txt, int vocab_size,
                     bool kpe, bool tpa) {
    if (n_img < 2 || n_txt < 1) throw ConfigError("model_flops needs n_img >= 2 and n_txt >= 1");
    const std::int64_t d = cfg.d;
    const std::int64_t n = n_img - 1;
    const std::int64_t N = cfg.vit_layers;
    const std::int64_t k = cfg.k;
    if (k < 1 || k >= N) throw ConfigError("model_flops needs 1 <= k < vit_layers");

    FlopsBreakdown b;
    std::int64_t u = n;
    std::int64_t reduced_len = n_img;
    // The selector MLP runs whenever either stage consumes its scores.
    if (kpe || tpa) b.tsps = selector_flops(n, d, d);
    if (kpe) {
        u = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * cfg.alpha));
        if (u < 1) throw ConfigError("model_flops: alpha keeps zero patches");
        reduced_len = 1 + u + ((cfg.fusion_token && u < n) ? 1 : 0);
    }
    b.vit_pre_k = static_cast<double>(k) * layer_flops(n_img, d);
    b.vit_post_k = static_cast<double>(N - k) * layer_flops(reduced_len, d);

    std::int64_t s = u;
    std::int64_t visual_out = reduced_len;
    if (tpa) {
        s = static_cast<std::int64_t>(std::floor(cfg.gamma * static_cast<double>(u)));
        if (s < 1) throw ConfigError("model_flops: gamma keeps zero seeds");
        const std::int64_t q = 1 + s;
        const std::int64_t kv = 1 + u;
        b.pad = static_cast<double>(cfg.pad_layers) *
                (self_attn_flops(q, d) + cross_attn_flops(q, kv, d) + ffn_flops(q, d, 4));
        visual_out = q;
    }

    b.text = static_cast<double>(cfg.text_layers) * layer_flops(1 + n_txt, d);
    const std::int64_t fused_len = visual_out + 1 + n_txt;
    b.fusion = static_cast<double>(cfg.fusion_layers) * layer_flops(fused_len, d);

    const std::int64_t n_dec = n_txt;
    double heads = static_cast<double>(cfg.decoder_layers) *
                   (self_attn_flops(n_dec, d) + cross_attn_flops(n_dec, fused_len, d) + ffn_flops(n_dec, d, 4));
    heads += 2.0 * static_cast<double>(n_dec) * d * vocab_size; // LM projection
    heads += 2.0 * static_cast<double>(n_txt) * d * vocab_size; // MLM projection
    heads += 2.0 * (static_cast<double>(d) * d + d);            // ITM head
    heads += 2.0 * 2.0 * static_cast<double>(d) * d;            // ITC projections
    b.heads = heads;

    b.u = static_cast<int>(u);
    b.s = static_cast<int>(s);
    b.total = b.vit_pre_k + b.vit_post_k + b.tsps + b.pad + b.text + b.fusion + b.heads;
    return b;
}

} // namespace

FlopsBreakdown model_flops(const Config& cfg, int n_img, int n_txt, int vocab_size) {
    return count(cfg, n_img, n_txt, vocab_size, cfg.kpe_enabled, cfg.tpa_enabled);
}

FlopsBreakdown baseline_flops(const Config& cfg, int n_img, int n_txt, int vocab_size) {
    return count(cfg, n_img, n_txt, vocab_size, /*kpe=*/false, /*tpa=*/false);
}

std::string breakdown_report(const FlopsBreakdown& bus, const FlopsBreakdown& base) {
    std::ostringstream os;
    os.precision(6);
    auto line = [&os](const std::string& key, double v) { os << key << "=" << v << "\n"; };
    line("bus.vit_pre_k", bus.vit_pre_k);
    line("bus.vit_post_k", bus.vit_post_k);
    line("bus.tsps", bus.tsps);
    line("bus.pad", bus.pad);
    line("bus.text", bus.text);
    line("bus.fusion", bus.fusion);
    line("bus.heads", bus.heads);
    line("bus.total", bus.total);
    os << "bus.u=" << bus.u << "\n";
    os << "bus.s=" << bus.s << "\n";
    line("baseline.total", base.total);
    line("ratio", bus.total / base.total);
    return os.str();
}

BenchResult bench_forward(BusModel& model, int batch, int warmup, int iters, std::uint64_t data_seed) {
    using clock = std::chrono::steady_clock;
    if (batch < 1 || iters < 1) throw ConfigError("bench needs batch >= 1 and iters >= 1");

    // The medians below are meaningless on a clock coarser than a microsecond.
    {
        const auto t0 = clock::now();
        auto t1 = clock::now();
        for (int spin = 0; spin < 1000000 && t1 == t0; ++spin) t1 = clock::now();
        const double tick = std::chrono::duration<double>(t1 - t0).count();
        if (t1 == t0 || tick > 1e-6) {
            throw EnvError("steady_clock resolution is coarser than 1 microsecond");
        }
    }

    const Config& cfg = model.config();
    // One fixed sample pool for every batch size, cycled across iterations,
    // so small batches do not benchmark against unrealistically warm caches.
    const int pool = std::max(batch, 8);
    std::vector<SynthSample> samples;
    std::vector<Tensor> images;
    for (int i = 0; i < pool; ++i) {
        samples.push_back(batch_sample(data_seed, SampleKind::Paired, 0, i, cfg.image_size));
        images.push_back(samples.back().image());
    }

    NoGradGuard no_grad;
    long cursor = 0;
    auto run_once = [&]() {
        for (int i = 0; i < batch; ++i) {
            const auto idx = static_cast<std::size_t>((cursor + i) % pool);
            auto fwd = model.forward_pair(images[idx], samples[idx].caption, cfg.beta_max);
            (void)fwd;
        }
        cursor += batch;
    };

    for (int i = 0; i < warmup; ++i) run_once();
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(iters));
    for (int i = 0; i < iters; ++i) {
        const auto t0 = clock::now();
        run_once();
        times.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    const double median = times.size() % 2 == 1
                              ? times[times.size() / 2]
                              : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);

    BenchResult res;
    res.latency_ms = median;
    res.throughput = static_cast<double>(batch) * 1000.0 / median;
    res.batch = batch;
    res.iters = iters;
    res.warmup = warmup;
    res.config = cfg.serialize();
    return res;
}

} // namespace bus
