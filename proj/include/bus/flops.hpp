#pragma once

#include "bus/config.hpp"

#include <cstdint>
#include <string>

namespace bus {

class BusModel;

// Analytical compute model. Convention: one multiply-accumulate counts as
// 2 FLOPs; embeddings, layer norms, softmax, and activations are excluded
// (sub-1% at these widths).
double layer_flops(std::int64_t seq_len, std::int64_t dim, std::int64_t ffn_mult = 4);
double self_attn_flops(std::int64_t seq_len, std::int64_t dim);
double cross_attn_flops(std::int64_t q_len, std::int64_t kv_len, std::int64_t dim);
double ffn_flops(std::int64_t seq_len, std::int64_t dim, std::int64_t ffn_mult = 4);

// Per-stage counts for one forward at the configured dims. `heads` covers
// the generation decoder plus the output projections (LM, MLM, ITM, ITC).
struct FlopsBreakdown {
    double vit_pre_k = 0.0;
    double vit_post_k = 0.0;
    double tsps = 0.0;
    double pad = 0.0;
    double text = 0.0;
    double fusion = 0.0;
    double heads = 0.0;
    double total = 0.0;

    int u = 0; // retained patches
    int s = 0; // summary tokens
};

// Sequence-length timeline: n_img slots for layers 1..k, 1+u(+fusion token)
// for layers k+1..N, abstraction on (1+s) queries against (1+u) keys, fusion
// over (1+s)+(1+n_txt), selector MLP at layer k. Disabled stages fall back
// to full-length sequences.
FlopsBreakdown model_flops(const Config& cfg, int n_img, int n_txt, int vocab_size);

// Identical stacks, no selector, no abstraction, full-length sequences.
FlopsBreakdown baseline_flops(const Config& cfg, int n_img, int n_txt, int vocab_size);

std::string breakdown_report(const FlopsBreakdown& bus, const FlopsBreakdown& base);

// Wall-clock micro-benchmark of the full forward
// (text -> backbone+extraction -> abstraction -> fusion), inference mode.
struct BenchResult {
    double latency_ms = 0.0;   // median over timed iterations, per batch
    double throughput = 0.0;   // items per second
    int batch = 0;
    int iters = 0;
    int warmup = 0;
    std::string config;        // effective config snapshot of the timed model
};

BenchResult bench_forward(BusModel& model, int batch, int warmup, int iters, std::uint64_t data_seed);

} // namespace bus
