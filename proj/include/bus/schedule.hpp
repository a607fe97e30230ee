#pragma once

#include "bus/config.hpp"
#include "bus/model.hpp"
#include "bus/objectives.hpp"
#include "bus/rng.hpp"
#include "bus/synthdata.hpp"

#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

namespace bus {

// Decoupled-weight-decay Adam with linear warmup and cosine decay to a floor
// learning rate. One step() call per training iteration.
class AdamW {
public:
    AdamW() = default;
    AdamW(const Config& cfg, int total_steps);

    double lr_at(int step) const;
    // Applies one update from the accumulated gradients. Gradients must be
    // finite; a NaN gradient is a numeric error naming the parameter.
    void step(ParamStore& params);

    int steps_taken() const { return t_; }
    // Moment access for checkpointing.
    std::vector<std::pair<std::string, Tensor>> moments() const;
    void restore_moments(const std::vector<std::pair<std::string, Tensor>>& entries, int steps_taken);

private:
    double lr_ = 0.0, lr_floor_ = 0.0, wd_ = 0.0, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, clip_ = 0.0;
    int warmup_ = 0;
    int total_steps_ = 1;
    int t_ = 0;
    std::unordered_map<std::string, std::vector<double>> m_, v_;
};

struct TrainState {
    int step = 0;
    double ptm_ema = std::numeric_limits<double>::quiet_NaN();
    int gate_step = -1;   // first step whose EMA fell below the threshold
    double beta = 0.0;    // last applied beta
};

// beta stays 0 while the PTM loss EMA has not crossed the gate, then ramps
// linearly to beta_max over beta_warmup_steps. Non-decreasing by
// construction (latched gate, monotone step counter).
double beta_schedule(const TrainState& state, const Config& cfg);

struct StepReport {
    int step = 0;
    double beta = 0.0;
    LossBundle losses;
    double wall_ms = 0.0;
    int u = 0; // retained patches after extraction
    int s = 0; // summary tokens after abstraction
};

class Trainer {
public:
    Trainer(BusModel& model, const Config& cfg, int total_steps);

    // One iteration: PTM loss on the object/region batch, the four paired
    // losses on the paired batch, one backward over the sum, one optimizer
    // update. An empty object batch suppresses the PTM term (ablation).
    StepReport train_step(const std::vector<SynthSample>& batch_o,
                          const std::vector<SynthSample>& batch_d);

    const TrainState& state() const { return state_; }
    double current_beta() const { return beta_schedule(state_, cfg_); }

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

private:
    BusModel& model_;
    Config cfg_;
    AdamW opt_;
    TrainState state_;
    Rng mask_rng_, negative_rng_;
};

// Loss means over held-out samples, no parameter updates.
struct EvalReport {
    LossBundle losses;
    double tsps_auc = 0.0;
};
EvalReport evaluate(BusModel& model, const std::vector<SynthSample>& paired,
                    const std::vector<SynthSample>& region, double beta, std::uint64_t eval_seed);

// Pooled TSPS score-vs-label AUC over region samples (inference mode).
double tsps_patch_auc(BusModel& model, const std::vector<SynthSample>& region, double beta);

// Deterministic per-step sample streams for Algorithm-style training runs.
SynthSample batch_sample(std::uint64_t data_seed, SampleKind kind, int step, int index, int image_size);

} // namespace bus
