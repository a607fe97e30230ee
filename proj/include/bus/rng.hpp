#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace bus {

// Deterministic splittable RNG. SplitMix64 core: integer-only state
// transitions, so streams are identical on every platform. All randomness in
// the project flows from one root seed split per purpose (init / data /
// masking / negatives), so ablations change exactly one stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_f64() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (deterministic given IEEE doubles on one
    // platform; cross-platform bit-stability is only promised for integer draws).
    double next_gaussian();

    // Derive an independent stream for a named purpose.
    Rng split(std::string_view purpose) const;

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; cached_valid_ = false; }

private:
    std::uint64_t state_ = 0;
    double cached_ = 0.0;
    bool cached_valid_ = false;
};

// Inverse-CDF categorical draw: returns index i with probability
// probs[i] / sum(probs). Probabilities must be non-negative; a near-zero sum
// degenerates to uniform. Shared by ITM negative sampling and its test oracle.
std::size_t categorical_pick(const std::vector<double>& probs, double u01);

} // namespace bus
