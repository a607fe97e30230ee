#include "bus/rng.hpp"

#include <cmath>

namespace bus {

double Rng::next_gaussian() {
    if (cached_valid_) {
        cached_valid_ = false;
        return cached_;
    }
    // Box-Muller; u1 shifted away from 0 so log() is finite.
    double u1 = next_f64();
    double u2 = next_f64();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    cached_valid_ = true;
    return r * std::cos(theta);
}

Rng Rng::split(std::string_view purpose) const {
    // FNV-1a over the purpose tag, mixed with the current state.
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : purpose) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ULL;
    }
    Rng derived(state_ ^ h);
    derived.next_u64(); // decorrelate adjacent tags
    return derived;
}

std::size_t categorical_pick(const std::vector<double>& probs, double u01) {
    double total = 0.0;
    for (double p : probs) total += p;
    const std::size_t n = probs.size();
    if (n == 0) return 0;
    if (total < 1e-300) {
        // Degenerate mass: uniform over all entries.
        auto idx = static_cast<std::size_t>(u01 * static_cast<double>(n));
        return idx >= n ? n - 1 : idx;
    }
    double acc = 0.0;
    const double target = u01 * total;
    for (std::size_t i = 0; i < n; ++i) {
        acc += probs[i];
        if (target < acc) return i;
    }
    return n - 1;
}

} // namespace bus
