#pragma once

#include "bus/config.hpp"
#include "bus/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace bus {

// Finite-difference verification of analytic gradients. The numeric side
// only ever evaluates forwards (central differences, h = 1e-5, 64-bit), so
// it stays independent of every backward rule it checks.
struct GradCheckReport {
    std::string name;
    double max_err = 0.0;   // |analytic - numeric| / max(1, |analytic|, |numeric|)
    double tolerance = 0.0;
    bool pass = false;
};

// Scalar-valued function of a set of leaf tensors. The callable must
// rebuild its graph from the current leaf data on every invocation.
using ScalarFn = std::function<Tensor()>;

// Checks d(fn)/d(leaf) for sampled entries of each leaf (all entries when
// probes_per_tensor <= 0).
GradCheckReport check_scalar_fn(const std::string& name, const ScalarFn& fn,
                                const std::vector<Tensor>& leaves, double tolerance,
                                int probes_per_tensor, Rng& probe_rng, double h = 1e-5);

// The primitive-op suite: every differentiable op at random points.
std::vector<GradCheckReport> run_op_gradchecks(std::uint64_t seed);

// Full-pipeline suite: the summed five-loss objective at the given dims,
// checked against every parameter tensor of the model.
std::vector<GradCheckReport> run_model_gradcheck(const Config& cfg, std::uint64_t seed,
                                                 int probes_per_tensor, double tolerance = 1e-4);

bool all_passed(const std::vector<GradCheckReport>& reports);

} // namespace bus
