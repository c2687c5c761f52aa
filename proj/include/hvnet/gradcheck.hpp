#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hvnet/tensor.hpp"

namespace hvnet {

struct GradCheckOptions {
    std::uint64_t seed = 1;
    // Finite-difference step: h = step_scale * max(1, |x|).
    double step_scale = 1e-5;
    // Fraction of each input's coordinates to check (at least one per
    // input); 1.0 checks everything.
    double coord_fraction = 1.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    // Input index and flat coordinate of the worst disagreement.
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Compares tape gradients of fn() against central finite differences of the
// scalarized objective sum(cotangent * fn()), with a fixed random cotangent.
// fn must be a deterministic function of the tensors in `inputs` (stochastic
// ops pinned to a fixed seed); it is re-evaluated under perturbation, so it
// has to read the same shared tensor storage each call.
GradCheckReport grad_check(const std::function<Tensor()>& fn,
                           std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

struct GradCheckCase {
    std::string name;
    double tolerance;
    // Runs the op over its seeds and returns the max relative error seen.
    std::function<double()> run;
};

// Every differentiable primitive plus module-level checks ("coordconv",
// "cbam", the losses) and the sampled full-model check ("model").
std::vector<GradCheckCase> gradcheck_suite();

} // namespace hvnet
