#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "hvnet/tensor.hpp"

namespace hvnet {

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    // Moment buffers keyed by parameter name, created lazily on first step.
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// One Adam update over every parameter, reading each tensor's accumulated
// gradient. A non-finite gradient aborts with the offending parameter name.
// Gradients are left untouched; the caller zeroes them between steps.
void adam_step(std::map<std::string, Tensor>& params, AdamState& state, double lr);

struct PlateauSchedule {
    double lr = 1e-3;
    double best = 0.0;
    bool has_best = false;
    int stall = 0;
    int patience = 10;
    double factor = 0.1;
    double min_lr = 1e-7;
};

// Strictly lower val_loss records a new best and resets the stall counter;
// otherwise the counter increments, and on reaching `patience` the learning
// rate drops to max(lr * factor, min_lr) and the counter resets.
// Returns true when the rate was reduced.
bool plateau_update(PlateauSchedule& schedule, double val_loss);

} // namespace hvnet
