#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <vector>

#include "hvnet/tape.hpp"
#include "hvnet/tensor.hpp"

namespace hvnet {

enum class Mode { kTrain, kEval };

namespace ops {

enum class Padding { kSame, kValid };
enum class PoolKind { kAvg, kMax };
enum class ChannelPoolKind { kMean, kMax };

// Running statistics owned by the layer that uses the batch norm. Updated in
// place during train-mode forward passes; read in eval mode.
struct BatchNormState {
    Tensor running_mean; // shape {C}
    Tensor running_var;  // shape {C}
};

// Cross-correlation with zero padding, stride 1 only. Same padding requires
// odd kernel extents and preserves H and W.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, Padding padding = Padding::kSame);

// Non-overlapping window max; H and W must be divisible by the window.
// Gradient routes to the argmax position, first in row-major scan on ties.
Tensor maxpool2d(const Tensor& input, int window = 2);

// Each pixel replicated factor x factor; gradient is the window sum.
Tensor upsample_nearest2d(const Tensor& input, int factor = 2);

// x for x > 0, alpha * (exp(x) - 1) otherwise.
Tensor elu(const Tensor& input, double alpha = 1.0);

Tensor sigmoid(const Tensor& input);

// Softmax over the channel axis per pixel, stabilized by max subtraction.
Tensor softmax_channels(const Tensor& input);

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, double momentum, double eps_bn, Mode mode);

// Inverted dropout: kept values are scaled by 1/(1-rate) in train mode so
// eval mode is a pure identity. The mask is drawn from the seeded stream and
// replayed for backward.
Tensor dropout(const Tensor& input, double rate, Mode mode, std::uint64_t rng_seed);

Tensor concat_channels(const std::vector<Tensor>& parts);

// Channels [start, start+count) of a (B,C,H,W) tensor.
Tensor slice_channels(const Tensor& input, int start, int count);

// Elementwise with broadcast limited to exact-shape match plus the two
// attention-map patterns: (B,C,1,1) and (B,1,H,W) against (B,C,H,W).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Per-channel spatial mean or max -> (B,C,1,1).
Tensor global_pool(const Tensor& input, PoolKind kind);

// Per-pixel mean or max over channels -> (B,1,H,W).
Tensor channel_pool(const Tensor& input, ChannelPoolKind kind);

namespace detail {

inline bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline void record(const char* name, Tensor& output, std::function<void()> backprop) {
    output.set_requires_grad(true);
    Tape::active()->record(name, output, std::move(backprop));
}

} // namespace detail

} // namespace ops
} // namespace hvnet
