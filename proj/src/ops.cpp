#include "hvnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

#include "hvnet/rng.hpp"

namespace hvnet::ops {

namespace {

void require_rank4(const Tensor& t, const char* op, const char* arg) {
    if (t.rank() != 4) {
        throw std::invalid_argument(std::string(op) + ": " + arg + " must be rank 4, got shape " +
                                    t.shape_string());
    }
}

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

} // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, Padding padding) {
    require_rank4(input, "conv2d", "input");
    require_rank4(kernel, "conv2d", "kernel");
    if (stride != 1) {
        fail("conv2d: only stride 1 is supported, got " + std::to_string(stride));
    }
    const int batch = input.extent(0);
    const int cin = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    const int cout = kernel.extent(0);
    const int kh = kernel.extent(2);
    const int kw = kernel.extent(3);
    if (kernel.extent(1) != cin) {
        fail("conv2d: kernel input-channel extent " + std::to_string(kernel.extent(1)) +
             " does not match input channel extent " + std::to_string(cin));
    }
    if (bias.rank() != 1 || bias.extent(0) != cout) {
        fail("conv2d: bias shape " + bias.shape_string() + " must be (" + std::to_string(cout) +
             ")");
    }
    int pad_h = 0;
    int pad_w = 0;
    if (padding == Padding::kSame) {
        if (kh % 2 == 0 || kw % 2 == 0) {
            fail("conv2d: same padding requires odd kernel extents, got kernel " +
                 kernel.shape_string());
        }
        pad_h = kh / 2;
        pad_w = kw / 2;
    } else {
        if (height < kh) {
            fail("conv2d: input height " + std::to_string(height) +
                 " smaller than kernel height " + std::to_string(kh));
        }
        if (width < kw) {
            fail("conv2d: input width " + std::to_string(width) + " smaller than kernel width " +
                 std::to_string(kw));
        }
    }
    const int oh_total = height + 2 * pad_h - kh + 1;
    const int ow_total = width + 2 * pad_w - kw + 1;

    Tensor output({batch, cout, oh_total, ow_total});
    {
        const double* __restrict in = input.raw();
        const double* __restrict ker = kernel.raw();
        const double* __restrict bs = bias.raw();
        double* __restrict out = output.raw();
        for (int b = 0; b < batch; ++b) {
            for (int oc = 0; oc < cout; ++oc) {
                double* plane = out + (static_cast<std::size_t>(b) * cout + oc) *
                                          static_cast<std::size_t>(oh_total) * ow_total;
                std::fill(plane, plane + static_cast<std::size_t>(oh_total) * ow_total, bs[oc]);
                for (int ic = 0; ic < cin; ++ic) {
                    const double* in_plane =
                        in + (static_cast<std::size_t>(b) * cin + ic) *
                                 static_cast<std::size_t>(height) * width;
                    const double* kplane = ker + (static_cast<std::size_t>(oc) * cin + ic) *
                                                     static_cast<std::size_t>(kh) * kw;
                    for (int r = 0; r < kh; ++r) {
                        const int oh_lo = std::max(0, pad_h - r);
                        const int oh_hi = std::min(oh_total, height + pad_h - r);
                        for (int s = 0; s < kw; ++s) {
                            const double k = kplane[r * kw + s];
                            if (k == 0.0) {
                                continue;
                            }
                            const int ow_lo = std::max(0, pad_w - s);
                            const int ow_hi = std::min(ow_total, width + pad_w - s);
                            const int shift = s - pad_w;
                            for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                const double* __restrict in_row =
                                    in_plane + static_cast<std::size_t>(oh + r - pad_h) * width;
                                double* __restrict out_row =
                                    plane + static_cast<std::size_t>(oh) * ow_total;
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    out_row[ow] += k * in_row[ow + shift];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if (detail::grad_enabled({&input, &kernel, &bias})) {
        Tensor in_t = input, ker_t = kernel, bias_t = bias, out_t = output;
        detail::record("conv2d", output, [in_t, ker_t, bias_t, out_t, batch, cin, cout, height,
                                          width, kh, kw, pad_h, pad_w, oh_total,
                                          ow_total]() mutable {
            const double* __restrict go = out_t.grad().data();
            if (bias_t.requires_grad()) {
                double* __restrict gb = bias_t.grad().data();
                for (int b = 0; b < batch; ++b) {
                    for (int oc = 0; oc < cout; ++oc) {
                        const double* plane = go + (static_cast<std::size_t>(b) * cout + oc) *
                                                       static_cast<std::size_t>(oh_total) *
                                                       ow_total;
                        double acc = 0.0;
                        for (std::int64_t i = 0;
                             i < static_cast<std::int64_t>(oh_total) * ow_total; ++i) {
                            acc += plane[i];
                        }
                        gb[oc] += acc;
                    }
                }
            }
            if (ker_t.requires_grad()) {
                const double* __restrict in = in_t.raw();
                double* __restrict gk = ker_t.grad().data();
                for (int b = 0; b < batch; ++b) {
                    for (int oc = 0; oc < cout; ++oc) {
                        const double* gplane = go + (static_cast<std::size_t>(b) * cout + oc) *
                                                        static_cast<std::size_t>(oh_total) *
                                                        ow_total;
                        for (int ic = 0; ic < cin; ++ic) {
                            const double* in_plane =
                                in + (static_cast<std::size_t>(b) * cin + ic) *
                                         static_cast<std::size_t>(height) * width;
                            double* kplane = gk + (static_cast<std::size_t>(oc) * cin + ic) *
                                                      static_cast<std::size_t>(kh) * kw;
                            for (int r = 0; r < kh; ++r) {
                                const int oh_lo = std::max(0, pad_h - r);
                                const int oh_hi = std::min(oh_total, height + pad_h - r);
                                for (int s = 0; s < kw; ++s) {
                                    const int ow_lo = std::max(0, pad_w - s);
                                    const int ow_hi = std::min(ow_total, width + pad_w - s);
                                    const int shift = s - pad_w;
                                    // Four independent accumulators break the
                                    // serial FP dependency chain; the final
                                    // association is fixed, so results stay
                                    // deterministic.
                                    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
                                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                        const double* __restrict in_row =
                                            in_plane +
                                            static_cast<std::size_t>(oh + r - pad_h) * width +
                                            shift;
                                        const double* __restrict g_row =
                                            gplane + static_cast<std::size_t>(oh) * ow_total;
                                        int ow = ow_lo;
                                        for (; ow + 4 <= ow_hi; ow += 4) {
                                            acc0 += g_row[ow] * in_row[ow];
                                            acc1 += g_row[ow + 1] * in_row[ow + 1];
                                            acc2 += g_row[ow + 2] * in_row[ow + 2];
                                            acc3 += g_row[ow + 3] * in_row[ow + 3];
                                        }
                                        for (; ow < ow_hi; ++ow) {
                                            acc0 += g_row[ow] * in_row[ow];
                                        }
                                    }
                                    kplane[r * kw + s] += (acc0 + acc1) + (acc2 + acc3);
                                }
                            }
                        }
                    }
                }
            }
            if (in_t.requires_grad()) {
                const double* __restrict ker = ker_t.raw();
                double* __restrict gi = in_t.grad().data();
                for (int b = 0; b < batch; ++b) {
                    for (int oc = 0; oc < cout; ++oc) {
                        const double* gplane = go + (static_cast<std::size_t>(b) * cout + oc) *
                                                        static_cast<std::size_t>(oh_total) *
                                                        ow_total;
                        for (int ic = 0; ic < cin; ++ic) {
                            double* gi_plane = gi + (static_cast<std::size_t>(b) * cin + ic) *
                                                        static_cast<std::size_t>(height) * width;
                            const double* kplane =
                                ker + (static_cast<std::size_t>(oc) * cin + ic) *
                                          static_cast<std::size_t>(kh) * kw;
                            for (int r = 0; r < kh; ++r) {
                                const int oh_lo = std::max(0, pad_h - r);
                                const int oh_hi = std::min(oh_total, height + pad_h - r);
                                for (int s = 0; s < kw; ++s) {
                                    const double k = kplane[r * kw + s];
                                    if (k == 0.0) {
                                        continue;
                                    }
                                    const int ow_lo = std::max(0, pad_w - s);
                                    const int ow_hi = std::min(ow_total, width + pad_w - s);
                                    const int shift = s - pad_w;
                                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                        double* __restrict gi_row =
                                            gi_plane +
                                            static_cast<std::size_t>(oh + r - pad_h) * width;
                                        const double* __restrict g_row =
                                            gplane + static_cast<std::size_t>(oh) * ow_total;
                                        for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                            gi_row[ow + shift] += k * g_row[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return output;
}

// ---------------------------------------------------------------------------
// maxpool2d / upsample_nearest2d
// ---------------------------------------------------------------------------

Tensor maxpool2d(const Tensor& input, int window) {
    require_rank4(input, "maxpool2d", "input");
    if (window < 1) {
        fail("maxpool2d: window must be >= 1, got " + std::to_string(window));
    }
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    if (height % window != 0) {
        fail("maxpool2d: height " + std::to_string(height) + " not divisible by window " +
             std::to_string(window));
    }
    if (width % window != 0) {
        fail("maxpool2d: width " + std::to_string(width) + " not divisible by window " +
             std::to_string(window));
    }
    const int oh_total = height / window;
    const int ow_total = width / window;
    Tensor output({batch, channels, oh_total, ow_total});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(output.numel()));

    const double* in = input.raw();
    double* out = output.raw();
    std::int64_t oi = 0;
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            const double* plane = in + (static_cast<std::size_t>(b) * channels + c) *
                                           static_cast<std::size_t>(height) * width;
            for (int oh = 0; oh < oh_total; ++oh) {
                for (int ow = 0; ow < ow_total; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = 0;
                    for (int r = 0; r < window; ++r) {
                        for (int s = 0; s < window; ++s) {
                            const std::int64_t idx =
                                static_cast<std::int64_t>(oh * window + r) * width +
                                (ow * window + s);
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[static_cast<std::size_t>(oi)] =
                        best_idx + (static_cast<std::int64_t>(b) * channels + c) *
                                       static_cast<std::int64_t>(height) * width;
                }
            }
        }
    }

    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("maxpool2d", output, [in_t, out_t, argmax = std::move(argmax)]() mutable {
            auto go = out_t.grad();
            auto gi = in_t.grad();
            for (std::size_t i = 0; i < argmax.size(); ++i) {
                gi[static_cast<std::size_t>(argmax[i])] += go[i];
            }
        });
    }
    return output;
}

Tensor upsample_nearest2d(const Tensor& input, int factor) {
    require_rank4(input, "upsample_nearest2d", "input");
    if (factor < 1) {
        fail("upsample_nearest2d: factor must be >= 1, got " + std::to_string(factor));
    }
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    Tensor output({batch, channels, height * factor, width * factor});

    const double* in = input.raw();
    double* out = output.raw();
    const int out_w = width * factor;
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            const double* plane = in + (static_cast<std::size_t>(b) * channels + c) *
                                           static_cast<std::size_t>(height) * width;
            double* oplane = out + (static_cast<std::size_t>(b) * channels + c) *
                                       static_cast<std::size_t>(height * factor) * out_w;
            for (int h = 0; h < height; ++h) {
                for (int w = 0; w < width; ++w) {
                    const double v = plane[static_cast<std::size_t>(h) * width + w];
                    for (int r = 0; r < factor; ++r) {
                        double* orow = oplane + static_cast<std::size_t>(h * factor + r) * out_w +
                                       static_cast<std::size_t>(w) * factor;
                        for (int s = 0; s < factor; ++s) {
                            orow[s] = v;
                        }
                    }
                }
            }
        }
    }

    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("upsample_nearest2d", output,
                       [in_t, out_t, batch, channels, height, width, factor, out_w]() mutable {
                           const double* go = out_t.grad().data();
                           double* gi = in_t.grad().data();
                           for (int b = 0; b < batch; ++b) {
                               for (int c = 0; c < channels; ++c) {
                                   const std::size_t pbase =
                                       (static_cast<std::size_t>(b) * channels + c) *
                                       static_cast<std::size_t>(height) * width;
                                   const std::size_t obase =
                                       (static_cast<std::size_t>(b) * channels + c) *
                                       static_cast<std::size_t>(height * factor) * out_w;
                                   for (int h = 0; h < height; ++h) {
                                       for (int w = 0; w < width; ++w) {
                                           double acc = 0.0;
                                           for (int r = 0; r < factor; ++r) {
                                               const double* orow =
                                                   go + obase +
                                                   static_cast<std::size_t>(h * factor + r) *
                                                       out_w +
                                                   static_cast<std::size_t>(w) * factor;
                                               for (int s = 0; s < factor; ++s) {
                                                   acc += orow[s];
                                               }
                                           }
                                           gi[pbase + static_cast<std::size_t>(h) * width + w] +=
                                               acc;
                                       }
                                   }
                               }
                           }
                       });
    }
    return output;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

Tensor elu(const Tensor& input, double alpha) {
    Tensor output(input.shape());
    auto in = input.data();
    auto out = output.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = in[i] > 0.0 ? in[i] : alpha * (std::exp(in[i]) - 1.0);
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("elu", output, [in_t, out_t, alpha]() mutable {
            auto go = out_t.grad();
            auto gi = in_t.grad();
            auto ov = out_t.data();
            // For x <= 0 the saved output gives alpha*exp(x) = y + alpha.
            for (std::size_t i = 0; i < gi.size(); ++i) {
                gi[i] += go[i] * (ov[i] > 0.0 ? 1.0 : ov[i] + alpha);
            }
        });
    }
    return output;
}

Tensor sigmoid(const Tensor& input) {
    Tensor output(input.shape());
    auto in = input.data();
    auto out = output.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = 1.0 / (1.0 + std::exp(-in[i]));
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("sigmoid", output, [in_t, out_t]() mutable {
            auto go = out_t.grad();
            auto gi = in_t.grad();
            auto ov = out_t.data();
            for (std::size_t i = 0; i < gi.size(); ++i) {
                gi[i] += go[i] * ov[i] * (1.0 - ov[i]);
            }
        });
    }
    return output;
}

Tensor softmax_channels(const Tensor& input) {
    require_rank4(input, "softmax_channels", "input");
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    Tensor output(input.shape());
    const double* in = input.raw();
    double* out = output.raw();
    for (int b = 0; b < batch; ++b) {
        const std::size_t bbase = static_cast<std::size_t>(b) * channels * spatial;
        for (std::size_t p = 0; p < spatial; ++p) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < channels; ++c) {
                mx = std::max(mx, in[bbase + c * spatial + p]);
            }
            double sum = 0.0;
            for (int c = 0; c < channels; ++c) {
                const double e = std::exp(in[bbase + c * spatial + p] - mx);
                out[bbase + c * spatial + p] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int c = 0; c < channels; ++c) {
                out[bbase + c * spatial + p] *= inv;
            }
        }
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("softmax_channels", output,
                       [in_t, out_t, batch, channels, spatial]() mutable {
                           const double* go = out_t.grad().data();
                           const double* ov = out_t.data().data();
                           double* gi = in_t.grad().data();
                           for (int b = 0; b < batch; ++b) {
                               const std::size_t bbase =
                                   static_cast<std::size_t>(b) * channels * spatial;
                               for (std::size_t p = 0; p < spatial; ++p) {
                                   double dot = 0.0;
                                   for (int c = 0; c < channels; ++c) {
                                       const std::size_t i = bbase + c * spatial + p;
                                       dot += go[i] * ov[i];
                                   }
                                   for (int c = 0; c < channels; ++c) {
                                       const std::size_t i = bbase + c * spatial + p;
                                       gi[i] += ov[i] * (go[i] - dot);
                                   }
                               }
                           }
                       });
    }
    return output;
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, double momentum, double eps_bn, Mode mode) {
    require_rank4(input, "batchnorm2d", "input");
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    if (gamma.rank() != 1 || gamma.extent(0) != channels) {
        fail("batchnorm2d: gamma shape " + gamma.shape_string() + " must be (" +
             std::to_string(channels) + ")");
    }
    if (beta.rank() != 1 || beta.extent(0) != channels) {
        fail("batchnorm2d: beta shape " + beta.shape_string() + " must be (" +
             std::to_string(channels) + ")");
    }
    if (state.running_mean.extent(0) != channels || state.running_var.extent(0) != channels) {
        fail("batchnorm2d: running stats extent does not match channel extent " +
             std::to_string(channels));
    }

    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    const std::size_t per_channel = static_cast<std::size_t>(batch) * spatial;
    std::vector<double> mean(static_cast<std::size_t>(channels));
    std::vector<double> inv_std(static_cast<std::size_t>(channels));

    const double* in = input.raw();
    if (mode == Mode::kTrain) {
        double* rm = state.running_mean.raw();
        double* rv = state.running_var.raw();
        for (int c = 0; c < channels; ++c) {
            double sum = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* plane =
                    in + (static_cast<std::size_t>(b) * channels + c) * spatial;
                for (std::size_t p = 0; p < spatial; ++p) {
                    sum += plane[p];
                }
            }
            const double mu = sum / static_cast<double>(per_channel);
            double sq = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* plane =
                    in + (static_cast<std::size_t>(b) * channels + c) * spatial;
                for (std::size_t p = 0; p < spatial; ++p) {
                    const double d = plane[p] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(per_channel);
            mean[static_cast<std::size_t>(c)] = mu;
            inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps_bn);
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mu;
            rv[c] = (1.0 - momentum) * rv[c] + momentum * var;
        }
    } else {
        const double* rm = state.running_mean.raw();
        const double* rv = state.running_var.raw();
        for (int c = 0; c < channels; ++c) {
            mean[static_cast<std::size_t>(c)] = rm[c];
            inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(rv[c] + eps_bn);
        }
    }

    Tensor output(input.shape());
    double* out = output.raw();
    const double* gm = gamma.raw();
    const double* bt = beta.raw();
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            const std::size_t base = (static_cast<std::size_t>(b) * channels + c) * spatial;
            const double mu = mean[static_cast<std::size_t>(c)];
            const double is = inv_std[static_cast<std::size_t>(c)];
            const double g = gm[c];
            const double bb = bt[c];
            for (std::size_t p = 0; p < spatial; ++p) {
                out[base + p] = (in[base + p] - mu) * is * g + bb;
            }
        }
    }

    if (detail::grad_enabled({&input, &gamma, &beta})) {
        Tensor in_t = input, gamma_t = gamma, beta_t = beta, out_t = output;
        const bool train = mode == Mode::kTrain;
        detail::record(
            "batchnorm2d", output,
            [in_t, gamma_t, beta_t, out_t, mean = std::move(mean), inv_std = std::move(inv_std),
             batch, channels, spatial, per_channel, train]() mutable {
                const double* go = out_t.grad().data();
                const double* in = in_t.raw();
                const double* gm = gamma_t.raw();
                for (int c = 0; c < channels; ++c) {
                    const double mu = mean[static_cast<std::size_t>(c)];
                    const double is = inv_std[static_cast<std::size_t>(c)];
                    double sum_g = 0.0;
                    double sum_gx = 0.0;
                    for (int b = 0; b < batch; ++b) {
                        const std::size_t base =
                            (static_cast<std::size_t>(b) * channels + c) * spatial;
                        for (std::size_t p = 0; p < spatial; ++p) {
                            const double xhat = (in[base + p] - mu) * is;
                            sum_g += go[base + p];
                            sum_gx += go[base + p] * xhat;
                        }
                    }
                    if (beta_t.requires_grad()) {
                        beta_t.grad()[static_cast<std::size_t>(c)] += sum_g;
                    }
                    if (gamma_t.requires_grad()) {
                        gamma_t.grad()[static_cast<std::size_t>(c)] += sum_gx;
                    }
                    if (in_t.requires_grad()) {
                        double* gi = in_t.grad().data();
                        const double scale = gm[c] * is;
                        if (train) {
                            const double m = static_cast<double>(per_channel);
                            const double mean_g = sum_g / m;
                            const double mean_gx = sum_gx / m;
                            for (int b = 0; b < batch; ++b) {
                                const std::size_t base =
                                    (static_cast<std::size_t>(b) * channels + c) * spatial;
                                for (std::size_t p = 0; p < spatial; ++p) {
                                    const double xhat = (in[base + p] - mu) * is;
                                    gi[base + p] +=
                                        scale * (go[base + p] - mean_g - xhat * mean_gx);
                                }
                            }
                        } else {
                            for (int b = 0; b < batch; ++b) {
                                const std::size_t base =
                                    (static_cast<std::size_t>(b) * channels + c) * spatial;
                                for (std::size_t p = 0; p < spatial; ++p) {
                                    gi[base + p] += scale * go[base + p];
                                }
                            }
                        }
                    }
                }
            });
    }
    return output;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& input, double rate, Mode mode, std::uint64_t rng_seed) {
    if (rate < 0.0 || rate >= 1.0) {
        fail("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (mode == Mode::kEval || rate == 0.0) {
        return input;
    }
    Tensor output(input.shape());
    std::vector<double> mask(static_cast<std::size_t>(input.numel()));
    Rng rng(rng_seed);
    const double scale = 1.0 / (1.0 - rate);
    auto in = input.data();
    auto out = output.data();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < rate ? 0.0 : scale;
        out[i] = in[i] * mask[i];
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("dropout", output, [in_t, out_t, mask = std::move(mask)]() mutable {
            auto go = out_t.grad();
            auto gi = in_t.grad();
            for (std::size_t i = 0; i < gi.size(); ++i) {
                gi[i] += go[i] * mask[i];
            }
        });
    }
    return output;
}

// ---------------------------------------------------------------------------
// concat / slice
// ---------------------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        fail("concat_channels: need at least one part");
    }
    const int batch = parts[0].extent(0);
    const int height = parts[0].extent(2);
    const int width = parts[0].extent(3);
    int channels = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        require_rank4(parts[i], "concat_channels", "part");
        if (parts[i].extent(0) != batch || parts[i].extent(2) != height ||
            parts[i].extent(3) != width) {
            fail("concat_channels: part " + std::to_string(i) + " shape " +
                 parts[i].shape_string() + " does not match leading part batch/height/width " +
                 shape_to_string({batch, parts[0].extent(1), height, width}));
        }
        channels += parts[i].extent(1);
    }
    Tensor output({batch, channels, height, width});
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    double* out = output.raw();
    for (int b = 0; b < batch; ++b) {
        std::size_t coff = 0;
        for (const Tensor& part : parts) {
            const int pc = part.extent(1);
            const double* src =
                part.raw() + static_cast<std::size_t>(b) * pc * spatial;
            std::memcpy(out + (static_cast<std::size_t>(b) * channels + coff) * spatial, src,
                        static_cast<std::size_t>(pc) * spatial * sizeof(double));
            coff += static_cast<std::size_t>(pc);
        }
    }

    bool any_grad = false;
    for (const Tensor& part : parts) {
        if (part.requires_grad()) {
            any_grad = true;
        }
    }
    if (Tape::active() != nullptr && any_grad) {
        std::vector<Tensor> held = parts;
        Tensor out_t = output;
        detail::record("concat_channels", output,
                       [held = std::move(held), out_t, batch, channels, spatial]() mutable {
                           const double* go = out_t.grad().data();
                           for (int b = 0; b < batch; ++b) {
                               std::size_t coff = 0;
                               for (Tensor& part : held) {
                                   const int pc = part.extent(1);
                                   if (part.requires_grad()) {
                                       double* gi = part.grad().data() +
                                                    static_cast<std::size_t>(b) * pc * spatial;
                                       const double* src =
                                           go +
                                           (static_cast<std::size_t>(b) * channels + coff) *
                                               spatial;
                                       for (std::size_t i = 0;
                                            i < static_cast<std::size_t>(pc) * spatial; ++i) {
                                           gi[i] += src[i];
                                       }
                                   }
                                   coff += static_cast<std::size_t>(pc);
                               }
                           }
                       });
    }
    return output;
}

Tensor slice_channels(const Tensor& input, int start, int count) {
    require_rank4(input, "slice_channels", "input");
    const int channels = input.extent(1);
    if (start < 0 || count < 1 || start + count > channels) {
        fail("slice_channels: range [" + std::to_string(start) + ", " +
             std::to_string(start + count) + ") out of bounds for channel extent " +
             std::to_string(channels));
    }
    const int batch = input.extent(0);
    const int height = input.extent(2);
    const int width = input.extent(3);
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    Tensor output({batch, count, height, width});
    double* out = output.raw();
    const double* in = input.raw();
    for (int b = 0; b < batch; ++b) {
        std::memcpy(out + static_cast<std::size_t>(b) * count * spatial,
                    in + (static_cast<std::size_t>(b) * channels + start) * spatial,
                    static_cast<std::size_t>(count) * spatial * sizeof(double));
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        detail::record("slice_channels", output,
                       [in_t, out_t, batch, channels, start, count, spatial]() mutable {
                           const double* go = out_t.grad().data();
                           double* gi = in_t.grad().data();
                           for (int b = 0; b < batch; ++b) {
                               double* dst =
                                   gi + (static_cast<std::size_t>(b) * channels + start) * spatial;
                               const double* src =
                                   go + static_cast<std::size_t>(b) * count * spatial;
                               for (std::size_t i = 0;
                                    i < static_cast<std::size_t>(count) * spatial; ++i) {
                                   dst[i] += src[i];
                               }
                           }
                       });
    }
    return output;
}

// ---------------------------------------------------------------------------
// add / mul with attention-map broadcasting
// ---------------------------------------------------------------------------

namespace {

enum class BroadcastKind {
    kExact,       // identical shapes
    kChannelMap,  // map is (B,C,1,1)
    kSpatialMap   // map is (B,1,H,W)
};

struct BroadcastPlan {
    BroadcastKind kind;
    bool swapped; // true when `a` is the map and `b` the full tensor
};

BroadcastPlan plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) {
        return {BroadcastKind::kExact, false};
    }
    auto classify = [](const Tensor& full, const Tensor& map) -> std::optional<BroadcastKind> {
        if (full.rank() != 4 || map.rank() != 4 || full.extent(0) != map.extent(0)) {
            return std::nullopt;
        }
        if (map.extent(1) == full.extent(1) && map.extent(2) == 1 && map.extent(3) == 1) {
            return BroadcastKind::kChannelMap;
        }
        if (map.extent(1) == 1 && map.extent(2) == full.extent(2) &&
            map.extent(3) == full.extent(3)) {
            return BroadcastKind::kSpatialMap;
        }
        return std::nullopt;
    };
    if (auto k = classify(a, b)) {
        return {*k, false};
    }
    if (auto k = classify(b, a)) {
        return {*k, true};
    }
    fail(std::string(op) + ": shapes " + a.shape_string() + " and " + b.shape_string() +
         " are neither equal nor a supported (B,C,1,1)/(B,1,H,W) broadcast");
}

// Index of the map element matching flat position i of the full tensor.
struct MapIndexer {
    BroadcastKind kind;
    int channels;
    std::size_t spatial;

    std::size_t operator()(std::size_t i) const {
        if (kind == BroadcastKind::kExact) {
            return i;
        }
        if (kind == BroadcastKind::kChannelMap) {
            return i / spatial;
        }
        const std::size_t b = i / (static_cast<std::size_t>(channels) * spatial);
        return b * spatial + i % spatial;
    }
};

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    BroadcastPlan plan = plan_broadcast(a, b, "add");
    const Tensor& full = plan.swapped ? b : a;
    const Tensor& map = plan.swapped ? a : b;
    Tensor output(full.shape());
    MapIndexer mi{plan.kind, full.rank() == 4 ? full.extent(1) : 1,
                  full.rank() == 4 ? static_cast<std::size_t>(full.extent(2)) * full.extent(3)
                                   : 1};
    auto fv = full.data();
    auto mv = map.data();
    auto out = output.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fv[i] + mv[mi(i)];
    }
    if (detail::grad_enabled({&a, &b})) {
        Tensor full_t = full, map_t = map, out_t = output;
        detail::record("add", output, [full_t, map_t, out_t, mi]() mutable {
            auto go = out_t.grad();
            if (full_t.requires_grad()) {
                auto gf = full_t.grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gf[i] += go[i];
                }
            }
            if (map_t.requires_grad()) {
                auto gm = map_t.grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gm[mi(i)] += go[i];
                }
            }
        });
    }
    return output;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    BroadcastPlan plan = plan_broadcast(a, b, "mul");
    const Tensor& full = plan.swapped ? b : a;
    const Tensor& map = plan.swapped ? a : b;
    Tensor output(full.shape());
    MapIndexer mi{plan.kind, full.rank() == 4 ? full.extent(1) : 1,
                  full.rank() == 4 ? static_cast<std::size_t>(full.extent(2)) * full.extent(3)
                                   : 1};
    auto fv = full.data();
    auto mv = map.data();
    auto out = output.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fv[i] * mv[mi(i)];
    }
    if (detail::grad_enabled({&a, &b})) {
        Tensor full_t = full, map_t = map, out_t = output;
        detail::record("mul", output, [full_t, map_t, out_t, mi]() mutable {
            auto go = out_t.grad();
            auto fv = full_t.data();
            auto mv = map_t.data();
            if (full_t.requires_grad()) {
                auto gf = full_t.grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gf[i] += go[i] * mv[mi(i)];
                }
            }
            if (map_t.requires_grad()) {
                auto gm = map_t.grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gm[mi(i)] += go[i] * fv[i];
                }
            }
        });
    }
    return output;
}

// ---------------------------------------------------------------------------
// pooling reductions
// ---------------------------------------------------------------------------

Tensor global_pool(const Tensor& input, PoolKind kind) {
    require_rank4(input, "global_pool", "input");
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const std::size_t spatial = static_cast<std::size_t>(input.extent(2)) * input.extent(3);
    Tensor output({batch, channels, 1, 1});
    const double* in = input.raw();
    double* out = output.raw();
    std::vector<std::size_t> argmax;
    if (kind == PoolKind::kMax) {
        argmax.resize(static_cast<std::size_t>(batch) * channels);
    }
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            const std::size_t base = (static_cast<std::size_t>(b) * channels + c) * spatial;
            if (kind == PoolKind::kAvg) {
                double sum = 0.0;
                for (std::size_t p = 0; p < spatial; ++p) {
                    sum += in[base + p];
                }
                out[static_cast<std::size_t>(b) * channels + c] =
                    sum / static_cast<double>(spatial);
            } else {
                double best = in[base];
                std::size_t best_p = 0;
                for (std::size_t p = 1; p < spatial; ++p) {
                    if (in[base + p] > best) {
                        best = in[base + p];
                        best_p = p;
                    }
                }
                out[static_cast<std::size_t>(b) * channels + c] = best;
                argmax[static_cast<std::size_t>(b) * channels + c] = base + best_p;
            }
        }
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        if (kind == PoolKind::kAvg) {
            detail::record("global_pool_avg", output, [in_t, out_t, spatial]() mutable {
                auto go = out_t.grad();
                auto gi = in_t.grad();
                const double inv = 1.0 / static_cast<double>(spatial);
                for (std::size_t j = 0; j < go.size(); ++j) {
                    const double g = go[j] * inv;
                    double* dst = gi.data() + j * spatial;
                    for (std::size_t p = 0; p < spatial; ++p) {
                        dst[p] += g;
                    }
                }
            });
        } else {
            detail::record("global_pool_max", output,
                           [in_t, out_t, argmax = std::move(argmax)]() mutable {
                               auto go = out_t.grad();
                               auto gi = in_t.grad();
                               for (std::size_t j = 0; j < go.size(); ++j) {
                                   gi[argmax[j]] += go[j];
                               }
                           });
        }
    }
    return output;
}

Tensor channel_pool(const Tensor& input, ChannelPoolKind kind) {
    require_rank4(input, "channel_pool", "input");
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    Tensor output({batch, 1, height, width});
    const double* in = input.raw();
    double* out = output.raw();
    std::vector<int> argmax;
    if (kind == ChannelPoolKind::kMax) {
        argmax.resize(static_cast<std::size_t>(batch) * spatial);
    }
    for (int b = 0; b < batch; ++b) {
        const std::size_t bbase = static_cast<std::size_t>(b) * channels * spatial;
        for (std::size_t p = 0; p < spatial; ++p) {
            if (kind == ChannelPoolKind::kMean) {
                double sum = 0.0;
                for (int c = 0; c < channels; ++c) {
                    sum += in[bbase + c * spatial + p];
                }
                out[static_cast<std::size_t>(b) * spatial + p] =
                    sum / static_cast<double>(channels);
            } else {
                double best = in[bbase + p];
                int best_c = 0;
                for (int c = 1; c < channels; ++c) {
                    if (in[bbase + c * spatial + p] > best) {
                        best = in[bbase + c * spatial + p];
                        best_c = c;
                    }
                }
                out[static_cast<std::size_t>(b) * spatial + p] = best;
                argmax[static_cast<std::size_t>(b) * spatial + p] = best_c;
            }
        }
    }
    if (detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        if (kind == ChannelPoolKind::kMean) {
            detail::record("channel_pool_mean", output,
                           [in_t, out_t, batch, channels, spatial]() mutable {
                               auto go = out_t.grad();
                               auto gi = in_t.grad();
                               const double inv = 1.0 / static_cast<double>(channels);
                               for (int b = 0; b < batch; ++b) {
                                   const std::size_t bbase =
                                       static_cast<std::size_t>(b) * channels * spatial;
                                   for (std::size_t p = 0; p < spatial; ++p) {
                                       const double g =
                                           go[static_cast<std::size_t>(b) * spatial + p] * inv;
                                       for (int c = 0; c < channels; ++c) {
                                           gi[bbase + c * spatial + p] += g;
                                       }
                                   }
                               }
                           });
        } else {
            detail::record("channel_pool_max", output,
                           [in_t, out_t, batch, channels, spatial,
                            argmax = std::move(argmax)]() mutable {
                               auto go = out_t.grad();
                               auto gi = in_t.grad();
                               for (int b = 0; b < batch; ++b) {
                                   const std::size_t bbase =
                                       static_cast<std::size_t>(b) * channels * spatial;
                                   for (std::size_t p = 0; p < spatial; ++p) {
                                       const std::size_t j =
                                           static_cast<std::size_t>(b) * spatial + p;
                                       gi[bbase + argmax[j] * spatial + p] += go[j];
                                   }
                               }
                           });
        }
    }
    return output;
}

} // namespace hvnet::ops
