#include "hvnet/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "hvnet/ops.hpp"
#include "hvnet/tape.hpp"

namespace hvnet {

namespace {

constexpr double kLogClamp = 1e-12;

void require_same_shape(const Tensor& target, const Tensor& probs, const char* op) {
    if (target.shape() != probs.shape()) {
        throw std::invalid_argument(std::string(op) + ": target shape " + target.shape_string() +
                                    " does not match prediction shape " + probs.shape_string());
    }
}

} // namespace

Tensor dice_loss(const Tensor& target, const Tensor& probs, double eps) {
    require_same_shape(target, probs, "dice_loss");
    if (eps <= 0.0) {
        throw std::invalid_argument("dice_loss: eps must be > 0, got " + std::to_string(eps));
    }
    auto yv = target.data();
    auto pv = probs.data();
    double sum_yp = 0.0;
    double sum_y = 0.0;
    double sum_p = 0.0;
    for (std::size_t i = 0; i < yv.size(); ++i) {
        sum_yp += yv[i] * pv[i];
        sum_y += yv[i];
        sum_p += pv[i];
    }
    const double num = 2.0 * sum_yp + eps;
    const double den = sum_y + sum_p + eps;
    Tensor loss({1}, {1.0 - num / den});
    if (ops::detail::grad_enabled({&target, &probs})) {
        Tensor y_t = target, p_t = probs, out_t = loss;
        ops::detail::record("dice_loss", loss, [y_t, p_t, out_t, num, den]() mutable {
            const double g = out_t.grad()[0];
            const double inv_den2 = 1.0 / (den * den);
            auto yv = y_t.data();
            auto pv = p_t.data();
            // d/dp of (1 - num/den): num has 2y, den has 1 per coordinate.
            if (p_t.requires_grad()) {
                auto gp = p_t.grad();
                for (std::size_t i = 0; i < gp.size(); ++i) {
                    gp[i] += g * (num - 2.0 * yv[i] * den) * inv_den2;
                }
            }
            if (y_t.requires_grad()) {
                auto gy = y_t.grad();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gy[i] += g * (num - 2.0 * pv[i] * den) * inv_den2;
                }
            }
        });
    }
    return loss;
}

Tensor cross_entropy(const Tensor& target, const Tensor& probs) {
    require_same_shape(target, probs, "cross_entropy");
    if (probs.rank() != 4) {
        throw std::invalid_argument("cross_entropy: expected rank-4 input, got shape " +
                                    probs.shape_string());
    }
    const double n_pix = static_cast<double>(probs.extent(0)) * probs.extent(2) * probs.extent(3);
    auto yv = target.data();
    auto pv = probs.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < yv.size(); ++i) {
        if (yv[i] != 0.0) {
            acc -= yv[i] * std::log(std::max(pv[i], kLogClamp));
        }
    }
    Tensor loss({1}, {acc / n_pix});
    if (ops::detail::grad_enabled({&target, &probs})) {
        Tensor y_t = target, p_t = probs, out_t = loss;
        ops::detail::record("cross_entropy", loss, [y_t, p_t, out_t, n_pix]() mutable {
            const double g = out_t.grad()[0];
            auto yv = y_t.data();
            auto pv = p_t.data();
            if (p_t.requires_grad()) {
                auto gp = p_t.grad();
                for (std::size_t i = 0; i < gp.size(); ++i) {
                    if (yv[i] != 0.0 && pv[i] >= kLogClamp) {
                        gp[i] -= g * yv[i] / (pv[i] * n_pix);
                    }
                }
            }
            if (y_t.requires_grad()) {
                auto gy = y_t.grad();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gy[i] -= g * std::log(std::max(pv[i], kLogClamp)) / n_pix;
                }
            }
        });
    }
    return loss;
}

Tensor combined_loss(const Tensor& target, const Tensor& probs, double eps) {
    require_same_shape(target, probs, "combined_loss");
    if (probs.rank() != 4 || probs.extent(1) != 3) {
        throw std::invalid_argument("combined_loss: expected (B,3,H,W) input, got shape " +
                                    probs.shape_string());
    }
    Tensor ce = cross_entropy(target, probs);
    Tensor kidney = ops::add(ce, dice_loss(ops::slice_channels(target, 1, 1),
                                           ops::slice_channels(probs, 1, 1), eps));
    return ops::add(kidney, dice_loss(ops::slice_channels(target, 2, 1),
                                      ops::slice_channels(probs, 2, 1), eps));
}

Tensor total_loss(const std::vector<Tensor>& heads, const Tensor& target, double eps) {
    if (heads.empty()) {
        throw std::invalid_argument("total_loss: need at least one head");
    }
    Tensor acc = combined_loss(target, heads[0], eps);
    for (std::size_t i = 1; i < heads.size(); ++i) {
        acc = ops::add(acc, combined_loss(target, heads[i], eps));
    }
    return acc;
}

Tensor argmax_channels(const Tensor& probs) {
    if (probs.rank() != 4) {
        throw std::invalid_argument("argmax_channels: expected rank-4 input, got shape " +
                                    probs.shape_string());
    }
    const int batch = probs.extent(0);
    const int channels = probs.extent(1);
    const int height = probs.extent(2);
    const int width = probs.extent(3);
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    Tensor labels({batch, 1, height, width});
    const double* in = probs.raw();
    double* out = labels.raw();
    for (int b = 0; b < batch; ++b) {
        const std::size_t bbase = static_cast<std::size_t>(b) * channels * spatial;
        for (std::size_t p = 0; p < spatial; ++p) {
            double best = in[bbase + p];
            int best_c = 0;
            for (int c = 1; c < channels; ++c) {
                if (in[bbase + c * spatial + p] > best) {
                    best = in[bbase + c * spatial + p];
                    best_c = c;
                }
            }
            out[static_cast<std::size_t>(b) * spatial + p] = static_cast<double>(best_c);
        }
    }
    return labels;
}

DiceCounts dice_counts(const Tensor& pred_probs, const Tensor& target, int class_id) {
    require_same_shape(target, pred_probs, "dice_counts");
    if (pred_probs.rank() != 4) {
        throw std::invalid_argument("dice_counts: expected rank-4 input, got shape " +
                                    pred_probs.shape_string());
    }
    const int channels = pred_probs.extent(1);
    if (class_id < 0 || class_id >= channels) {
        throw std::invalid_argument("dice_counts: class_id " + std::to_string(class_id) +
                                    " out of range for " + std::to_string(channels) + " classes");
    }
    Tensor pred_labels = argmax_channels(pred_probs);
    Tensor true_labels = argmax_channels(target);
    auto pl = pred_labels.data();
    auto tl = true_labels.data();
    DiceCounts counts;
    const double cls = static_cast<double>(class_id);
    for (std::size_t i = 0; i < pl.size(); ++i) {
        const bool in_pred = pl[i] == cls;
        const bool in_true = tl[i] == cls;
        counts.predicted += in_pred;
        counts.actual += in_true;
        counts.intersection += in_pred && in_true;
    }
    return counts;
}

double dice_from_counts(const DiceCounts& counts) {
    if (counts.predicted + counts.actual == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(counts.intersection) /
           static_cast<double>(counts.predicted + counts.actual);
}

double dice_score(const Tensor& pred_probs, const Tensor& target, int class_id) {
    return dice_from_counts(dice_counts(pred_probs, target, class_id));
}

} // namespace hvnet
