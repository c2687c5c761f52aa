#pragma once

#include <cstdint>
#include <vector>

#include "hvnet/tensor.hpp"

namespace hvnet {

// Smoothing constant for the soft Dice loss.
inline constexpr double kDiceEps = 1e-5;

// Soft Dice loss over a single foreground channel, pooled over the whole
// batch: 1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps). y is the binary
// ground truth, p the predicted probabilities. Empty-vs-empty gives 0.
Tensor dice_loss(const Tensor& target, const Tensor& probs, double eps = kDiceEps);

// Cross entropy -sum(y * ln(max(p, 1e-12))) averaged over pixels (B*H*W).
Tensor cross_entropy(const Tensor& target, const Tensor& probs);

// cross_entropy plus the Dice losses of the kidney (channel 1) and tumor
// (channel 2) foreground channels.
Tensor combined_loss(const Tensor& target, const Tensor& probs, double eps = kDiceEps);

// Unweighted sum of combined_loss over all supervision heads.
Tensor total_loss(const std::vector<Tensor>& heads, const Tensor& target,
                  double eps = kDiceEps);

// Per-pixel channel argmax of a (B,C,H,W) map -> (B,1,H,W) label map.
// Ties resolve to the lowest channel index.
Tensor argmax_channels(const Tensor& probs);

// Raw overlap counts behind the hard Dice score, so callers can pool
// across batches or keep per-image tallies.
struct DiceCounts {
    std::int64_t intersection = 0;
    std::int64_t predicted = 0;
    std::int64_t actual = 0;
};

DiceCounts dice_counts(const Tensor& pred_probs, const Tensor& target, int class_id);

// 2*I / (P + A); defined as 1 when both sets are empty.
double dice_from_counts(const DiceCounts& counts);

// Hard Dice score of one class after argmax binarization, over the batch.
double dice_score(const Tensor& pred_probs, const Tensor& target, int class_id);

} // namespace hvnet
