#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "hvnet/losses.hpp"
#include "hvnet/ops.hpp"
#include "hvnet/rng.hpp"
#include "hvnet/tape.hpp"
#include "hvnet/tensor.hpp"

using namespace hvnet;

namespace {

// Random binary mask plane (B,1,H,W).
Tensor random_mask(std::vector<int> shape, std::uint64_t seed, double p = 0.4) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.uniform() < p ? 1.0 : 0.0;
    }
    return t;
}

} // namespace

TEST_CASE("dice loss of a mask against itself is exactly zero") {
    Tensor y = random_mask({2, 1, 8, 8}, 7);
    Tensor loss = dice_loss(y, y);
    // Numerator and denominator coincide: 2*S + eps over 2*S + eps.
    CHECK(loss.item() == 0.0);
}

TEST_CASE("dice loss on disjoint masks sits just below one") {
    Tensor y({1, 1, 2, 2}, {1, 1, 0, 0});
    Tensor p({1, 1, 2, 2}, {0, 0, 1, 1});
    const double loss = dice_loss(y, p).item();
    CHECK(loss >= 1.0 - 1e-3);
    CHECK(loss < 1.0);
}

TEST_CASE("dice loss on empty-vs-empty is zero") {
    Tensor y({1, 1, 2, 2}, 0.0);
    CHECK(dice_loss(y, y).item() == 0.0);
}

TEST_CASE("dice loss hand case") {
    // y = (1,1,0,0), p = (1,0,0,0): 1 - (2 + eps) / (3 + eps).
    Tensor y({1, 1, 1, 4}, {1, 1, 0, 0});
    Tensor p({1, 1, 1, 4}, {1, 0, 0, 0});
    const double loss = dice_loss(y, p).item();
    CHECK(loss == doctest::Approx(1.0 / 3.0).epsilon(1e-4));
    CHECK(loss == doctest::Approx(0.3333322222259259).epsilon(1e-12));
}

TEST_CASE("dice loss pools over the batch") {
    // Image 0 predicts its own mask perfectly, image 1 predicts nothing.
    // Pooled: I = 2, sum(y) = 4, sum(p) = 2 -> 1 - (4+eps)/(6+eps), which is
    // not the mean of the per-image losses (0 and ~1).
    Tensor y({2, 1, 1, 2}, {1, 1, 1, 1});
    Tensor p({2, 1, 1, 2}, {1, 1, 0, 0});
    const double loss = dice_loss(y, p).item();
    CHECK(loss == doctest::Approx(1.0 - (4.0 + kDiceEps) / (6.0 + kDiceEps)).epsilon(1e-12));
}

TEST_CASE("dice loss analytic gradient matches the quotient rule") {
    Tensor y({1, 1, 1, 2}, {1, 0});
    Tensor p({1, 1, 1, 2}, {0.6, 0.3});
    p.set_requires_grad(true);
    TapeScope scope;
    Tensor loss = dice_loss(y, p);
    scope.tape().backward(loss);
    // num = 2*0.6 + eps, den = 1 + 0.9 + eps;
    // dL/dp_i = (num - 2 y_i den) / den^2.
    const double num = 1.2 + kDiceEps;
    const double den = 1.9 + kDiceEps;
    CHECK(p.grad()[0] == doctest::Approx((num - 2.0 * den) / (den * den)).epsilon(1e-12));
    CHECK(p.grad()[1] == doctest::Approx(num / (den * den)).epsilon(1e-12));
}

TEST_CASE("dice loss shape mismatch is rejected") {
    Tensor y({1, 1, 2, 2}, 0.0);
    Tensor p({1, 1, 2, 3}, 0.0);
    CHECK_THROWS_AS(dice_loss(y, p), std::invalid_argument);
}

TEST_CASE("cross entropy of the uniform prediction is ln 3") {
    Tensor y({2, 3, 4, 4}, 0.0);
    // One-hot targets, arbitrary classes.
    for (int b = 0; b < 2; ++b) {
        for (int h = 0; h < 4; ++h) {
            for (int w = 0; w < 4; ++w) {
                y.at(b, (b + h + w) % 3, h, w) = 1.0;
            }
        }
    }
    Tensor p({2, 3, 4, 4}, 1.0 / 3.0);
    CHECK(cross_entropy(y, p).item() ==
          doctest::Approx(1.0986122886681098).epsilon(1e-12)); // ln 3
}

TEST_CASE("cross entropy single-pixel hand case") {
    Tensor y({1, 2, 1, 1}, {1.0, 0.0});
    Tensor p({1, 2, 1, 1}, {0.5, 0.5});
    CHECK(cross_entropy(y, p).item() ==
          doctest::Approx(0.6931471805599453).epsilon(1e-15)); // ln 2
}

TEST_CASE("cross entropy averages over pixels, not channels") {
    // Two pixels: confident right (p=1) and uniform -> (0 + ln2)/2.
    Tensor y({1, 2, 1, 2}, {1, 1, 0, 0});
    Tensor p({1, 2, 1, 2}, {1.0, 0.5, 0.0, 0.5});
    CHECK(cross_entropy(y, p).item() ==
          doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy clamps vanishing probabilities") {
    Tensor y({1, 1, 1, 1}, {1.0});
    Tensor p({1, 1, 1, 1}, {0.0});
    CHECK(cross_entropy(y, p).item() ==
          doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
}

TEST_CASE("cross entropy gradient is -y/p per pixel count") {
    Tensor y({1, 2, 1, 1}, {1.0, 0.0});
    Tensor p({1, 2, 1, 1}, {0.25, 0.75});
    p.set_requires_grad(true);
    TapeScope scope;
    Tensor loss = cross_entropy(y, p);
    scope.tape().backward(loss);
    CHECK(p.grad()[0] == doctest::Approx(-4.0).epsilon(1e-12));
    CHECK(p.grad()[1] == 0.0);
}

TEST_CASE("combined loss is cross entropy plus both foreground dice terms") {
    Rng rng(13);
    Tensor y({2, 3, 4, 4}, 0.0);
    for (int b = 0; b < 2; ++b) {
        for (int h = 0; h < 4; ++h) {
            for (int w = 0; w < 4; ++w) {
                y.at(b, (h + 2 * w + b) % 3, h, w) = 1.0;
            }
        }
    }
    Tensor logits = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor p = ops::softmax_channels(logits);
    const double combined = combined_loss(y, p).item();
    const double ce = cross_entropy(y, p).item();
    const double d1 = dice_loss(ops::slice_channels(y, 1, 1), ops::slice_channels(p, 1, 1)).item();
    const double d2 = dice_loss(ops::slice_channels(y, 2, 1), ops::slice_channels(p, 2, 1)).item();
    CHECK(combined == doctest::Approx(ce + d1 + d2).epsilon(1e-12));
}

TEST_CASE("total loss sums over heads") {
    Rng rng(17);
    Tensor y({1, 3, 2, 2}, 0.0);
    y.at(0, 0, 0, 0) = 1.0;
    y.at(0, 1, 0, 1) = 1.0;
    y.at(0, 2, 1, 0) = 1.0;
    y.at(0, 0, 1, 1) = 1.0;
    Tensor p1 = ops::softmax_channels(Tensor::randn({1, 3, 2, 2}, rng));
    Tensor p2 = ops::softmax_channels(Tensor::randn({1, 3, 2, 2}, rng));
    Tensor p3 = ops::softmax_channels(Tensor::randn({1, 3, 2, 2}, rng));
    const double total = total_loss({p1, p2, p3}, y).item();
    const double parts = combined_loss(y, p1).item() + combined_loss(y, p2).item() +
                         combined_loss(y, p3).item();
    CHECK(total == doctest::Approx(parts).epsilon(1e-12));
    const double same_head = total_loss({p1, p1, p1}, y).item();
    CHECK(same_head == doctest::Approx(3.0 * combined_loss(y, p1).item()).epsilon(1e-12));
}

TEST_CASE("argmax_channels breaks ties toward the lowest class") {
    Tensor p({1, 3, 1, 2}, {0.4, 0.5, 0.4, 0.3, 0.2, 0.2});
    Tensor labels = argmax_channels(p);
    REQUIRE(labels.shape() == std::vector<int>{1, 1, 1, 2});
    CHECK(labels.raw()[0] == 0.0); // 0.4 vs 0.4 vs 0.2 -> class 0
    CHECK(labels.raw()[1] == 0.0); // 0.5 vs 0.3 vs 0.2 -> class 0
    Tensor p2({1, 3, 1, 1}, {0.1, 0.2, 0.7});
    CHECK(argmax_channels(p2).raw()[0] == 2.0);
}

TEST_CASE("dice counts and score on a hand case") {
    // Predictions: class 1 at two pixels, one overlapping the truth.
    Tensor p({1, 3, 1, 3}, {0.1, 0.1, 0.8,   // pixel-major after transpose: see below
                            0.8, 0.8, 0.1,
                            0.1, 0.1, 0.1});
    // Channel layout is (c, w): c0 = (0.1, 0.1, 0.8), c1 = (0.8, 0.8, 0.1),
    // c2 = (0.1, 0.1, 0.1) -> argmax = (1, 1, 0).
    Tensor y({1, 3, 1, 3}, {0, 1, 1,
                            1, 0, 0,
                            0, 0, 0}); // truth labels (1, 0, 0)
    const DiceCounts counts = dice_counts(p, y, 1);
    CHECK(counts.predicted == 2);
    CHECK(counts.actual == 1);
    CHECK(counts.intersection == 1);
    CHECK(dice_score(p, y, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("dice score of a perfect prediction is one") {
    Tensor y({1, 3, 2, 2}, 0.0);
    y.at(0, 1, 0, 0) = 1.0;
    y.at(0, 1, 0, 1) = 1.0;
    y.at(0, 2, 1, 0) = 1.0;
    y.at(0, 0, 1, 1) = 1.0;
    // Feeding the one-hot truth as the prediction: argmax reproduces it.
    CHECK(dice_score(y, y, 0) == 1.0);
    CHECK(dice_score(y, y, 1) == 1.0);
    CHECK(dice_score(y, y, 2) == 1.0);
}

TEST_CASE("dice score with both sets empty is one") {
    Tensor y({1, 3, 1, 2}, 0.0);
    y.at(0, 0, 0, 0) = 1.0;
    y.at(0, 0, 0, 1) = 1.0; // all background
    CHECK(dice_score(y, y, 2) == 1.0);
    CHECK(dice_from_counts(DiceCounts{0, 0, 0}) == 1.0);
    CHECK(dice_from_counts(DiceCounts{0, 1, 1}) == 0.0);
}

TEST_CASE("loss inputs must share shapes across heads") {
    Tensor y({1, 3, 2, 2}, 0.0);
    Tensor p({1, 3, 2, 2}, 1.0 / 3.0);
    Tensor bad({1, 3, 4, 4}, 1.0 / 3.0);
    CHECK_THROWS_AS(total_loss({p, bad, p}, y), std::invalid_argument);
    CHECK_THROWS_AS(total_loss({}, y), std::invalid_argument);
}
