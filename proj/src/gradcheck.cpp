#include "hvnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hvnet/losses.hpp"
#include "hvnet/network.hpp"
#include "hvnet/ops.hpp"
#include "hvnet/rng.hpp"
#include "hvnet/tape.hpp"

namespace hvnet {

GradCheckReport grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                           const GradCheckOptions& options) {
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tensor output;
    Tensor cotangent;
    {
        TapeScope scope;
        output = fn();
        cotangent = Tensor(output.shape());
        Rng rng(mix_seed(options.seed, hash_string("cotangent")));
        for (double& v : cotangent.data()) {
            v = rng.normal();
        }
        scope.tape().backward_seeded(output, cotangent);
    }

    auto objective = [&]() {
        Tensor y = fn(); // no tape active: plain evaluation
        double j = 0.0;
        auto yv = y.data();
        auto cv = cotangent.data();
        for (std::size_t i = 0; i < yv.size(); ++i) {
            j += cv[i] * yv[i];
        }
        return j;
    };

    GradCheckReport report;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& x = inputs[ti];
        auto xv = x.data();
        auto analytic = x.grad();

        std::vector<std::size_t> coords(xv.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (options.coord_fraction < 1.0) {
            const std::size_t keep = std::max<std::size_t>(
                1, static_cast<std::size_t>(
                       std::llround(options.coord_fraction * static_cast<double>(coords.size()))));
            if (keep < coords.size()) {
                Rng rng(mix_seed(options.seed, hash_string("coords") + ti));
                for (std::size_t i = 0; i < keep; ++i) {
                    const std::size_t j =
                        i + static_cast<std::size_t>(rng.uniform_int(
                                0, static_cast<std::int64_t>(coords.size() - 1 - i)));
                    std::swap(coords[i], coords[j]);
                }
                coords.resize(keep);
            }
        }

        for (std::size_t j : coords) {
            const double orig = xv[j];
            const double h = options.step_scale * std::max(1.0, std::abs(orig));
            xv[j] = orig + h;
            const double plus = objective();
            xv[j] = orig - h;
            const double minus = objective();
            xv[j] = orig;
            const double numeric = (plus - minus) / (2.0 * h);
            const double a = analytic[j];
            // The denominator floor absorbs central-difference roundoff: on an
            // O(10) objective the quotient carries ~1e-9 of absolute noise, so
            // differences below floor * tolerance are indistinguishable from
            // an exact match.
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = ti;
                report.worst_coord = j;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            ++report.coords_checked;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Named suite
// ---------------------------------------------------------------------------

namespace {

Tensor randn_tensor(const std::vector<int>& shape, std::uint64_t seed) {
    Tensor t(shape);
    Rng rng(seed);
    for (double& v : t.data()) {
        v = rng.normal();
    }
    return t;
}

Tensor uniform_tensor(const std::vector<int>& shape, std::uint64_t seed, double lo, double hi) {
    Tensor t(shape);
    Rng rng(seed);
    for (double& v : t.data()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

// Shuffled multiples of 0.01: pairwise gaps far exceed the finite-difference
// step, so argmax selections in the max-pool family cannot flip.
Tensor separated_tensor(const std::vector<int>& shape, std::uint64_t seed) {
    Tensor t(shape);
    auto data = t.data();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        data[static_cast<std::size_t>(i)] = (static_cast<double>(i) - n / 2) * 0.01;
    }
    Rng rng(seed);
    for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = rng.uniform_int(0, i);
        std::swap(data[static_cast<std::size_t>(i)], data[static_cast<std::size_t>(j)]);
    }
    return t;
}

// Random one-hot (B,C,H,W) target.
Tensor one_hot_tensor(int batch, int channels, int height, int width, std::uint64_t seed) {
    Tensor t({batch, channels, height, width});
    Rng rng(seed);
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    auto data = t.data();
    for (int b = 0; b < batch; ++b) {
        for (std::size_t p = 0; p < spatial; ++p) {
            const int cls = static_cast<int>(rng.uniform_int(0, channels - 1));
            data[(static_cast<std::size_t>(b) * channels + cls) * spatial + p] = 1.0;
        }
    }
    return t;
}

constexpr int kSeeds = 5;

double over_seeds(const std::function<double(std::uint64_t)>& one) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
        worst = std::max(worst, one(seed));
    }
    return worst;
}

} // namespace

std::vector<GradCheckCase> gradcheck_suite() {
    std::vector<GradCheckCase> cases;
    auto add = [&](std::string name, double tol, std::function<double()> run) {
        cases.push_back({std::move(name), tol, std::move(run)});
    };

    add("conv2d", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 3, 6, 6}, s);
            Tensor kernel = randn_tensor({4, 3, 3, 3}, s + 100);
            Tensor bias = randn_tensor({4}, s + 200);
            double worst = grad_check(
                                [&] { return ops::conv2d(input, kernel, bias); },
                                {input, kernel, bias}, {.seed = s})
                               .max_rel_error;
            worst = std::max(
                worst, grad_check(
                           [&] {
                               return ops::conv2d(input, kernel, bias, 1, ops::Padding::kValid);
                           },
                           {input, kernel, bias}, {.seed = s + 50})
                           .max_rel_error);
            return worst;
        });
    });

    add("maxpool2d", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = separated_tensor({2, 4, 8, 8}, s);
            return grad_check([&] { return ops::maxpool2d(input, 2); }, {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("upsample_nearest2d", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 3, 4, 4}, s);
            return grad_check([&] { return ops::upsample_nearest2d(input, 2); }, {input},
                              {.seed = s})
                .max_rel_error;
        });
    });

    add("elu", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 4, 8, 8}, s);
            return grad_check([&] { return ops::elu(input); }, {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("sigmoid", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 4, 8, 8}, s);
            return grad_check([&] { return ops::sigmoid(input); }, {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("softmax_channels", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 4, 8, 8}, s);
            return grad_check([&] { return ops::softmax_channels(input); }, {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("batchnorm2d", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 4, 8, 8}, s);
            Tensor gamma = uniform_tensor({4}, s + 100, 0.5, 1.5);
            Tensor beta = randn_tensor({4}, s + 200);
            double worst = 0.0;
            for (Mode mode : {Mode::kTrain, Mode::kEval}) {
                ops::BatchNormState state{uniform_tensor({4}, s + 300, -0.5, 0.5),
                                          uniform_tensor({4}, s + 400, 0.5, 2.0)};
                worst = std::max(
                    worst, grad_check(
                               [&] {
                                   return ops::batchnorm2d(input, gamma, beta, state, 0.1, 1e-5,
                                                           mode);
                               },
                               {input, gamma, beta}, {.seed = s})
                               .max_rel_error);
            }
            return worst;
        });
    });

    add("dropout", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 4, 8, 8}, s);
            return grad_check([&] { return ops::dropout(input, 0.3, Mode::kTrain, 99); },
                              {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("concat_channels", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor a = randn_tensor({2, 1, 4, 4}, s);
            Tensor b = randn_tensor({2, 2, 4, 4}, s + 100);
            Tensor c = randn_tensor({2, 3, 4, 4}, s + 200);
            return grad_check([&] { return ops::concat_channels({a, b, c}); }, {a, b, c},
                              {.seed = s})
                .max_rel_error;
        });
    });

    add("slice_channels", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 4, 6, 6}, s);
            return grad_check([&] { return ops::slice_channels(input, 1, 2); }, {input},
                              {.seed = s})
                .max_rel_error;
        });
    });

    add("add", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor full = randn_tensor({2, 3, 4, 4}, s);
            Tensor same = randn_tensor({2, 3, 4, 4}, s + 100);
            Tensor cmap = randn_tensor({2, 3, 1, 1}, s + 200);
            Tensor smap = randn_tensor({2, 1, 4, 4}, s + 300);
            double worst = 0.0;
            worst = std::max(worst, grad_check([&] { return ops::add(full, same); },
                                               {full, same}, {.seed = s})
                                        .max_rel_error);
            worst = std::max(worst, grad_check([&] { return ops::add(full, cmap); },
                                               {full, cmap}, {.seed = s + 1})
                                        .max_rel_error);
            worst = std::max(worst, grad_check([&] { return ops::add(smap, full); },
                                               {full, smap}, {.seed = s + 2})
                                        .max_rel_error);
            return worst;
        });
    });

    add("mul", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor full = randn_tensor({2, 3, 4, 4}, s);
            Tensor same = randn_tensor({2, 3, 4, 4}, s + 100);
            Tensor cmap = randn_tensor({2, 3, 1, 1}, s + 200);
            Tensor smap = randn_tensor({2, 1, 4, 4}, s + 300);
            double worst = 0.0;
            worst = std::max(worst, grad_check([&] { return ops::mul(full, same); },
                                               {full, same}, {.seed = s})
                                        .max_rel_error);
            worst = std::max(worst, grad_check([&] { return ops::mul(full, cmap); },
                                               {full, cmap}, {.seed = s + 1})
                                        .max_rel_error);
            worst = std::max(worst, grad_check([&] { return ops::mul(smap, full); },
                                               {full, smap}, {.seed = s + 2})
                                        .max_rel_error);
            return worst;
        });
    });

    add("global_pool", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor avg_in = randn_tensor({2, 4, 8, 8}, s);
            Tensor max_in = separated_tensor({2, 4, 8, 8}, s + 100);
            double worst =
                grad_check([&] { return ops::global_pool(avg_in, ops::PoolKind::kAvg); },
                           {avg_in}, {.seed = s})
                    .max_rel_error;
            return std::max(
                worst, grad_check([&] { return ops::global_pool(max_in, ops::PoolKind::kMax); },
                                  {max_in}, {.seed = s + 1})
                           .max_rel_error);
        });
    });

    add("channel_pool", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor mean_in = randn_tensor({2, 4, 8, 8}, s);
            Tensor max_in = separated_tensor({2, 4, 8, 8}, s + 100);
            double worst =
                grad_check(
                    [&] { return ops::channel_pool(mean_in, ops::ChannelPoolKind::kMean); },
                    {mean_in}, {.seed = s})
                    .max_rel_error;
            return std::max(
                worst,
                grad_check([&] { return ops::channel_pool(max_in, ops::ChannelPoolKind::kMax); },
                           {max_in}, {.seed = s + 1})
                    .max_rel_error);
        });
    });

    add("coordconv", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor input = randn_tensor({2, 3, 6, 6}, s);
            return grad_check([&] { return coordconv_augment(input); }, {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("dice_loss", 1e-6, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor target = one_hot_tensor(2, 1, 4, 4, s);
            Tensor probs = uniform_tensor({2, 1, 4, 4}, s + 100, 0.05, 0.95);
            return grad_check([&] { return dice_loss(target, probs); }, {probs}, {.seed = s})
                .max_rel_error;
        });
    });

    add("cross_entropy", 1e-6, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor target = one_hot_tensor(2, 3, 4, 4, s);
            Tensor probs = uniform_tensor({2, 3, 4, 4}, s + 100, 0.1, 0.9);
            return grad_check([&] { return cross_entropy(target, probs); }, {probs}, {.seed = s})
                .max_rel_error;
        });
    });

    add("combined_loss", 1e-6, [] {
        return over_seeds([](std::uint64_t s) {
            Tensor target = one_hot_tensor(2, 3, 4, 4, s);
            Tensor probs = uniform_tensor({2, 3, 4, 4}, s + 100, 0.1, 0.9);
            return grad_check([&] { return combined_loss(target, probs); }, {probs}, {.seed = s})
                .max_rel_error;
        });
    });

    add("residual_block", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            ModelConfig config;
            config.base_channels = 4;
            config.init_seed = s;
            Model model(config);
            Tensor input = randn_tensor({2, 4, 8, 8}, s + 100);
            return grad_check(
                       [&] { return model.residual_block(input, "enc1.res1", Mode::kTrain); },
                       {input}, {.seed = s})
                .max_rel_error;
        });
    });

    add("cbam", 1e-4, [] {
        return over_seeds([](std::uint64_t s) {
            ModelConfig config;
            config.base_channels = 4;
            config.init_seed = s;
            Model model(config);
            Tensor fused = separated_tensor({2, 10, 8, 8}, s + 100);
            std::vector<Tensor> inputs = {fused};
            for (auto& [name, tensor] : model.params()) {
                if (name.rfind("attn.", 0) == 0) {
                    inputs.push_back(tensor);
                }
            }
            return grad_check([&] { return model.cbam(fused); }, inputs, {.seed = s})
                .max_rel_error;
        });
    });

    add("model", 1e-3, [] {
        ModelConfig config;
        config.base_channels = 4;
        config.init_seed = 7;
        Model model(config);
        Tensor input = uniform_tensor({1, 1, 16, 16}, 11, 0.0, 1.0);
        Tensor target = one_hot_tensor(1, 3, 16, 16, 12);
        std::vector<Tensor> inputs;
        for (auto& [name, tensor] : model.params()) {
            inputs.push_back(tensor);
        }
        GradCheckOptions opts;
        opts.seed = 13;
        // Sampled 1% of each parameter's coordinates.
        opts.coord_fraction = 0.01;
        auto fn = [&] {
            Model::Outputs out = model.forward(input, Mode::kTrain, 17);
            return total_loss({out.hv1, out.hv2, out.final_}, target);
        };
        return grad_check(fn, inputs, opts).max_rel_error;
    });

    return cases;
}

} // namespace hvnet
