#include "hvnet/network.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "hvnet/rng.hpp"
#include "hvnet/tape.hpp"

namespace hvnet {

namespace {

[[noreturn]] void reject(const std::string& msg) {
    throw std::invalid_argument(msg);
}

} // namespace

void validate(const ModelConfig& config) {
    if (config.in_channels < 1) {
        reject("ModelConfig: in_channels must be >= 1, got " +
               std::to_string(config.in_channels));
    }
    if (config.num_classes != 3) {
        reject("ModelConfig: num_classes is fixed at 3, got " +
               std::to_string(config.num_classes));
    }
    if (config.base_channels < config.num_classes) {
        reject("ModelConfig: base_channels must be >= num_classes, got " +
               std::to_string(config.base_channels));
    }
    if (config.depth != 4) {
        reject("ModelConfig: depth is fixed at 4, got " + std::to_string(config.depth));
    }
    if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0) {
        reject("ModelConfig: dropout_rate must lie in [0, 1), got " +
               std::to_string(config.dropout_rate));
    }
    if (config.elu_alpha <= 0.0) {
        reject("ModelConfig: elu_alpha must be > 0, got " + std::to_string(config.elu_alpha));
    }
    if (config.spatial_attention_kernel < 1 || config.spatial_attention_kernel % 2 == 0) {
        reject("ModelConfig: spatial_attention_kernel must be odd and >= 1, got " +
               std::to_string(config.spatial_attention_kernel));
    }
    if (config.use_attention) {
        const int fused = config.base_channels + 2 * config.num_classes;
        if (config.attention_reduction < 1 || fused % config.attention_reduction != 0) {
            reject("ModelConfig: attention_reduction " +
                   std::to_string(config.attention_reduction) +
                   " must divide the fused channel count " + std::to_string(fused));
        }
    }
}

Tensor coordconv_augment(const Tensor& input) {
    if (input.rank() != 4) {
        reject("coordconv_augment: expected rank-4 input, got shape " + input.shape_string());
    }
    const int batch = input.extent(0);
    const int channels = input.extent(1);
    const int height = input.extent(2);
    const int width = input.extent(3);
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    Tensor output({batch, channels + 2, height, width});
    const double* in = input.raw();
    double* out = output.raw();
    for (int b = 0; b < batch; ++b) {
        double* dst = out + static_cast<std::size_t>(b) * (channels + 2) * spatial;
        const double* src = in + static_cast<std::size_t>(b) * channels * spatial;
        std::copy(src, src + static_cast<std::size_t>(channels) * spatial, dst);
        double* iplane = dst + static_cast<std::size_t>(channels) * spatial;
        double* jplane = iplane + spatial;
        for (int r = 0; r < height; ++r) {
            const double iv = height > 1 ? 2.0 * r / (height - 1) - 1.0 : 0.0;
            for (int c = 0; c < width; ++c) {
                iplane[static_cast<std::size_t>(r) * width + c] = iv;
                jplane[static_cast<std::size_t>(r) * width + c] =
                    width > 1 ? 2.0 * c / (width - 1) - 1.0 : 0.0;
            }
        }
    }
    if (ops::detail::grad_enabled({&input})) {
        Tensor in_t = input, out_t = output;
        ops::detail::record("coordconv_augment", output,
                            [in_t, out_t, batch, channels, spatial]() mutable {
                                const double* go = out_t.grad().data();
                                double* gi = in_t.grad().data();
                                for (int b = 0; b < batch; ++b) {
                                    const double* src =
                                        go + static_cast<std::size_t>(b) * (channels + 2) * spatial;
                                    double* dst =
                                        gi + static_cast<std::size_t>(b) * channels * spatial;
                                    for (std::size_t i = 0;
                                         i < static_cast<std::size_t>(channels) * spatial; ++i) {
                                        dst[i] += src[i];
                                    }
                                }
                            });
    }
    return output;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

Tensor he_conv_kernel(const std::string& name, int cout, int cin, int k,
                      std::uint64_t init_seed) {
    Tensor kernel({cout, cin, k, k});
    Rng rng(mix_seed(init_seed, hash_string(name)));
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    auto data = kernel.data();
    for (double& v : data) {
        v = rng.normal() * std_dev;
    }
    kernel.set_requires_grad(true);
    return kernel;
}

} // namespace

Model::Model(const ModelConfig& config) : config_(config) {
    validate(config_);
    const int base = config_.base_channels;
    const std::uint64_t seed = config_.init_seed;

    auto add_conv = [&](const std::string& prefix, int cout, int cin, int k) {
        params_.emplace(prefix + ".weight", he_conv_kernel(prefix + ".weight", cout, cin, k, seed));
        Tensor bias({cout});
        bias.set_requires_grad(true);
        params_.emplace(prefix + ".bias", bias);
    };
    auto add_bn = [&](const std::string& prefix, int c) {
        Tensor gamma({c}, 1.0);
        gamma.set_requires_grad(true);
        params_.emplace(prefix + ".gamma", gamma);
        Tensor beta({c});
        beta.set_requires_grad(true);
        params_.emplace(prefix + ".beta", beta);
        buffers_.emplace(prefix + ".running_mean", Tensor({c}));
        buffers_.emplace(prefix + ".running_var", Tensor({c}, 1.0));
    };
    auto add_res = [&](const std::string& prefix, int c) {
        add_conv(prefix + ".conv1", c, c, 3);
        add_bn(prefix + ".bn1", c);
        add_conv(prefix + ".conv2", c, c, 3);
        add_bn(prefix + ".bn2", c);
    };
    auto add_stage = [&](const std::string& prefix, int cout, int cin) {
        add_conv(prefix + ".conv", cout, cin, 3);
        add_bn(prefix + ".bn", cout);
        add_res(prefix + ".res1", cout);
        add_res(prefix + ".res2", cout);
    };

    // Encoder widths base * 2^s for stages s = 0..3, bottleneck base * 16.
    add_stage("enc1", base, config_.in_channels + 2);
    add_stage("enc2", base * 2, base);
    add_stage("enc3", base * 4, base * 2);
    add_stage("enc4", base * 8, base * 4);

    add_conv("bottleneck.conv", base * 16, base * 8, 3);
    add_bn("bottleneck.bn", base * 16);
    add_res("bottleneck.res", base * 16);

    // Decoder input widths: upsampled features plus the encoder skip.
    add_stage("dec1", base * 8, base * 16 + base * 8);
    add_stage("dec2", base * 4, base * 8 + base * 4);
    add_stage("dec3", base * 2, base * 4 + base * 2);
    add_stage("dec4", base, base * 2 + base);

    add_conv("hv1.conv", config_.num_classes, base * 4, 1);
    add_conv("hv2.conv", config_.num_classes, base * 2, 1);

    const int fused = base + 2 * config_.num_classes;
    add_conv("head.conv", config_.num_classes, fused, 1);

    if (config_.use_attention) {
        const int squeezed = fused / config_.attention_reduction;
        add_conv("attn.mlp1", squeezed, fused, 1);
        add_conv("attn.mlp2", fused, squeezed, 1);
        add_conv("attn.spatial", 1, 2, config_.spatial_attention_kernel);
    }
}

Tensor& Model::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::logic_error("Model: unknown parameter \"" + name + "\"");
    }
    return it->second;
}

ops::BatchNormState Model::bn_state(const std::string& prefix) {
    // The copies share storage with the buffer map, so train-mode updates to
    // the running stats land in buffers_.
    return ops::BatchNormState{buffers_.at(prefix + ".running_mean"),
                               buffers_.at(prefix + ".running_var")};
}

Tensor Model::conv_bn_elu(const Tensor& input, const std::string& prefix, Mode mode) {
    Tensor x = ops::conv2d(input, param(prefix + ".conv.weight"), param(prefix + ".conv.bias"));
    ops::BatchNormState state = bn_state(prefix + ".bn");
    x = ops::batchnorm2d(x, param(prefix + ".bn.gamma"), param(prefix + ".bn.beta"), state, 0.1,
                         1e-5, mode);
    return ops::elu(x, config_.elu_alpha);
}

Tensor Model::residual_block(const Tensor& input, const std::string& prefix, Mode mode) {
    Tensor x = ops::conv2d(input, param(prefix + ".conv1.weight"), param(prefix + ".conv1.bias"));
    ops::BatchNormState bn1 = bn_state(prefix + ".bn1");
    x = ops::batchnorm2d(x, param(prefix + ".bn1.gamma"), param(prefix + ".bn1.beta"), bn1, 0.1,
                         1e-5, mode);
    x = ops::elu(x, config_.elu_alpha);
    x = ops::conv2d(x, param(prefix + ".conv2.weight"), param(prefix + ".conv2.bias"));
    ops::BatchNormState bn2 = bn_state(prefix + ".bn2");
    x = ops::batchnorm2d(x, param(prefix + ".bn2.gamma"), param(prefix + ".bn2.beta"), bn2, 0.1,
                         1e-5, mode);
    x = ops::add(x, input);
    return ops::elu(x, config_.elu_alpha);
}

Model::EncoderOut Model::encoder_block(const Tensor& input, const std::string& prefix, Mode mode,
                                       std::uint64_t dropout_seed) {
    Tensor f = conv_bn_elu(input, prefix, mode);
    f = residual_block(f, prefix + ".res1", mode);
    f = residual_block(f, prefix + ".res2", mode);
    f = ops::dropout(f, config_.dropout_rate, mode, mix_seed(dropout_seed, hash_string(prefix)));
    return EncoderOut{f, ops::maxpool2d(f, 2)};
}

Tensor Model::decoder_block(const Tensor& input, const Tensor& skip, const std::string& prefix,
                            Mode mode, std::uint64_t dropout_seed) {
    Tensor up = ops::upsample_nearest2d(input, 2);
    if (up.extent(2) != skip.extent(2) || up.extent(3) != skip.extent(3)) {
        reject(prefix + ": upsampled extents " + up.shape_string() +
               " do not match skip extents " + skip.shape_string());
    }
    Tensor f = conv_bn_elu(ops::concat_channels({up, skip}), prefix, mode);
    f = residual_block(f, prefix + ".res1", mode);
    f = residual_block(f, prefix + ".res2", mode);
    return ops::dropout(f, config_.dropout_rate, mode,
                        mix_seed(dropout_seed, hash_string(prefix)));
}

Tensor Model::channel_attention(const Tensor& fused) {
    if (!config_.use_attention) {
        reject("channel_attention: attention branch is disabled in this model");
    }
    auto mlp = [&](const Tensor& pooled) {
        Tensor x = ops::conv2d(pooled, param("attn.mlp1.weight"), param("attn.mlp1.bias"));
        x = ops::elu(x, config_.elu_alpha);
        return ops::conv2d(x, param("attn.mlp2.weight"), param("attn.mlp2.bias"));
    };
    Tensor avg = mlp(ops::global_pool(fused, ops::PoolKind::kAvg));
    Tensor mx = mlp(ops::global_pool(fused, ops::PoolKind::kMax));
    return ops::sigmoid(ops::add(avg, mx));
}

Tensor Model::spatial_attention(const Tensor& fused) {
    if (!config_.use_attention) {
        reject("spatial_attention: attention branch is disabled in this model");
    }
    Tensor stacked = ops::concat_channels({ops::channel_pool(fused, ops::ChannelPoolKind::kMean),
                                           ops::channel_pool(fused, ops::ChannelPoolKind::kMax)});
    return ops::sigmoid(
        ops::conv2d(stacked, param("attn.spatial.weight"), param("attn.spatial.bias")));
}

Tensor Model::cbam(const Tensor& fused) {
    Tensor refined = ops::mul(fused, channel_attention(fused));
    return ops::mul(refined, spatial_attention(refined));
}

Model::Outputs Model::forward(const Tensor& batch, Mode mode, std::uint64_t dropout_seed) {
    if (batch.rank() != 4) {
        reject("forward: expected rank-4 input, got shape " + batch.shape_string());
    }
    if (batch.extent(1) != config_.in_channels) {
        reject("forward: input has " + std::to_string(batch.extent(1)) +
               " channels, model expects " + std::to_string(config_.in_channels));
    }
    const int divisor = 1 << config_.depth;
    if (batch.extent(2) % divisor != 0 || batch.extent(3) % divisor != 0) {
        reject("forward: input extents " + std::to_string(batch.extent(2)) + "x" +
               std::to_string(batch.extent(3)) + " must be divisible by " +
               std::to_string(divisor));
    }

    Tensor x = coordconv_augment(batch);
    EncoderOut e1 = encoder_block(x, "enc1", mode, dropout_seed);
    EncoderOut e2 = encoder_block(e1.pooled, "enc2", mode, dropout_seed);
    EncoderOut e3 = encoder_block(e2.pooled, "enc3", mode, dropout_seed);
    EncoderOut e4 = encoder_block(e3.pooled, "enc4", mode, dropout_seed);

    Tensor bottom = conv_bn_elu(e4.pooled, "bottleneck", mode);
    bottom = residual_block(bottom, "bottleneck.res", mode);

    Tensor d1 = decoder_block(bottom, e4.features, "dec1", mode, dropout_seed);
    Tensor d2 = decoder_block(d1, e3.features, "dec2", mode, dropout_seed);
    Tensor d3 = decoder_block(d2, e2.features, "dec3", mode, dropout_seed);
    Tensor d4 = decoder_block(d3, e1.features, "dec4", mode, dropout_seed);

    // Supervision taps at quarter and half resolution, upsampled to full size.
    Tensor hv1_logits = ops::upsample_nearest2d(
        ops::conv2d(d2, param("hv1.conv.weight"), param("hv1.conv.bias")), 4);
    Tensor hv2_logits = ops::upsample_nearest2d(
        ops::conv2d(d3, param("hv2.conv.weight"), param("hv2.conv.bias")), 2);

    Tensor fused = ops::concat_channels({hv1_logits, hv2_logits, d4});
    if (config_.use_attention) {
        fused = ops::add(fused, cbam(fused));
    }
    Tensor final_logits = ops::conv2d(fused, param("head.conv.weight"), param("head.conv.bias"));

    Outputs out;
    out.hv1 = ops::softmax_channels(hv1_logits);
    out.hv2 = ops::softmax_channels(hv2_logits);
    out.final_ = ops::softmax_channels(final_logits);
    return out;
}

std::int64_t Model::parameter_count() const {
    std::int64_t total = 0;
    for (const auto& [name, tensor] : params_) {
        total += tensor.numel();
    }
    return total;
}

} // namespace hvnet
