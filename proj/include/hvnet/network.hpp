#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "hvnet/ops.hpp"
#include "hvnet/tensor.hpp"

namespace hvnet {

struct ModelConfig {
    int in_channels = 1;
    int num_classes = 3;  // fixed by the mask format
    int base_channels = 16;
    int depth = 4;        // fixed; widths run base * 2^s for s = 0..3
    double dropout_rate = 0.1;
    bool use_attention = true;
    // Channel-attention bottleneck divisor. Must divide the fused channel
    // count base_channels + 6, which rules out 8 for every default width;
    // 2 divides all of them.
    int attention_reduction = 2;
    int spatial_attention_kernel = 7;
    double elu_alpha = 1.0;
    std::uint64_t init_seed = 1;
};

// Throws std::invalid_argument naming the violated constraint.
void validate(const ModelConfig& config);

// Appends two coordinate channels (row index, then column index), each
// normalized to [-1, 1] (0 when the extent is 1). The coordinate channels
// carry no gradient back to the input.
Tensor coordconv_augment(const Tensor& input);

class Model {
public:
    // Builds all parameters deterministically from (config, init_seed):
    // He fan-in normal for conv kernels, zero biases, BN gamma=1 / beta=0,
    // running mean 0 / var 1. Each parameter is drawn from its own stream
    // seeded by the parameter name, so the set of trunk values does not
    // depend on whether the attention branch exists.
    explicit Model(const ModelConfig& config);

    struct Outputs {
        Tensor hv1;    // quarter-resolution head, upsampled to full size
        Tensor hv2;    // half-resolution head, upsampled to full size
        Tensor final_; // fused head
    };

    // batch is (B, in_channels, H, W) with H and W divisible by 16.
    // dropout_seed pins the dropout masks of one training step; unused in
    // eval mode.
    Outputs forward(const Tensor& batch, Mode mode, std::uint64_t dropout_seed = 0);

    // Building blocks, addressed by parameter prefix ("enc1", "enc1.res1",
    // "dec3", ...). Exposed so each stage is verifiable in isolation.
    Tensor residual_block(const Tensor& input, const std::string& prefix, Mode mode);
    struct EncoderOut {
        Tensor features; // skip-connection tap
        Tensor pooled;
    };
    EncoderOut encoder_block(const Tensor& input, const std::string& prefix, Mode mode,
                             std::uint64_t dropout_seed = 0);
    Tensor decoder_block(const Tensor& input, const Tensor& skip, const std::string& prefix,
                         Mode mode, std::uint64_t dropout_seed = 0);

    // Attention branch on the fused map: F' = Mc(F) (x) F, out = Ms(F') (x) F'.
    // Exposed for direct verification.
    Tensor cbam(const Tensor& fused);
    Tensor channel_attention(const Tensor& fused);
    Tensor spatial_attention(const Tensor& fused);

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    // Batch-norm running statistics, serialized alongside parameters.
    std::map<std::string, Tensor>& buffers() { return buffers_; }
    const std::map<std::string, Tensor>& buffers() const { return buffers_; }
    const ModelConfig& config() const { return config_; }

    std::int64_t parameter_count() const;

private:
    Tensor& param(const std::string& name);
    ops::BatchNormState bn_state(const std::string& prefix);
    Tensor conv_bn_elu(const Tensor& input, const std::string& prefix, Mode mode);

    ModelConfig config_;
    std::map<std::string, Tensor> params_;
    std::map<std::string, Tensor> buffers_;
};

} // namespace hvnet
