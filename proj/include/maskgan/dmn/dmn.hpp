#pragma once

#include <string>
#include <vector>

#include "maskgan/core/autograd.hpp"
#include "maskgan/core/nn.hpp"
#include "maskgan/core/rng.hpp"

namespace maskgan::dmn {

enum class FusionMode { Sft, Concat };

FusionMode parse_fusion_mode(const std::string& name);
std::string fusion_mode_name(FusionMode mode);

struct DmnConfig {
    int resolution = 64;
    int categories = 19;
    double width_scale = 0.125;  // backbone starts at round(64 * width_scale) channels
    int residual_blocks = 4;
    int n_downsample = 3;
    FusionMode fusion = FusionMode::Sft;

    int base_channels() const;
    /// Channel width of the residual blocks.
    int block_channels() const;
    /// Style encoder stem width.
    int style_channels() const;
};

/// Per-residual-block AdaIN parameters, each (N, block_channels, 1, 1).
struct StyleParams {
    std::vector<Var> scale;  // x_i
    std::vector<Var> shift;  // y_i
    int blocks() const { return static_cast<int>(scale.size()); }
    StyleParams detached() const;
    /// Sample n of every entry (used to cache one session's style).
    StyleParams select(int n) const;
};

/// gamma * features + beta, all of identical shape.
Var sft_modulate(const Var& features, const Var& gamma, const Var& beta);

/// x * (z - mean(z)) / sqrt(var(z) + eps) + y per sample and channel; x and y
/// are (N, C, 1, 1).
Var adain(const Var& z, const Var& x, const Var& y, Real eps = Real(1e-5));

/// Predicts (gamma, beta) from condition features with two 1x1 conv stacks
/// (no normalization) and modulates the image features. In concat mode a 1x1
/// conv over the channel concatenation takes its place.
class SftLayer {
public:
    SftLayer() = default;
    SftLayer(int feat_ch, int cond_ch, FusionMode mode, Rng& rng);
    Var operator()(const Var& features, const Var& condition) const;
    void collect(nn::ParamSet& set, const std::string& prefix) const;

private:
    FusionMode mode_ = FusionMode::Sft;
    nn::Conv2d gamma0_, gamma1_, beta0_, beta1_;
    nn::Conv2d fuse_;
};

/// Two-branch spatial-aware style encoder: the mask branch provides the
/// prior features that modulate the image branch at every stage. Both stems
/// stride by 2, then three stride-2 stages. No normalization layers.
class StyleEncoder {
public:
    StyleEncoder() = default;
    StyleEncoder(const DmnConfig& config, Rng& rng);
    StyleParams operator()(const Var& image, const Var& onehot) const;
    void collect(nn::ParamSet& set, const std::string& prefix) const;

private:
    int blocks_ = 0;
    nn::Conv2d img_stem_, mask_stem_;
    std::vector<SftLayer> sft_;
    std::vector<nn::Conv2d> img_down_, mask_down_;
    std::vector<nn::Linear> scale_heads_, shift_heads_;
};

/// Global-generator backbone: c7s1 stem and strided downsampling with
/// instance norm, residual blocks conv-IN-relu-conv-AdaIN, transposed-conv
/// upsampling with relu and no normalization, c7s1 tanh output.
class Generator {
public:
    Generator() = default;
    Generator(const DmnConfig& config, Rng& rng);
    Var operator()(const StyleParams& style, const Var& onehot) const;
    void collect(nn::ParamSet& set, const std::string& prefix) const;

private:
    nn::Conv2d stem_;
    std::vector<nn::Conv2d> down_;
    std::vector<nn::Conv2d> res_a_, res_b_;
    std::vector<nn::ConvTranspose2d> up_;
    nn::Conv2d out_;
};

/// G_A: style encoder plus generator.
class DenseMappingNetwork {
public:
    DenseMappingNetwork() = default;
    DenseMappingNetwork(const DmnConfig& config, Rng& rng);

    StyleParams style(const Var& image, const Var& onehot) const;
    Var generate(const StyleParams& style, const Var& onehot) const;
    /// generate(style(image, mask), mask)
    Var reconstruct(const Var& image, const Var& onehot) const;

    nn::ParamSet params() const;
    const DmnConfig& config() const { return config_; }

private:
    DmnConfig config_;
    StyleEncoder encoder_;
    Generator generator_;
};

struct BlenderConfig {
    int base_channels = 4;
    int n_downsample = 3;
    int residual_blocks = 3;
};

/// Predicts a per-pixel alpha in (0, 1) from the two perturbed generations.
class AlphaBlender {
public:
    AlphaBlender() = default;
    AlphaBlender(const BlenderConfig& config, Rng& rng);
    /// (N, 1, H, W) alpha map.
    Var alpha(const Var& inter, const Var& outer) const;
    nn::ParamSet params() const;

private:
    nn::Conv2d stem_;
    std::vector<nn::Conv2d> down_;
    std::vector<nn::Conv2d> res_a_, res_b_;
    std::vector<nn::ConvTranspose2d> up_;
    nn::Conv2d out_;
};

struct BlendResult {
    Var blend;  // alpha * inter + (1 - alpha) * outer
    Var alpha;
};

BlendResult alpha_blend(const AlphaBlender& blender, const Var& inter, const Var& outer);

}  // namespace maskgan::dmn
