#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "maskgan/core/autograd.hpp"
#include "maskgan/core/nn.hpp"
#include "maskgan/core/rng.hpp"

namespace maskgan::adv {

enum class GanLoss {
    Lsgan,  // least squares
    Bce,    // non-saturating cross-entropy
};

GanLoss parse_gan_loss(const std::string& name);
std::string gan_loss_name(GanLoss loss);

struct DiscConfig {
    int in_channels = 3 + 19;  // image + one-hot mask
    int base_channels = 8;
};

struct DiscOutput {
    std::vector<Var> features;  // hidden conv layer activations, shallow to deep
    Var score;                  // (N, 1, h, w) patch logits
};

/// c(b) without norm, c(2b), c(4b) stride 2 and c(8b) stride 1 with instance
/// norm, all k4 p2 leaky 0.2, then a k4 s1 conv to one channel.
class PatchDiscriminator {
public:
    static constexpr int kHiddenLayers = 4;

    PatchDiscriminator() = default;
    PatchDiscriminator(const DiscConfig& config, Rng& rng);
    DiscOutput operator()(const Var& input) const;
    void collect(nn::ParamSet& set, const std::string& prefix) const;

private:
    std::vector<nn::Conv2d> layers_;
    nn::Conv2d head_;
};

using MultiScaleOutput = std::array<DiscOutput, 2>;

/// D1 on the full-resolution (image, mask) pair, D2 on its 2x average-pooled
/// copy.
class DiscriminatorSet {
public:
    DiscriminatorSet() = default;
    DiscriminatorSet(const DiscConfig& config, Rng& rng);
    MultiScaleOutput operator()(const Var& image, const Var& onehot) const;
    nn::ParamSet params() const;
    const DiscConfig& config() const { return config_; }

private:
    DiscConfig config_;
    PatchDiscriminator d1_, d2_;
};

/// Summed over scales. LSGAN: 1/2 E[(D(real) - 1)^2] + 1/2 E[D(fake)^2].
Var discriminator_loss(const MultiScaleOutput& real, const MultiScaleOutput& fake, GanLoss loss);
/// Summed over scales. LSGAN: 1/2 E[(D(fake) - 1)^2].
Var generator_adv_loss(const MultiScaleOutput& fake, GanLoss loss);
/// Sum over scales and hidden layers of mean |D(real) - D(fake)|; real
/// features are treated as constants.
Var feature_matching_loss(const MultiScaleOutput& real, const MultiScaleOutput& fake);
/// Same sum for plain per-layer feature lists.
Var feature_matching_loss(const std::vector<Var>& real, const std::vector<Var>& fake);

/// Frozen feature stack for the perceptual loss. Inputs in [-1, 1] are mapped
/// to [0, 1] and standardized with the ImageNet channel statistics before the
/// first conv.
class PerceptualExtractor {
public:
    static constexpr int kTaps = 5;

    /// Seed-pinned random conv stack (3x3 convs, relu, 5 taps).
    static PerceptualExtractor random(std::uint64_t seed = 0x5eed);
    /// Pixel-space stand-in: a single tap equal to the input.
    static PerceptualExtractor identity();
    /// Random stack with weights read from a checkpoint ("percept.*"). When the
    /// file is missing or incompatible, falls back to identity() with a
    /// warning if allow_fallback, otherwise throws.
    static PerceptualExtractor load(const std::filesystem::path& path, bool allow_fallback = true);

    std::vector<Var> taps(const Var& image) const;
    bool is_identity() const { return layers_.empty(); }
    int tap_count() const { return is_identity() ? 1 : kTaps; }
    nn::ParamSet params() const;

private:
    std::vector<nn::Conv2d> layers_;
};

/// Sum over taps of mean |phi_i(target) - phi_i(output)|.
Var perceptual_loss(const PerceptualExtractor& extractor, const Var& target, const Var& output);

struct LossWeights {
    double lambda_feat = 10.0;
    double lambda_percept = 10.0;
};

struct GeneratorLoss {
    Var total, adv, feat, percept;
};

/// adv + lambda_feat * feat + lambda_percept * percept.
GeneratorLoss combine_generator_loss(const Var& adv, const Var& feat, const Var& percept, const LossWeights& weights);

/// Runs the discriminators on (target, mask) and (output, mask) and combines
/// all three generator terms.
GeneratorLoss total_generator_loss(const DiscriminatorSet& ds, const PerceptualExtractor& extractor,
                                   const Var& target, const Var& output, const Var& onehot, GanLoss loss,
                                   const LossWeights& weights);

}  // namespace maskgan::adv
