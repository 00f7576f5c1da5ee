#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maskgan/core/autograd.hpp"
#include "maskgan/core/nn.hpp"
#include "maskgan/core/rng.hpp"
#include "maskgan/mask/mask.hpp"

namespace maskgan::vae {

enum class KlConvention {
    Paper,     // 1/2 (sum mu^2 + sum(exp(s) - s - 1))
    Standard,  // s as log-std: 1/2 sum(mu^2 + exp(2s) - 2s - 1)
};

KlConvention parse_kl_convention(const std::string& name);
std::string kl_convention_name(KlConvention kl);

struct VaeConfig {
    int resolution = 64;
    int categories = 19;
    int latent_dim = 64;
    int base_channels = 16;
    int max_channels = 256;
};

/// (N, D, 1, 1) each. z is empty until reparameterize() fills it.
struct LatentCode {
    Var mu, log_sigma, z;
};

/// Mirror-shaped conv encoder / transposed-conv decoder with batch norm on
/// every hidden layer and no skip connections. The encoder halves the
/// resolution down to a 4x4 bottleneck (1x1 for resolutions below 8).
class MaskVae {
public:
    MaskVae(const VaeConfig& config, Rng& rng);
    MaskVae(MaskVae&&) = default;
    MaskVae& operator=(MaskVae&&) = default;
    MaskVae(const MaskVae&) = delete;
    MaskVae& operator=(const MaskVae&) = delete;

    /// onehot (N, C, R, R) -> mu, log_sigma.
    LatentCode encode(const Var& onehot, bool training);
    /// z (N, D, 1, 1) -> logits (N, C, R, R).
    Var decode(const Var& z, bool training);

    nn::ParamSet params();
    const VaeConfig& config() const { return config_; }
    int downsamples() const { return static_cast<int>(enc_.size()); }
    int bottleneck() const { return bottleneck_; }

    /// Independent copy with the same weights and running statistics.
    MaskVae clone();

private:
    VaeConfig config_;
    int bottleneck_ = 4;
    int top_channels_ = 0;
    std::vector<nn::Conv2d> enc_;
    std::vector<nn::BatchNorm2d> enc_bn_;
    nn::Linear to_mu_, to_log_sigma_, from_z_;
    nn::BatchNorm2d dec_in_bn_;
    std::vector<nn::ConvTranspose2d> dec_;
    std::vector<nn::BatchNorm2d> dec_bn_;
    nn::Conv2d to_logits_;
};

/// z = mu + r * exp(log_sigma), r ~ N(0, I) from rng. Differentiable in mu
/// and log_sigma.
Var reparameterize(const LatentCode& code, Rng& rng);

/// Batch-averaged KL term.
Var kl_loss(const LatentCode& code, KlConvention convention = KlConvention::Paper);

/// Mean per-pixel categorical cross-entropy against label masks.
Var reconstruction_loss(const Var& logits, std::span<const LabelMask> targets);

/// Per-pixel softmax over channels (no autograd).
Tensor softmax_channels(const Tensor& logits);

struct VaeLoss {
    Var total, reconstruction, kl;
};

/// reconstruction + lambda_kl * KL on a batch, sampling z with rng.
VaeLoss vae_total_loss(MaskVae& vae, const Tensor& onehot, std::span<const LabelMask> masks, double lambda_kl,
                       KlConvention convention, Rng& rng, bool training = true);

/// z_t +/- (z_ref - z_t) / lambda_inter.
std::pair<Tensor, Tensor> traverse_latent(const Tensor& z_t, const Tensor& z_ref, double lambda_inter);

/// Hardened decodes of a batch of latents (eval mode, no autograd).
std::vector<LabelMask> decode_labels(MaskVae& vae, const Tensor& z);
/// Posterior means (eval mode, no autograd).
Tensor encode_mu(MaskVae& vae, const Tensor& onehot);

struct Traversal {
    std::vector<LabelMask> inter, outer;
};

/// Batched traversal with mu as z_t and z_ref.
Traversal latent_traverse(MaskVae& vae, const Tensor& onehot_t, const Tensor& onehot_ref, double lambda_inter);
/// Single-pair form.
std::pair<LabelMask, LabelMask> latent_traverse(MaskVae& vae, const LabelMask& m_t, const LabelMask& m_ref,
                                                double lambda_inter);

/// Decodes z_t + (k / steps) (z_ref - z_t) for k = 0..steps.
std::vector<LabelMask> interpolate(MaskVae& vae, const LabelMask& m_t, const LabelMask& m_ref, int steps);

/// Pixel accuracy of hardened eval-mode reconstructions (decode(mu)).
double reconstruction_accuracy(MaskVae& vae, std::span<const LabelMask> masks, int batch_size = 32);

}  // namespace maskgan::vae
