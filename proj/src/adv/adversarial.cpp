#include "maskgan/adv/adversarial.hpp"

#include <cmath>
#include <exception>

#include "maskgan/core/checkpoint.hpp"
#include "maskgan/core/log.hpp"

namespace maskgan::adv {

namespace o = ops;

namespace {

constexpr Real kSlope = Real(0.2);

}  // namespace

GanLoss parse_gan_loss(const std::string& name) {
    if (name == "lsgan") return GanLoss::Lsgan;
    if (name == "bce") return GanLoss::Bce;
    throw ArgumentError("gan_loss must be 'lsgan' or 'bce', got '" + name + "'");
}

std::string gan_loss_name(GanLoss loss) { return loss == GanLoss::Lsgan ? "lsgan" : "bce"; }

PatchDiscriminator::PatchDiscriminator(const DiscConfig& config, Rng& rng) {
    int in = config.in_channels;
    int out = config.base_channels;
    for (int i = 0; i < kHiddenLayers; ++i) {
        const int stride = i < kHiddenLayers - 1 ? 2 : 1;
        layers_.emplace_back(in, out, 4, stride, 2, rng);
        in = out;
        out *= 2;
    }
    head_ = nn::Conv2d(in, 1, 4, 1, 2, rng);
}

DiscOutput PatchDiscriminator::operator()(const Var& input) const {
    DiscOutput out;
    Var h = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i](h);
        if (i > 0) h = o::instance_norm(h, nn::kNormEps);
        h = o::leaky_relu(h, kSlope);
        out.features.push_back(h);
    }
    out.score = head_(h);
    return out;
}

void PatchDiscriminator::collect(nn::ParamSet& set, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(set, prefix + ".conv" + std::to_string(i));
    head_.collect(set, prefix + ".head");
}

DiscriminatorSet::DiscriminatorSet(const DiscConfig& config, Rng& rng)
    : config_(config), d1_(config, rng), d2_(config, rng) {}

MultiScaleOutput DiscriminatorSet::operator()(const Var& image, const Var& onehot) const {
    const Shape& a = image.shape();
    const Shape& b = onehot.shape();
    if (a.n != b.n || a.h != b.h || a.w != b.w || a.c + b.c != config_.in_channels)
        throw ShapeError("discriminator: image " + a.str() + " and mask " + b.str() + " do not form a " +
                         std::to_string(config_.in_channels) + "-channel pair");
    const Var parts[] = {image, onehot};
    const Var input = o::concat_channels(parts);
    return {d1_(input), d2_(o::avg_pool2(input))};
}

nn::ParamSet DiscriminatorSet::params() const {
    nn::ParamSet set;
    d1_.collect(set, "d1");
    d2_.collect(set, "d2");
    return set;
}

Var discriminator_loss(const MultiScaleOutput& real, const MultiScaleOutput& fake, GanLoss loss) {
    Var total;
    for (std::size_t s = 0; s < real.size(); ++s) {
        Var term;
        if (loss == GanLoss::Lsgan)
            term = o::scale(o::add(o::mean_sq_to(real[s].score, 1), o::mean_sq_to(fake[s].score, 0)), Real(0.5));
        else
            term = o::add(o::bce_with_logits_to(real[s].score, 1), o::bce_with_logits_to(fake[s].score, 0));
        total = total ? o::add(total, term) : term;
    }
    return total;
}

Var generator_adv_loss(const MultiScaleOutput& fake, GanLoss loss) {
    Var total;
    for (const DiscOutput& d : fake) {
        const Var term = loss == GanLoss::Lsgan ? o::scale(o::mean_sq_to(d.score, 1), Real(0.5))
                                                : o::bce_with_logits_to(d.score, 1);
        total = total ? o::add(total, term) : term;
    }
    return total;
}

Var feature_matching_loss(const std::vector<Var>& real, const std::vector<Var>& fake) {
    if (real.size() != fake.size() || real.empty())
        throw ShapeError("feature_matching_loss: feature lists differ in length");
    Var total;
    for (std::size_t i = 0; i < real.size(); ++i) {
        const Var term = o::mean_abs_diff(detach(real[i]), fake[i]);
        total = total ? o::add(total, term) : term;
    }
    return total;
}

Var feature_matching_loss(const MultiScaleOutput& real, const MultiScaleOutput& fake) {
    return o::add(feature_matching_loss(real[0].features, fake[0].features),
                  feature_matching_loss(real[1].features, fake[1].features));
}

PerceptualExtractor PerceptualExtractor::random(std::uint64_t seed) {
    Rng rng(seed);
    PerceptualExtractor ex;
    const int widths[kTaps] = {16, 32, 64, 64, 64};
    int in = 3;
    for (int i = 0; i < kTaps; ++i) {
        nn::Conv2d conv(in, widths[i], 3, i == 0 ? 1 : 2, 1, rng);
        // He-uniform range so activations keep their scale through the stack
        for (Real& v : conv.weight_.mutable_value().storage()) v *= static_cast<Real>(std::sqrt(6.0));
        for (Real& v : conv.bias_.mutable_value().storage()) v = 0;
        conv.weight_.set_requires_grad(false);
        conv.bias_.set_requires_grad(false);
        ex.layers_.push_back(conv);
        in = widths[i];
    }
    return ex;
}

PerceptualExtractor PerceptualExtractor::identity() { return PerceptualExtractor(); }

PerceptualExtractor PerceptualExtractor::load(const std::filesystem::path& path, bool allow_fallback) {
    try {
        const Checkpoint ckpt = Checkpoint::load(path);
        PerceptualExtractor ex = random();
        ex.params().restore(ckpt.with_prefix("percept."));
        return ex;
    } catch (const std::exception& e) {
        if (!allow_fallback) throw;
        log::warn("perceptual weights unavailable (" + std::string(e.what()) +
                  "); falling back to the identity tap (pixel L1)");
        return identity();
    }
}

std::vector<Var> PerceptualExtractor::taps(const Var& image) const {
    if (image.shape().c != 3) throw ShapeError("perceptual extractor expects 3-channel images, got " + image.shape().str());
    if (is_identity()) return {image};
    static constexpr double kMean[3] = {0.485, 0.456, 0.406};
    static constexpr double kStd[3] = {0.229, 0.224, 0.225};
    const int n = image.shape().n;
    Tensor scale(Shape{n, 3, 1, 1}), shift(Shape{n, 3, 1, 1});
    for (int s = 0; s < n; ++s)
        for (int c = 0; c < 3; ++c) {
            // ((x + 1) / 2 - mean) / std
            scale.at(s, c, 0, 0) = static_cast<Real>(0.5 / kStd[c]);
            shift.at(s, c, 0, 0) = static_cast<Real>((0.5 - kMean[c]) / kStd[c]);
        }
    Var h = o::channel_affine(image, Var::leaf(std::move(scale)), Var::leaf(std::move(shift)));
    std::vector<Var> out;
    for (const nn::Conv2d& conv : layers_) {
        h = o::relu(conv(h));
        out.push_back(h);
    }
    return out;
}

nn::ParamSet PerceptualExtractor::params() const {
    nn::ParamSet set;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(set, "conv" + std::to_string(i));
    return set;
}

Var perceptual_loss(const PerceptualExtractor& extractor, const Var& target, const Var& output) {
    require_same_shape(target.shape(), output.shape(), "perceptual_loss");
    std::vector<Var> t;
    {
        NoGradGuard ng;
        t = extractor.taps(target);
    }
    return feature_matching_loss(t, extractor.taps(output));
}

GeneratorLoss combine_generator_loss(const Var& adv, const Var& feat, const Var& percept, const LossWeights& weights) {
    GeneratorLoss out{Var(), adv, feat, percept};
    out.total = o::add(adv, o::add(o::scale(feat, static_cast<Real>(weights.lambda_feat)),
                                   o::scale(percept, static_cast<Real>(weights.lambda_percept))));
    return out;
}

GeneratorLoss total_generator_loss(const DiscriminatorSet& ds, const PerceptualExtractor& extractor,
                                   const Var& target, const Var& output, const Var& onehot, GanLoss loss,
                                   const LossWeights& weights) {
    MultiScaleOutput real;
    {
        NoGradGuard ng;
        real = ds(target, onehot);
    }
    const MultiScaleOutput fake = ds(output, onehot);
    return combine_generator_loss(generator_adv_loss(fake, loss), feature_matching_loss(real, fake),
                                  perceptual_loss(extractor, target, output), weights);
}

}  // namespace maskgan::adv
