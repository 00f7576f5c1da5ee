#include "maskgan/dmn/dmn.hpp"

#include <cmath>

namespace maskgan::dmn {

namespace o = ops;

namespace {

constexpr Real kSftSlope = Real(0.1);

Var in_relu(const Var& x) { return o::relu(o::instance_norm(x, nn::kNormEps)); }

void check_image_mask(const Var& image, const Var& onehot, const char* what) {
    const Shape& a = image.shape();
    const Shape& b = onehot.shape();
    if (a.c != 3 || a.n != b.n || a.h != b.h || a.w != b.w)
        throw ShapeError(std::string(what) + ": image " + a.str() + " and mask " + b.str() + " are not paired");
}

}  // namespace

FusionMode parse_fusion_mode(const std::string& name) {
    if (name == "sft") return FusionMode::Sft;
    if (name == "concat") return FusionMode::Concat;
    throw ArgumentError("fusion_mode must be 'sft' or 'concat', got '" + name + "'");
}

std::string fusion_mode_name(FusionMode mode) { return mode == FusionMode::Sft ? "sft" : "concat"; }

int DmnConfig::base_channels() const { return std::max(1, static_cast<int>(std::lround(64 * width_scale))); }
int DmnConfig::block_channels() const { return base_channels() << n_downsample; }
int DmnConfig::style_channels() const { return std::max(4, static_cast<int>(std::lround(128 * width_scale))); }

StyleParams StyleParams::detached() const {
    StyleParams out;
    for (const Var& v : scale) out.scale.push_back(detach(v));
    for (const Var& v : shift) out.shift.push_back(detach(v));
    return out;
}

StyleParams StyleParams::select(int n) const {
    const int idx[] = {n};
    StyleParams out;
    for (const Var& v : scale) out.scale.push_back(o::gather_batch(v, idx));
    for (const Var& v : shift) out.shift.push_back(o::gather_batch(v, idx));
    return out;
}

Var sft_modulate(const Var& features, const Var& gamma, const Var& beta) {
    require_same_shape(features.shape(), gamma.shape(), "sft_modulate gamma");
    require_same_shape(features.shape(), beta.shape(), "sft_modulate beta");
    return o::add(o::mul(gamma, features), beta);
}

Var adain(const Var& z, const Var& x, const Var& y, Real eps) {
    return o::channel_affine(o::instance_norm(z, eps), x, y);
}

SftLayer::SftLayer(int feat_ch, int cond_ch, FusionMode mode, Rng& rng) : mode_(mode) {
    if (mode == FusionMode::Sft) {
        gamma0_ = nn::Conv2d(cond_ch, cond_ch, 1, 1, 0, rng);
        gamma1_ = nn::Conv2d(cond_ch, feat_ch, 1, 1, 0, rng);
        beta0_ = nn::Conv2d(cond_ch, cond_ch, 1, 1, 0, rng);
        beta1_ = nn::Conv2d(cond_ch, feat_ch, 1, 1, 0, rng);
    } else {
        fuse_ = nn::Conv2d(feat_ch + cond_ch, feat_ch, 1, 1, 0, rng);
    }
}

Var SftLayer::operator()(const Var& features, const Var& condition) const {
    if (mode_ == FusionMode::Concat) {
        const Var parts[] = {features, condition};
        return fuse_(o::concat_channels(parts));
    }
    const Var gamma = o::add_scalar(gamma1_(o::leaky_relu(gamma0_(condition), kSftSlope)), Real(1));
    const Var beta = beta1_(o::leaky_relu(beta0_(condition), kSftSlope));
    return sft_modulate(features, gamma, beta);
}

void SftLayer::collect(nn::ParamSet& set, const std::string& prefix) const {
    if (mode_ == FusionMode::Concat) {
        fuse_.collect(set, prefix + ".fuse");
        return;
    }
    gamma0_.collect(set, prefix + ".gamma0");
    gamma1_.collect(set, prefix + ".gamma1");
    beta0_.collect(set, prefix + ".beta0");
    beta1_.collect(set, prefix + ".beta1");
}

namespace {
constexpr int kStyleStages = 3;
}

StyleEncoder::StyleEncoder(const DmnConfig& config, Rng& rng) : blocks_(config.residual_blocks) {
    const int s = config.style_channels();
    img_stem_ = nn::Conv2d(3, s, 3, 2, 1, rng);
    mask_stem_ = nn::Conv2d(config.categories, s, 3, 2, 1, rng);
    int ch = s;
    for (int k = 0; k < kStyleStages; ++k) {
        sft_.emplace_back(ch, ch, config.fusion, rng);
        img_down_.emplace_back(ch, ch * 2, 3, 2, 1, rng);
        mask_down_.emplace_back(ch, ch * 2, 3, 2, 1, rng);
        ch *= 2;
    }
    sft_.emplace_back(ch, ch, config.fusion, rng);
    for (int i = 0; i < blocks_; ++i) {
        scale_heads_.emplace_back(ch, config.block_channels(), rng);
        shift_heads_.emplace_back(ch, config.block_channels(), rng);
    }
}

StyleParams StyleEncoder::operator()(const Var& image, const Var& onehot) const {
    check_image_mask(image, onehot, "style_encode");
    Var f = o::relu(img_stem_(image));
    Var psi = o::relu(mask_stem_(onehot));
    for (int k = 0; k < kStyleStages; ++k) {
        f = sft_[k](f, psi);
        f = o::relu(img_down_[k](f));
        psi = o::relu(mask_down_[k](psi));
    }
    f = sft_[kStyleStages](f, psi);
    const Var h = o::global_avg_pool(f);
    StyleParams out;
    for (int i = 0; i < blocks_; ++i) {
        out.scale.push_back(o::add_scalar(scale_heads_[i](h), Real(1)));
        out.shift.push_back(shift_heads_[i](h));
    }
    return out;
}

void StyleEncoder::collect(nn::ParamSet& set, const std::string& prefix) const {
    img_stem_.collect(set, prefix + ".img_stem");
    mask_stem_.collect(set, prefix + ".mask_stem");
    for (std::size_t k = 0; k < sft_.size(); ++k) sft_[k].collect(set, prefix + ".sft" + std::to_string(k));
    for (std::size_t k = 0; k < img_down_.size(); ++k) {
        img_down_[k].collect(set, prefix + ".img_down" + std::to_string(k));
        mask_down_[k].collect(set, prefix + ".mask_down" + std::to_string(k));
    }
    for (std::size_t i = 0; i < scale_heads_.size(); ++i) {
        scale_heads_[i].collect(set, prefix + ".scale_head" + std::to_string(i));
        shift_heads_[i].collect(set, prefix + ".shift_head" + std::to_string(i));
    }
}

Generator::Generator(const DmnConfig& config, Rng& rng) {
    const int g = config.base_channels();
    stem_ = nn::Conv2d(config.categories, g, 7, 1, 3, rng);
    int ch = g;
    for (int k = 0; k < config.n_downsample; ++k) {
        down_.emplace_back(ch, ch * 2, 3, 2, 1, rng);
        ch *= 2;
    }
    for (int i = 0; i < config.residual_blocks; ++i) {
        res_a_.emplace_back(ch, ch, 3, 1, 1, rng);
        res_b_.emplace_back(ch, ch, 3, 1, 1, rng);
    }
    for (int k = 0; k < config.n_downsample; ++k) {
        up_.emplace_back(ch, ch / 2, 3, 2, 1, 1, rng);
        ch /= 2;
    }
    out_ = nn::Conv2d(ch, 3, 7, 1, 3, rng);
}

Var Generator::operator()(const StyleParams& style, const Var& onehot) const {
    if (style.blocks() != static_cast<int>(res_a_.size()))
        throw ShapeError("generate: " + std::to_string(style.blocks()) + " style pairs for " +
                         std::to_string(res_a_.size()) + " residual blocks");
    Var h = in_relu(stem_(onehot));
    for (const auto& d : down_) h = in_relu(d(h));
    for (std::size_t i = 0; i < res_a_.size(); ++i) {
        if (style.scale[i].shape().n != h.shape().n || style.scale[i].shape().c != h.shape().c)
            throw ShapeError("generate: style " + style.scale[i].shape().str() + " does not match features " +
                             h.shape().str());
        const Var r = in_relu(res_a_[i](h));
        h = o::add(h, adain(res_b_[i](r), style.scale[i], style.shift[i]));
    }
    for (const auto& u : up_) h = o::relu(u(h));
    return o::tanh(out_(h));
}

void Generator::collect(nn::ParamSet& set, const std::string& prefix) const {
    stem_.collect(set, prefix + ".stem");
    for (std::size_t k = 0; k < down_.size(); ++k) down_[k].collect(set, prefix + ".down" + std::to_string(k));
    for (std::size_t i = 0; i < res_a_.size(); ++i) {
        res_a_[i].collect(set, prefix + ".res" + std::to_string(i) + ".a");
        res_b_[i].collect(set, prefix + ".res" + std::to_string(i) + ".b");
    }
    for (std::size_t k = 0; k < up_.size(); ++k) up_[k].collect(set, prefix + ".up" + std::to_string(k));
    out_.collect(set, prefix + ".out");
}

DenseMappingNetwork::DenseMappingNetwork(const DmnConfig& config, Rng& rng) : config_(config) {
    const int R = config.resolution;
    if (config.n_downsample < 1 || R % (1 << config.n_downsample) != 0 || R % (1 << (kStyleStages + 1)) != 0)
        throw ArgumentError("resolution " + std::to_string(R) + " is not divisible by 2^" +
                            std::to_string(std::max(config.n_downsample, kStyleStages + 1)));
    if (config.residual_blocks < 1) throw ArgumentError("residual_blocks must be >= 1");
    if (config.width_scale <= 0) throw ArgumentError("width_scale must be > 0");
    encoder_ = StyleEncoder(config, rng);
    generator_ = Generator(config, rng);
}

StyleParams DenseMappingNetwork::style(const Var& image, const Var& onehot) const {
    if (onehot.shape().c != config_.categories)
        throw ShapeError("style_encode: mask has " + std::to_string(onehot.shape().c) + " channels, model expects " +
                         std::to_string(config_.categories));
    return encoder_(image, onehot);
}

Var DenseMappingNetwork::generate(const StyleParams& style, const Var& onehot) const {
    const Shape& s = onehot.shape();
    if (s.c != config_.categories || s.h != config_.resolution || s.w != config_.resolution)
        throw ShapeError("generate: mask " + s.str() + " does not match the model (C=" +
                         std::to_string(config_.categories) + ", R=" + std::to_string(config_.resolution) + ")");
    return generator_(style, onehot);
}

Var DenseMappingNetwork::reconstruct(const Var& image, const Var& onehot) const {
    return generate(style(image, onehot), onehot);
}

nn::ParamSet DenseMappingNetwork::params() const {
    nn::ParamSet set;
    encoder_.collect(set, "style");
    generator_.collect(set, "gen");
    return set;
}

AlphaBlender::AlphaBlender(const BlenderConfig& config, Rng& rng) {
    const int b = config.base_channels;
    stem_ = nn::Conv2d(6, b, 7, 1, 3, rng);
    int ch = b;
    for (int k = 0; k < config.n_downsample; ++k) {
        down_.emplace_back(ch, ch * 2, 3, 2, 1, rng);
        ch *= 2;
    }
    for (int i = 0; i < config.residual_blocks; ++i) {
        res_a_.emplace_back(ch, ch, 3, 1, 1, rng);
        res_b_.emplace_back(ch, ch, 3, 1, 1, rng);
    }
    for (int k = 0; k < config.n_downsample; ++k) {
        up_.emplace_back(ch, ch / 2, 3, 2, 1, 1, rng);
        ch /= 2;
    }
    out_ = nn::Conv2d(ch, 1, 7, 1, 3, rng);
}

Var AlphaBlender::alpha(const Var& inter, const Var& outer) const {
    require_same_shape(inter.shape(), outer.shape(), "alpha_blend");
    const Var parts[] = {inter, outer};
    Var h = in_relu(stem_(o::concat_channels(parts)));
    for (const auto& d : down_) h = in_relu(d(h));
    for (std::size_t i = 0; i < res_a_.size(); ++i) {
        Var r = in_relu(res_a_[i](h));
        r = o::instance_norm(res_b_[i](r), nn::kNormEps);
        h = o::add(h, r);
    }
    for (const auto& u : up_) h = in_relu(u(h));
    return o::sigmoid(out_(h));
}

nn::ParamSet AlphaBlender::params() const {
    nn::ParamSet set;
    stem_.collect(set, "blend.stem");
    for (std::size_t k = 0; k < down_.size(); ++k) down_[k].collect(set, "blend.down" + std::to_string(k));
    for (std::size_t i = 0; i < res_a_.size(); ++i) {
        res_a_[i].collect(set, "blend.res" + std::to_string(i) + ".a");
        res_b_[i].collect(set, "blend.res" + std::to_string(i) + ".b");
    }
    for (std::size_t k = 0; k < up_.size(); ++k) up_[k].collect(set, "blend.up" + std::to_string(k));
    out_.collect(set, "blend.out");
    return set;
}

BlendResult alpha_blend(const AlphaBlender& blender, const Var& inter, const Var& outer) {
    const Var alpha = blender.alpha(inter, outer);
    return BlendResult{o::alpha_blend(alpha, inter, outer), alpha};
}

}  // namespace maskgan::dmn
