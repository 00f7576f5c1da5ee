#include "maskgan/vae/maskvae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace maskgan::vae {

namespace o = ops;

KlConvention parse_kl_convention(const std::string& name) {
    if (name == "paper") return KlConvention::Paper;
    if (name == "standard") return KlConvention::Standard;
    throw ArgumentError("kl_convention must be 'paper' or 'standard', got '" + name + "'");
}

std::string kl_convention_name(KlConvention kl) { return kl == KlConvention::Paper ? "paper" : "standard"; }

MaskVae::MaskVae(const VaeConfig& config, Rng& rng) : config_(config) {
    const int R = config.resolution;
    if (R < 4 || !std::has_single_bit(static_cast<unsigned>(R)))
        throw ArgumentError("MaskVAE resolution must be a power of two >= 4, got " + std::to_string(R));
    if (config.latent_dim < 1 || config.categories < 2) throw ArgumentError("invalid MaskVAE config");
    bottleneck_ = R >= 8 ? 4 : 1;
    const int n_down = std::bit_width(static_cast<unsigned>(R / bottleneck_)) - 1;

    std::vector<int> widths;
    int in = config.categories;
    for (int i = 0; i < n_down; ++i) {
        const int out = std::min(config.max_channels, config.base_channels << i);
        enc_.emplace_back(in, out, 4, 2, 1, rng);
        enc_bn_.emplace_back(out);
        widths.push_back(out);
        in = out;
    }
    top_channels_ = in;
    const int flat = top_channels_ * bottleneck_ * bottleneck_;
    to_mu_ = nn::Linear(flat, config.latent_dim, rng);
    to_log_sigma_ = nn::Linear(flat, config.latent_dim, rng);
    from_z_ = nn::Linear(config.latent_dim, flat, rng);
    dec_in_bn_ = nn::BatchNorm2d(top_channels_);
    for (int i = n_down - 1; i >= 0; --i) {
        const int out = i > 0 ? widths[i - 1] : std::max(1, config.base_channels / 2);
        dec_.emplace_back(in, out, 4, 2, 1, 0, rng);
        dec_bn_.emplace_back(out);
        in = out;
    }
    to_logits_ = nn::Conv2d(in, config.categories, 3, 1, 1, rng);
}

LatentCode MaskVae::encode(const Var& onehot, bool training) {
    const Shape& s = onehot.shape();
    if (s.c != config_.categories || s.h != config_.resolution || s.w != config_.resolution)
        throw ShapeError("MaskVAE expects (N, " + std::to_string(config_.categories) + ", " +
                         std::to_string(config_.resolution) + ", " + std::to_string(config_.resolution) + "), got " +
                         s.str());
    Var h = onehot;
    for (std::size_t i = 0; i < enc_.size(); ++i) h = o::leaky_relu(enc_bn_[i](enc_[i](h), training), Real(0.2));
    h = o::reshape(h, Shape{s.n, top_channels_ * bottleneck_ * bottleneck_, 1, 1});
    return LatentCode{to_mu_(h), to_log_sigma_(h), Var()};
}

Var MaskVae::decode(const Var& z, bool training) {
    const Shape& s = z.shape();
    if (s.c != config_.latent_dim || s.h != 1 || s.w != 1)
        throw ShapeError("MaskVAE latent must be (N, " + std::to_string(config_.latent_dim) + ", 1, 1), got " + s.str());
    Var h = o::reshape(from_z_(z), Shape{s.n, top_channels_, bottleneck_, bottleneck_});
    h = o::relu(dec_in_bn_(h, training));
    for (std::size_t i = 0; i < dec_.size(); ++i) h = o::relu(dec_bn_[i](dec_[i](h), training));
    return to_logits_(h);
}

nn::ParamSet MaskVae::params() {
    nn::ParamSet set;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
        enc_[i].collect(set, "enc" + std::to_string(i));
        enc_bn_[i].collect(set, "enc" + std::to_string(i) + ".bn");
    }
    to_mu_.collect(set, "mu");
    to_log_sigma_.collect(set, "log_sigma");
    from_z_.collect(set, "from_z");
    dec_in_bn_.collect(set, "dec_in.bn");
    for (std::size_t i = 0; i < dec_.size(); ++i) {
        dec_[i].collect(set, "dec" + std::to_string(i));
        dec_bn_[i].collect(set, "dec" + std::to_string(i) + ".bn");
    }
    to_logits_.collect(set, "logits");
    return set;
}

MaskVae MaskVae::clone() {
    Rng rng(0);
    MaskVae copy(config_, rng);
    copy.params().restore(params().snapshot());
    return copy;
}

Var reparameterize(const LatentCode& code, Rng& rng) {
    Tensor r(code.mu.shape());
    for (Real& v : r.storage()) v = static_cast<Real>(rng.normal());
    return o::add(code.mu, o::mul(Var::leaf(std::move(r)), o::exp(code.log_sigma)));
}

Var kl_loss(const LatentCode& code, KlConvention convention) {
    const Real n = static_cast<Real>(code.mu.shape().n);
    const Var& s = code.log_sigma;
    Var var_term;
    if (convention == KlConvention::Paper) {
        // exp(s) - s - 1
        var_term = o::add_scalar(o::sub(o::exp(s), s), Real(-1));
    } else {
        // exp(2s) - 2s - 1
        const Var s2 = o::scale(s, Real(2));
        var_term = o::add_scalar(o::sub(o::exp(s2), s2), Real(-1));
    }
    return o::scale(o::add(o::sum(o::mul(code.mu, code.mu)), o::sum(var_term)), Real(0.5) / n);
}

Var reconstruction_loss(const Var& logits, std::span<const LabelMask> targets) {
    const Shape& s = logits.shape();
    if (static_cast<int>(targets.size()) != s.n) throw ShapeError("reconstruction_loss: batch size mismatch");
    std::vector<int> labels;
    labels.reserve(static_cast<std::size_t>(s.n) * s.plane());
    for (const LabelMask& m : targets) {
        if (m.height() != s.h || m.width() != s.w) throw ShapeError("reconstruction_loss: mask size mismatch");
        labels.insert(labels.end(), m.labels().begin(), m.labels().end());
    }
    return o::softmax_cross_entropy(logits, labels);
}

Tensor softmax_channels(const Tensor& logits) {
    const Shape& s = logits.shape();
    Tensor out(s);
    for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            Real mx = logits.plane_ptr(n, 0)[i];
            for (int c = 1; c < s.c; ++c) mx = std::max(mx, logits.plane_ptr(n, c)[i]);
            double z = 0;
            for (int c = 0; c < s.c; ++c) z += std::exp(static_cast<double>(logits.plane_ptr(n, c)[i] - mx));
            for (int c = 0; c < s.c; ++c)
                out.plane_ptr(n, c)[i] = static_cast<Real>(std::exp(static_cast<double>(logits.plane_ptr(n, c)[i] - mx)) / z);
        }
    return out;
}

VaeLoss vae_total_loss(MaskVae& vae, const Tensor& onehot, std::span<const LabelMask> masks, double lambda_kl,
                       KlConvention convention, Rng& rng, bool training) {
    LatentCode code = vae.encode(Var::leaf(onehot), training);
    code.z = reparameterize(code, rng);
    const Var logits = vae.decode(code.z, training);
    VaeLoss out;
    out.reconstruction = reconstruction_loss(logits, masks);
    out.kl = kl_loss(code, convention);
    out.total = o::add(out.reconstruction, o::scale(out.kl, static_cast<Real>(lambda_kl)));
    return out;
}

std::pair<Tensor, Tensor> traverse_latent(const Tensor& z_t, const Tensor& z_ref, double lambda_inter) {
    require_same_shape(z_t.shape(), z_ref.shape(), "traverse_latent");
    if (!(lambda_inter > 0)) throw ArgumentError("lambda_inter must be > 0");
    Tensor inter(z_t.shape()), outer(z_t.shape());
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const double step = (static_cast<double>(z_ref[i]) - z_t[i]) / lambda_inter;
        inter[i] = static_cast<Real>(z_t[i] + step);
        outer[i] = static_cast<Real>(z_t[i] - step);
    }
    return {std::move(inter), std::move(outer)};
}

std::vector<LabelMask> decode_labels(MaskVae& vae, const Tensor& z) {
    NoGradGuard ng;
    const Var logits = vae.decode(Var::leaf(z), false);
    std::vector<LabelMask> out;
    for (int n = 0; n < z.shape().n; ++n) out.push_back(argmax_labels(logits.value(), n));
    return out;
}

Tensor encode_mu(MaskVae& vae, const Tensor& onehot) {
    NoGradGuard ng;
    return vae.encode(Var::leaf(onehot), false).mu.value();
}

Traversal latent_traverse(MaskVae& vae, const Tensor& onehot_t, const Tensor& onehot_ref, double lambda_inter) {
    require_same_shape(onehot_t.shape(), onehot_ref.shape(), "latent_traverse");
    const Tensor z_t = encode_mu(vae, onehot_t);
    const Tensor z_ref = encode_mu(vae, onehot_ref);
    auto [zi, zo] = traverse_latent(z_t, z_ref, lambda_inter);
    return Traversal{decode_labels(vae, zi), decode_labels(vae, zo)};
}

std::pair<LabelMask, LabelMask> latent_traverse(MaskVae& vae, const LabelMask& m_t, const LabelMask& m_ref,
                                                double lambda_inter) {
    const int C = vae.config().categories;
    const LabelMask t[] = {m_t};
    const LabelMask r[] = {m_ref};
    Traversal tr = latent_traverse(vae, onehot_batch(t, C), onehot_batch(r, C), lambda_inter);
    return {std::move(tr.inter[0]), std::move(tr.outer[0])};
}

std::vector<LabelMask> interpolate(MaskVae& vae, const LabelMask& m_t, const LabelMask& m_ref, int steps) {
    if (steps < 1) throw ArgumentError("interpolate needs steps >= 1");
    const int C = vae.config().categories;
    const LabelMask pair[] = {m_t, m_ref};
    const Tensor mu = encode_mu(vae, onehot_batch(pair, C));
    const int D = vae.config().latent_dim;
    Tensor z(Shape{steps + 1, D, 1, 1});
    for (int k = 0; k <= steps; ++k) {
        const double a = static_cast<double>(k) / steps;
        for (int d = 0; d < D; ++d) z.at(k, d, 0, 0) = static_cast<Real>((1 - a) * mu.at(0, d, 0, 0) + a * mu.at(1, d, 0, 0));
    }
    return decode_labels(vae, z);
}

double reconstruction_accuracy(MaskVae& vae, std::span<const LabelMask> masks, int batch_size) {
    const int C = vae.config().categories;
    std::size_t agree = 0, total = 0;
    for (std::size_t b = 0; b < masks.size(); b += batch_size) {
        const auto chunk = masks.subspan(b, std::min<std::size_t>(batch_size, masks.size() - b));
        const auto rec = decode_labels(vae, encode_mu(vae, onehot_batch(chunk, C)));
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            for (std::size_t p = 0; p < chunk[i].pixels(); ++p) agree += rec[i].labels()[p] == chunk[i].labels()[p];
            total += chunk[i].pixels();
        }
    }
    return total ? static_cast<double>(agree) / total : 0.0;
}

}  // namespace maskgan::vae
