#include "maskgan/core/nn.hpp"

#include <cmath>

namespace maskgan::nn {

void ParamSet::add(const std::string& name, Var param) { params_.emplace_back(name, std::move(param)); }

void ParamSet::add_buffer(const std::string& name, Tensor* buffer) { buffers_.emplace_back(name, buffer); }

void ParamSet::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

void ParamSet::set_requires_grad(bool on) {
    for (auto& [name, p] : params_) p.set_requires_grad(on);
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value().size();
    return n;
}

std::map<std::string, Tensor> ParamSet::snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, p] : params_) out[name] = p.value();
    for (const auto& [name, b] : buffers_) out[name] = *b;
    return out;
}

void ParamSet::restore(const std::map<std::string, Tensor>& values, const std::string& prefix) {
    auto fetch = [&](const std::string& name, Tensor& dst) {
        auto it = values.find(prefix + name);
        if (it == values.end()) throw ShapeError("missing tensor '" + prefix + name + "'");
        if (it->second.shape() != dst.shape())
            throw ShapeError("tensor '" + prefix + name + "' has shape " + it->second.shape().str() + ", expected " +
                             dst.shape().str());
        dst = it->second;
    };
    for (auto& [name, p] : params_) fetch(name, p.mutable_value());
    for (auto& [name, b] : buffers_) fetch(name, *b);
}

void init_uniform_fan_in(Var& param, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    for (Real& v : param.mutable_value().storage()) v = static_cast<Real>(rng.uniform(-bound, bound));
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng, bool bias)
    : stride_(stride), pad_(pad) {
    weight_ = Var::leaf(Tensor(Shape{out_ch, in_ch, kernel, kernel}), true);
    init_uniform_fan_in(weight_, in_ch * kernel * kernel, rng);
    if (bias) {
        bias_ = Var::leaf(Tensor(Shape{1, out_ch, 1, 1}), true);
        init_uniform_fan_in(bias_, in_ch * kernel * kernel, rng);
    }
}

Var Conv2d::operator()(const Var& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }

void Conv2d::collect(ParamSet& set, const std::string& prefix) const {
    set.add(prefix + ".weight", weight_);
    if (bias_) set.add(prefix + ".bias", bias_);
}

ConvTranspose2d::ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, int output_pad, Rng& rng)
    : stride_(stride), pad_(pad), output_pad_(output_pad) {
    weight_ = Var::leaf(Tensor(Shape{in_ch, out_ch, kernel, kernel}), true);
    bias_ = Var::leaf(Tensor(Shape{1, out_ch, 1, 1}), true);
    init_uniform_fan_in(weight_, out_ch * kernel * kernel, rng);
    init_uniform_fan_in(bias_, out_ch * kernel * kernel, rng);
}

Var ConvTranspose2d::operator()(const Var& x) const {
    return ops::conv_transpose2d(x, weight_, bias_, stride_, pad_, output_pad_);
}

void ConvTranspose2d::collect(ParamSet& set, const std::string& prefix) const {
    set.add(prefix + ".weight", weight_);
    set.add(prefix + ".bias", bias_);
}

Linear::Linear(int in_features, int out_features, Rng& rng) {
    weight_ = Var::leaf(Tensor(Shape{out_features, in_features, 1, 1}), true);
    bias_ = Var::leaf(Tensor(Shape{1, out_features, 1, 1}), true);
    init_uniform_fan_in(weight_, in_features, rng);
    init_uniform_fan_in(bias_, in_features, rng);
}

Var Linear::operator()(const Var& x) const { return ops::linear(x, weight_, bias_); }

void Linear::collect(ParamSet& set, const std::string& prefix) const {
    set.add(prefix + ".weight", weight_);
    set.add(prefix + ".bias", bias_);
}

BatchNorm2d::BatchNorm2d(int channels)
    : gamma_(Var::leaf(Tensor(Shape{1, channels, 1, 1}, Real(1)), true)),
      beta_(Var::leaf(Tensor(Shape{1, channels, 1, 1}), true)),
      running_mean_(Shape{1, channels, 1, 1}),
      running_var_(Shape{1, channels, 1, 1}, Real(1)) {}

Var BatchNorm2d::operator()(const Var& x, bool training) {
    return ops::batch_norm(x, gamma_, beta_, running_mean_, running_var_, training, momentum_, eps_);
}

void BatchNorm2d::collect(ParamSet& set, const std::string& prefix) {
    set.add(prefix + ".gamma", gamma_);
    set.add(prefix + ".beta", beta_);
    set.add_buffer(prefix + ".running_mean", &running_mean_);
    set.add_buffer(prefix + ".running_var", &running_var_);
}

}  // namespace maskgan::nn
