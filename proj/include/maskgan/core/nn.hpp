#pragma once

#include <map>
#include <string>
#include <vector>

#include "maskgan/core/autograd.hpp"
#include "maskgan/core/rng.hpp"

namespace maskgan::nn {

/// Ordered named view over a network's trainable parameters and its
/// non-trainable buffers (batch-norm running statistics).
class ParamSet {
public:
    void add(const std::string& name, Var param);
    void add_buffer(const std::string& name, Tensor* buffer);

    const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor*>>& buffers() const { return buffers_; }

    void zero_grad();
    void set_requires_grad(bool on);
    std::size_t parameter_count() const;
    /// Copy of every parameter and buffer value keyed by name.
    std::map<std::string, Tensor> snapshot() const;
    /// Overwrites values from a snapshot; every name must be present with a
    /// matching shape.
    void restore(const std::map<std::string, Tensor>& values, const std::string& prefix = "");

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::vector<std::pair<std::string, Tensor*>> buffers_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
void init_uniform_fan_in(Var& param, int fan_in, Rng& rng);

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng, bool bias = true);
    Var operator()(const Var& x) const;
    void collect(ParamSet& set, const std::string& prefix) const;
    int out_channels() const { return weight_.shape().n; }

    Var weight_, bias_;
    int stride_ = 1, pad_ = 0;
};

class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, int output_pad, Rng& rng);
    Var operator()(const Var& x) const;
    void collect(ParamSet& set, const std::string& prefix) const;

    Var weight_, bias_;
    int stride_ = 2, pad_ = 1, output_pad_ = 1;
};

class Linear {
public:
    Linear() = default;
    Linear(int in_features, int out_features, Rng& rng);
    Var operator()(const Var& x) const;
    void collect(ParamSet& set, const std::string& prefix) const;

    Var weight_, bias_;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);
    Var operator()(const Var& x, bool training);
    void collect(ParamSet& set, const std::string& prefix);

    Var gamma_, beta_;
    Tensor running_mean_, running_var_;
    Real momentum_ = Real(0.1), eps_ = Real(1e-5);
};

inline constexpr Real kNormEps = Real(1e-5);

}  // namespace maskgan::nn
