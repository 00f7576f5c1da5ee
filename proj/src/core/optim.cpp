#include "maskgan/core/optim.hpp"

#include <cmath>

namespace maskgan::nn {

void Adam::step(ParamSet& set) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const double step_size = options_.lr / bc1;
    const Real b1 = static_cast<Real>(options_.beta1), b2 = static_cast<Real>(options_.beta2);
    for (const auto& [name, param] : set.params()) {
        if (!param.has_grad()) continue;
        Var p = param;
        Tensor& value = p.mutable_value();
        const Tensor& grad = p.grad();
        auto [mit, m_new] = m_.try_emplace(name, value.shape());
        auto [vit, v_new] = v_.try_emplace(name, value.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const Real g = grad[i];
            m[i] = b1 * m[i] + (Real(1) - b1) * g;
            v[i] = b2 * v[i] + (Real(1) - b2) * g * g;
            const double denom = std::sqrt(static_cast<double>(v[i]) / bc2) + options_.eps;
            value[i] -= static_cast<Real>(step_size * static_cast<double>(m[i]) / denom);
        }
        p.zero_grad();
    }
}

std::map<std::string, Tensor> Adam::state_tensors(const std::string& prefix) const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : m_) out[prefix + name + ".m"] = t;
    for (const auto& [name, t] : v_) out[prefix + name + ".v"] = t;
    return out;
}

void Adam::load_state_tensors(const std::map<std::string, Tensor>& tensors, const std::string& prefix,
                              std::int64_t steps) {
    m_.clear();
    v_.clear();
    for (const auto& [key, t] : tensors) {
        if (key.rfind(prefix, 0) != 0) continue;
        const std::string rest = key.substr(prefix.size());
        if (rest.size() > 2 && rest.ends_with(".m")) m_[rest.substr(0, rest.size() - 2)] = t;
        else if (rest.size() > 2 && rest.ends_with(".v")) v_[rest.substr(0, rest.size() - 2)] = t;
    }
    steps_ = steps;
}

}  // namespace maskgan::nn
