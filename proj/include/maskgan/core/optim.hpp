#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "maskgan/core/nn.hpp"

namespace maskgan::nn {

struct AdamOptions {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// the optimizer can be rebuilt against a fresh ParamSet of the same network.
class Adam {
public:
    explicit Adam(AdamOptions options = {}) : options_(options) {}

    /// Applies one update to every parameter in `set` that holds a gradient,
    /// then clears those gradients.
    void step(ParamSet& set);

    AdamOptions& options() { return options_; }
    std::int64_t steps() const { return steps_; }

    /// Moment buffers as named tensors ("<param>.m", "<param>.v").
    std::map<std::string, Tensor> state_tensors(const std::string& prefix) const;
    void load_state_tensors(const std::map<std::string, Tensor>& tensors, const std::string& prefix,
                            std::int64_t steps);

private:
    AdamOptions options_;
    std::int64_t steps_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace maskgan::nn
