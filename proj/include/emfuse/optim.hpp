#pragma once

// Named trainable parameters, global-norm gradient clipping and AdamW with
// decoupled weight decay.

#include "emfuse/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace emfuse {

struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

// Global L2 clip across every trainable parameter's gradient. Returns the
// pre-clip norm.
inline double clip_grad_norm(std::vector<Parameter>& params, double max_norm) {
    double sq = 0.0;
    for (const Parameter& p : params) {
        if (!p.trainable) continue;
        for (double g : p.value.node()->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Parameter& p : params) {
            if (!p.trainable) continue;
            for (double& g : p.value.node()->grad) g *= s;
        }
    }
    return norm;
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// AdamW: the decay term is applied directly to the weights, outside the
// moment estimates, so zero gradients still shrink the parameters.
class Adam {
public:
    Adam(std::vector<Parameter> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const std::size_t n = params_[i].value.values().size();
            m_[i].assign(n, 0.0);
            v_[i].assign(n, 0.0);
        }
    }

    std::vector<Parameter>& params() { return params_; }

    void zero_grad() {
        for (Parameter& p : params_) p.value.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = params_[i];
            if (!p.trainable) continue;
            auto& w = p.value.node()->values;
            const auto& g = p.value.node()->grad;
            if (g.size() != w.size()) throw std::runtime_error("adam: parameter " + p.name + " has no gradient buffer");
            for (std::size_t j = 0; j < w.size(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                w[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
            }
        }
    }

    std::int64_t steps() const { return t_; }

private:
    std::vector<Parameter> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t t_ = 0;
};

}  // namespace emfuse
