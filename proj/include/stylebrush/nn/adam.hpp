#pragma once

#include <cmath>
#include <map>
#include <string>

#include "stylebrush/nn/layers.hpp"

namespace stylebrush::nn {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;  // global-norm clip; <= 0 disables
};

/// Adaptive-moment optimizer with bias correction. Moments are keyed by
/// parameter name so the state serializes alongside the weights.
template <class T>
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig config) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    long step_count() const { return step_; }
    void set_step_count(long s) { step_ = s; }

    std::map<std::string, Tensor<T>>& first_moments() { return m_; }
    std::map<std::string, Tensor<T>>& second_moments() { return v_; }
    const std::map<std::string, Tensor<T>>& first_moments() const { return m_; }
    const std::map<std::string, Tensor<T>>& second_moments() const { return v_; }

    /// L2 norm of all gradients in `params`.
    static double grad_norm(const ParamList<T>& params) {
        double s = 0;
        for (const auto& p : params) {
            if (!p.var.has_grad()) continue;
            const Tensor<T> g = p.var.grad();
            for (T v : g.values()) s += double(v) * double(v);
        }
        return std::sqrt(s);
    }

    /// Applies one update from the accumulated gradients, then clears them.
    void step(ParamList<T>& params) {
        ++step_;
        double clip = 1.0;
        if (config_.grad_clip > 0) {
            const double norm = grad_norm(params);
            if (norm > config_.grad_clip) clip = config_.grad_clip / norm;
        }
        const double bc1 = 1.0 - std::pow(config_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, double(step_));
        for (auto& p : params) {
            Tensor<T>& w = p.var.mutable_value();
            auto mit = m_.try_emplace(p.name, w.shape()).first;
            auto vit = v_.try_emplace(p.name, w.shape()).first;
            Tensor<T>& m = mit->second;
            Tensor<T>& v = vit->second;
            if (!p.var.has_grad()) continue;
            const Tensor<T> g = p.var.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const T gi = static_cast<T>(g[i] * clip + config_.weight_decay * w[i]);
                m[i] = static_cast<T>(config_.beta1 * m[i] + (1.0 - config_.beta1) * gi);
                v[i] = static_cast<T>(config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi);
                const double mh = m[i] / bc1, vh = v[i] / bc2;
                w[i] -= static_cast<T>(config_.learning_rate * mh / (std::sqrt(vh) + config_.epsilon));
            }
            p.var.zero_grad();
        }
    }

private:
    AdamConfig config_;
    long step_ = 0;
    std::map<std::string, Tensor<T>> m_;
    std::map<std::string, Tensor<T>> v_;
};

}  // namespace stylebrush::nn
