#pragma once

// Noise schedule, forward noising, the epsilon-prediction objective and the
// DDIM reverse step. Timesteps are 1-based: t = 1..T, with t = 0 denoting the
// clean latent (alpha_bar(0) = 1).

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "stylebrush/autograd/ops.hpp"
#include "stylebrush/core/error.hpp"
#include "stylebrush/core/rng.hpp"
#include "stylebrush/core/tensor.hpp"

namespace stylebrush::diffusion {

class NoiseSchedule {
public:
    NoiseSchedule() = default;

    /// Arbitrary beta sequence. Betas of exactly zero are accepted so the
    /// noise-free limits of the forward process can be exercised directly.
    static NoiseSchedule from_betas(std::vector<double> betas) {
        require(!betas.empty(), ErrorKind::usage, "noise schedule needs T >= 1");
        for (double b : betas)
            require(b >= 0.0 && b < 1.0, ErrorKind::usage, "noise schedule betas must lie in [0, 1)");
        NoiseSchedule s;
        s.betas_ = std::move(betas);
        s.alphas_.resize(s.betas_.size());
        s.alpha_bars_.resize(s.betas_.size());
        double running = 1.0;
        for (std::size_t i = 0; i < s.betas_.size(); ++i) {
            s.alphas_[i] = 1.0 - s.betas_[i];
            running *= s.alphas_[i];
            s.alpha_bars_[i] = running;
        }
        return s;
    }

    /// Betas linearly spaced from beta_start to beta_end inclusive.
    static NoiseSchedule linear(int steps, double beta_start, double beta_end) {
        require(steps >= 1, ErrorKind::usage, "noise schedule needs T >= 1");
        require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::usage,
                "linear schedule requires 0 < beta_start <= beta_end < 1");
        std::vector<double> betas(static_cast<std::size_t>(steps));
        for (int i = 0; i < steps; ++i)
            betas[static_cast<std::size_t>(i)] =
                steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(steps - 1);
        return from_betas(std::move(betas));
    }

    int steps() const noexcept { return static_cast<int>(betas_.size()); }
    const std::vector<double>& betas() const noexcept { return betas_; }
    const std::vector<double>& alphas() const noexcept { return alphas_; }
    /// alpha_bars()[i] is the cumulative product for timestep t = i + 1.
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

    double beta(int t) const {
        check_step(t);
        return betas_[static_cast<std::size_t>(t - 1)];
    }

    double alpha_bar(int t) const {
        require(t >= 0 && t <= steps(), ErrorKind::usage, "timestep " + std::to_string(t) + " outside [0, T]");
        return t == 0 ? 1.0 : alpha_bars_[static_cast<std::size_t>(t - 1)];
    }

    void check_step(int t) const {
        require(t >= 1 && t <= steps(), ErrorKind::usage, "timestep " + std::to_string(t) + " outside [1, T]");
    }

private:
    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

/// A latent z_t: data of shape [C,h,w] or [N,C,h,w] tagged with its timestep.
template <class T>
struct Latent {
    Tensor<T> data;
    int timestep = 0;
};

namespace detail {
template <class T>
Tensor<T> axpby(double a, const Tensor<T>& x, double b, const Tensor<T>& y) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<T>(a * static_cast<double>(x[i]) + b * static_cast<double>(y[i]));
    return out;
}
}  // namespace detail

/// Closed-form forward process: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <class T>
Latent<T> q_sample(const Latent<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    require_same_shape(z0.data, eps, "q_sample");
    sched.check_step(t);
    const double ab = sched.alpha_bar(t);
    return {detail::axpby(std::sqrt(ab), z0.data, std::sqrt(1.0 - ab), eps), t};
}

/// Forward process with one timestep per batch element (leading axis).
template <class T>
Tensor<T> q_sample_batch(const Tensor<T>& z0, std::span<const int> ts, const Tensor<T>& eps,
                         const NoiseSchedule& sched) {
    require_same_shape(z0, eps, "q_sample_batch");
    require(z0.rank() >= 1 && static_cast<std::size_t>(z0.dim(0)) == ts.size(), ErrorKind::shape,
            "q_sample_batch: one timestep per batch element required");
    Tensor<T> out(z0.shape());
    const std::size_t inner = z0.size() / ts.size();
    for (std::size_t n = 0; n < ts.size(); ++n) {
        sched.check_step(ts[n]);
        const double ab = sched.alpha_bar(ts[n]);
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        for (std::size_t i = n * inner; i < (n + 1) * inner; ++i)
            out[i] = static_cast<T>(a * static_cast<double>(z0[i]) + b * static_cast<double>(eps[i]));
    }
    return out;
}

/// Single-step kernel q(z_t | z_{t-1}): sqrt(1 - beta_t) z_prev + sqrt(beta_t) eps.
template <class T>
Latent<T> q_step(const Latent<T>& z_prev, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    require_same_shape(z_prev.data, eps, "q_step");
    sched.check_step(t);
    const double b = sched.beta(t);
    return {detail::axpby(std::sqrt(1.0 - b), z_prev.data, std::sqrt(b), eps), t};
}

/// Noise-prediction network as seen by the objective: (z_t, per-item timesteps) -> eps_hat.
template <class T>
using Denoiser = std::function<ag::Var<T>(const ag::Var<T>&, std::span<const int>)>;

/// Mean squared error between eps and the prediction at q_sample(z0, t, eps).
/// Returns a differentiable scalar; non-finite predictions throw.
template <class T>
ag::Var<T> training_loss(const Denoiser<T>& denoiser, const Tensor<T>& z0, std::span<const int> ts,
                         const Tensor<T>& eps, const NoiseSchedule& sched) {
    const Tensor<T> zt = q_sample_batch(z0, ts, eps, sched);
    ag::Var<T> pred = denoiser(ag::constant(zt), ts);
    require(pred.value().all_finite(), ErrorKind::numeric, "denoiser produced non-finite output");
    require_same_shape(pred.value(), eps, "training_loss");
    return ag::mse(pred, ag::constant(eps));
}

/// Standard DDIM variance for the step t -> t_prev at the given eta.
inline double ddim_sigma(const NoiseSchedule& sched, int t, int t_prev, double eta) {
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

/// One DDIM reverse step from t to t_prev. `noise` supplies the fresh
/// Gaussian term and is only consulted when eta > 0.
template <class T>
Latent<T> ddim_step(const Latent<T>& zt, const Tensor<T>& eps_pred, int t_prev, double eta,
                    const NoiseSchedule& sched, Rng* noise = nullptr) {
    const int t = zt.timestep;
    require_same_shape(zt.data, eps_pred, "ddim_step");
    require(0 <= t_prev && t_prev < t && t <= sched.steps(), ErrorKind::usage, "ddim_step requires 0 <= t_prev < t <= T");
    require(eta >= 0.0 && eta <= 1.0, ErrorKind::usage, "ddim_step: eta must lie in [0, 1]");
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    const double sigma = ddim_sigma(sched, t, t_prev, eta);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double sqrt_ab = std::sqrt(ab), sqrt_1mab = std::sqrt(1.0 - ab), sqrt_ab_prev = std::sqrt(ab_prev);
    if (sigma > 0.0) require(noise != nullptr, ErrorKind::usage, "ddim_step: eta > 0 needs a noise source");
    Tensor<T> out(zt.data.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double e = static_cast<double>(eps_pred[i]);
        const double z0_hat = (static_cast<double>(zt.data[i]) - sqrt_1mab * e) / sqrt_ab;
        double v = sqrt_ab_prev * z0_hat + dir * e;
        if (sigma > 0.0) v += sigma * noise->normal();
        out[i] = static_cast<T>(v);
    }
    return {std::move(out), t_prev};
}

/// Descending DDIM timesteps T = t_0 > t_1 > ... > t_{S-1} >= 1; the final
/// step goes to t = 0.
inline std::vector<int> ddim_timesteps(int total_steps, int sample_steps, int start = -1) {
    const int top = start < 0 ? total_steps : start;
    require(sample_steps >= 1, ErrorKind::usage, "DDIM needs at least one step");
    require(top >= 1 && top <= total_steps, ErrorKind::usage, "DDIM start timestep outside [1, T]");
    const int s = std::min(sample_steps, top);
    std::vector<int> ts;
    for (int i = 0; i < s; ++i) ts.push_back(static_cast<int>(std::lround(double(top) * double(s - i) / double(s))));
    return ts;
}

/// Sinusoidal embedding of integer positions: [sin(p f_i), cos(p f_i)] with
/// f_i = 10000^(-i / (dim/2)).
template <class T>
Tensor<T> sinusoidal_embedding(std::span<const int> positions, int dim) {
    require(dim >= 2 && dim % 2 == 0, ErrorKind::shape, "sinusoidal embedding width must be even");
    const int half = dim / 2;
    Tensor<T> out({static_cast<int>(positions.size()), dim});
    for (std::size_t n = 0; n < positions.size(); ++n)
        for (int i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
            const double a = double(positions[n]) * f;
            out.at(n, i) = static_cast<T>(std::sin(a));
            out.at(n, i + half) = static_cast<T>(std::cos(a));
        }
    return out;
}

}  // namespace stylebrush::diffusion
