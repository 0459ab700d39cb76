#pragma once

// Stylization pipelines: single images, style-strength interpolation and
// frame sequences with temporal attention.

#include <optional>
#include <vector>

#include "stylebrush/core/fpu.hpp"
#include "stylebrush/model.hpp"

namespace stylebrush::infer {

using ag::Var;

/// Style strength in [0,1]; values outside are rejected.
class StyleStrength {
public:
    StyleStrength() = default;
    explicit StyleStrength(double v) : value_(v) {
        require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorKind::usage,
                "style strength must lie in [0, 1], got " + std::to_string(v));
    }
    double value() const { return value_; }

private:
    double value_ = 1.0;
};

template <class T>
struct StylizationRequest {
    Tensor<T> content;    // [3,H,W] in [-1,1]
    Tensor<T> reference;  // [3,H',W']; resized to the content size when different
    StyleStrength strength;
    int steps = 30;
    double eta = 0.0;
    std::uint64_t seed = 0;
    /// Structure blur chain; sampled from the seed when absent.
    std::optional<structure::BlurChain> chain;
    /// Start from the noised content latent at `start_timestep` instead of
    /// pure noise at T.
    bool init_from_content = false;
    int start_timestep = -1;  // -1: 60% of T
};

/// Bilinear resize of [C,H,W] (align-corners off).
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int h, int w) {
    const int c = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (H == h && W == w) return x;
    Tensor<T> out({c, h, w});
    for (int y = 0; y < h; ++y) {
        const double sy = std::clamp((y + 0.5) * H / h - 0.5, 0.0, double(H - 1));
        const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, H - 1);
        const double fy = sy - y0;
        for (int xx = 0; xx < w; ++xx) {
            const double sx = std::clamp((xx + 0.5) * W / w - 0.5, 0.0, double(W - 1));
            const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, W - 1);
            const double fx = sx - x0;
            for (int k = 0; k < c; ++k) {
                const double v = (1 - fy) * ((1 - fx) * x.at(k, y0, x0) + fx * x.at(k, y0, x1)) +
                                 fy * ((1 - fx) * x.at(k, y1, x0) + fx * x.at(k, y1, x1));
                out.at(k, y, xx) = static_cast<T>(v);
            }
        }
    }
    return out;
}

/// strength * latent_s + (1 - strength) * latent_c, element-wise.
template <class T>
Tensor<T> interpolate_latents(const Tensor<T>& latent_s, const Tensor<T>& latent_c, StyleStrength strength) {
    require_same_shape(latent_s, latent_c, "interpolate_latents");
    const T s = static_cast<T>(strength.value());
    const T r = static_cast<T>(1.0 - strength.value());
    Tensor<T> out(latent_s.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * latent_s[i] + r * latent_c[i];
    return out;
}

/// Runs requests against one loaded model. Counts reference-net passes.
template <class T>
class Stylizer {
public:
    explicit Stylizer(const model::StyleBrushModel<T>& m) : model_(m) {}

    long reference_passes() const { return reference_passes_; }

    /// Final (t = 0) latent [C,h,w] for content styled after `reference`.
    Tensor<T> final_latent(const StylizationRequest<T>& req, const Tensor<T>& reference) {
        check_request(req);
        ag::NoGradGuard no_grad;
        const Conditioning cond = condition(req.content, reference);
        Tensor<T> z = sample(req, cond, 0);
        return z.reshaped({z.dim(1), z.dim(2), z.dim(3)});
    }

    Tensor<T> stylize(const StylizationRequest<T>& req) {
        return model_.codec().decode(final_latent(req, req.reference));
    }

    /// Interpolates the stylized latent against the content-self latent,
    /// both denoised from the same noise and blur chain.
    Tensor<T> stylize_with_strength(const StylizationRequest<T>& req) {
        const double s = req.strength.value();
        if (s == 1.0) return stylize(req);
        const Tensor<T> latent_c = final_latent(req, req.content);
        if (s == 0.0) return model_.codec().decode(latent_c);
        const Tensor<T> latent_s = final_latent(req, req.reference);
        return model_.codec().decode(interpolate_latents(latent_s, latent_c, req.strength));
    }

    /// Frames share the initial noise and one set of reference features;
    /// temporal attention runs across them at every site.
    std::vector<Tensor<T>> stylize_video(const std::vector<Tensor<T>>& frames, const StylizationRequest<T>& req) {
        require(!frames.empty(), ErrorKind::data, "video has no frames");
        for (const auto& f : frames)
            require(f.shape() == frames.front().shape(), ErrorKind::shape, "all video frames must share one size");
        if (!model_.config().unet.temporal_enabled) {
            // Identity temporal layers: zero output projections.
            model::StyleBrushModel<T> with_temporal = model_;
            with_temporal.enable_temporal(derive_seed(req.seed, "temporal-init"));
            Stylizer<T> inner(with_temporal);
            auto out = inner.stylize_video(frames, req);
            reference_passes_ += inner.reference_passes();
            return out;
        }
        StylizationRequest<T> first = req;
        first.content = frames.front();
        check_request(first);
        ag::NoGradGuard no_grad;
        const int t = static_cast<int>(frames.size());
        const Conditioning cond = condition(frames.front(), req.reference);
        Tensor<T> latent = sample(first, cond, t, &frames);
        std::vector<Tensor<T>> out;
        const Shape frame_shape{latent.dim(1), latent.dim(2), latent.dim(3)};
        for (int k = 0; k < t; ++k) out.push_back(model_.codec().decode(latent.batch_slice(k, k + 1).reshaped(frame_shape)));
        return out;
    }

private:
    struct Conditioning {
        Var<T> tokens;
        stylenet::ReferenceFeatures<T> reference;
    };

    void check_request(const StylizationRequest<T>& req) const {
        require(req.content.rank() == 3 && req.content.dim(0) == 3, ErrorKind::shape, "content must be an RGB image");
        require(req.reference.rank() == 3 && req.reference.dim(0) == 3, ErrorKind::shape, "reference must be an RGB image");
        const int d = model_.required_divisor();
        require(req.content.dim(1) % d == 0 && req.content.dim(2) % d == 0, ErrorKind::shape,
                "content size " + std::to_string(req.content.dim(1)) + "x" + std::to_string(req.content.dim(2)) +
                    " must be divisible by " + std::to_string(d));
        require(req.steps >= 1, ErrorKind::usage, "need at least one DDIM step");
        require(req.eta >= 0.0 && req.eta <= 1.0, ErrorKind::usage, "eta must lie in [0, 1]");
    }

    structure::BlurChain chain_for(const StylizationRequest<T>& req) const {
        return req.chain ? *req.chain : structure::sample_blur_chain(derive_seed(req.seed, "blur"));
    }

    Conditioning condition(const Tensor<T>& content, const Tensor<T>& reference) {
        Conditioning c;
        const Tensor<T> ref = resize_bilinear(reference, content.dim(1), content.dim(2));
        Var<T> zr = ag::constant(unsqueeze0(model_.codec().encode(ref)));
        c.tokens = model_.tokens(zr);
        c.reference = model_.reference_features(zr, c.tokens);
        ++reference_passes_;
        return c;
    }

    Var<T> structure_batch(const std::vector<Tensor<T>>& images, const structure::BlurChain& chain) const {
        std::vector<Tensor<T>> s;
        for (const auto& img : images) s.push_back(unsqueeze0(structure::extract_structure(img, chain).data));
        return model_.structure_features(ag::constant(stack_batch<T>(s)));
    }

    Tensor<T> sample(const StylizationRequest<T>& req, const Conditioning& cond, int frames,
                     const std::vector<Tensor<T>>* video = nullptr) {
        FlushDenormals ftz;
        const auto& sched = model_.schedule();
        const int f = model_.codec().config().spatial_factor;
        const int n = video ? static_cast<int>(video->size()) : 1;
        const Shape one{1, model_.codec().config().latent_channels, req.content.dim(1) / f, req.content.dim(2) / f};

        std::vector<Tensor<T>> contents = video ? *video : std::vector<Tensor<T>>{req.content};
        const Var<T> structure = structure_batch(contents, chain_for(req));

        Rng noise_rng(derive_seed(req.seed, "init-noise"));
        const Tensor<T> noise = Tensor<T>::randn(one, noise_rng, T(1));
        std::vector<Tensor<T>> repeated(static_cast<std::size_t>(n), noise);
        Tensor<T> eps0 = stack_batch<T>(repeated);

        int top = sched.steps();
        Tensor<T> z;
        if (req.init_from_content) {
            top = req.start_timestep < 0 ? std::max(1, static_cast<int>(std::lround(0.6 * sched.steps()))) : req.start_timestep;
            require(top >= 1 && top <= sched.steps(), ErrorKind::usage, "start timestep outside [1, T]");
            std::vector<Tensor<T>> lat;
            for (const auto& c : contents) lat.push_back(unsqueeze0(model_.codec().encode(c)));
            std::vector<int> tops(static_cast<std::size_t>(n), top);
            z = diffusion::q_sample_batch(stack_batch<T>(lat), tops, eps0, sched);
        } else {
            z = eps0;
        }

        Rng step_rng(derive_seed(req.seed, "ddim-noise"));
        const std::vector<int> ts = diffusion::ddim_timesteps(sched.steps(), req.steps, top);
        diffusion::Latent<T> zt{std::move(z), ts.front()};
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
            std::vector<int> tb(static_cast<std::size_t>(n), zt.timestep);
            Var<T> eps = model_.predict_noise(ag::constant(zt.data), tb, &structure, &cond.reference, &cond.tokens, frames);
            require(eps.value().all_finite(), ErrorKind::numeric, "denoiser produced non-finite output during sampling");
            zt = diffusion::ddim_step(zt, eps.value(), t_prev, req.eta, sched, &step_rng);
        }
        return zt.data;
    }

    const model::StyleBrushModel<T>& model_;
    long reference_passes_ = 0;
};

}  // namespace stylebrush::infer
