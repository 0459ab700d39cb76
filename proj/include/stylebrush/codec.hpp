#pragma once

// Small convolutional autoencoder that plays the role of the frozen latent
// codec: images [3,H,W] in [-1,1] <-> latents [C, H/f, W/f].

#include <cmath>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "stylebrush/autograd/ops.hpp"
#include "stylebrush/core/fpu.hpp"
#include "stylebrush/core/log.hpp"
#include "stylebrush/io/container.hpp"
#include "stylebrush/nn/adam.hpp"
#include "stylebrush/nn/layers.hpp"
#include "stylebrush/nn/serialize.hpp"

namespace stylebrush::codec {

using ag::Var;

struct CodecConfig {
    int spatial_factor = 4;
    int latent_channels = 4;
    int hidden_channels = 32;
    /// Weight-free mode: encode averages f x f blocks (RGB + luma channels),
    /// decode upsamples the RGB channels.
    bool bypass = false;
    /// Multiplier applied to encoder outputs so latents have roughly unit
    /// variance; fitted after pretraining.
    double latent_scale = 1.0;

    void validate() const {
        require(spatial_factor >= 1 && (spatial_factor & (spatial_factor - 1)) == 0, ErrorKind::config,
                "codec spatial_factor must be a power of two");
        require(latent_channels >= 1 && hidden_channels >= 1, ErrorKind::config, "codec channel counts must be positive");
        require(!bypass || latent_channels >= 3, ErrorKind::config, "bypass codec needs at least 3 latent channels");
        require(latent_scale > 0, ErrorKind::config, "codec latent_scale must be positive");
    }

    int down_levels() const {
        int n = 0;
        for (int f = spatial_factor; f > 1; f /= 2) ++n;
        return n;
    }
};

inline void to_json(nlohmann::json& j, const CodecConfig& c) {
    j = {{"spatial_factor", c.spatial_factor},
         {"latent_channels", c.latent_channels},
         {"hidden_channels", c.hidden_channels},
         {"bypass", c.bypass},
         {"latent_scale", c.latent_scale}};
}

inline void from_json(const nlohmann::json& j, CodecConfig& c) {
    c.spatial_factor = j.at("spatial_factor").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.hidden_channels = j.at("hidden_channels").get<int>();
    c.bypass = j.at("bypass").get<bool>();
    c.latent_scale = j.at("latent_scale").get<double>();
}

template <class T>
class Codec {
public:
    Codec() = default;

    Codec(CodecConfig config, std::uint64_t seed) : config_(config) {
        config_.validate();
        if (config_.bypass) return;
        Rng rng(derive_seed(seed, "codec"));
        const int h = config_.hidden_channels;
        enc_in_ = nn::Conv2d<T>::same(3, h, 3, rng);
        for (int i = 0; i < config_.down_levels(); ++i) enc_down_.push_back(nn::Conv2d<T>(h, h, 4, 2, 1, 1, rng));
        enc_out_ = nn::Conv2d<T>::same(h, config_.latent_channels, 3, rng);
        dec_in_ = nn::Conv2d<T>::same(config_.latent_channels, h, 3, rng);
        for (int i = 0; i < config_.down_levels(); ++i) dec_up_.push_back(nn::Conv2d<T>::same(h, h, 3, rng));
        dec_out_ = nn::Conv2d<T>::same(h, 3, 3, rng);
    }

    const CodecConfig& config() const { return config_; }
    void set_latent_scale(double s) {
        require(s > 0 && std::isfinite(s), ErrorKind::numeric, "latent scale must be positive and finite");
        config_.latent_scale = s;
    }

    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        if (config_.bypass) return out;
        enc_in_.collect("encoder.conv_in", out);
        for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect("encoder.down." + std::to_string(i), out);
        enc_out_.collect("encoder.conv_out", out);
        dec_in_.collect("decoder.conv_in", out);
        for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect("decoder.up." + std::to_string(i), out);
        dec_out_.collect("decoder.conv_out", out);
        return out;
    }

    std::uint64_t checksum() const { return nn::checksum(parameters()); }

    /// Unscaled encoder output for a batch [N,3,H,W]; differentiable.
    Var<T> encode_raw(const Var<T>& x) const {
        check_image_batch(x.shape());
        if (config_.bypass) return constant_bypass_encode(x.value());
        Var<T> h = ag::silu(enc_in_(x));
        for (const auto& d : enc_down_) h = ag::silu(d(h));
        return enc_out_(h);
    }

    /// Decoder output without the final clamp; differentiable.
    Var<T> decode_raw(const Var<T>& z) const {
        check_latent_batch(z.shape());
        if (config_.bypass) return constant_bypass_decode(z.value());
        Var<T> h = ag::silu(dec_in_(z));
        for (const auto& u : dec_up_) h = ag::silu(u(ag::upsample_nearest2x(h)));
        return dec_out_(h);
    }

    /// Deterministic (mean) latent of an image [3,H,W] or batch [N,3,H,W].
    Tensor<T> encode(const Tensor<T>& x) const {
        ag::NoGradGuard no_grad;
        const bool single = x.rank() == 3;
        Tensor<T> z = encode_raw(ag::constant(single ? unsqueeze0(x) : x)).value();
        for (auto& v : z.storage()) v = static_cast<T>(v * config_.latent_scale);
        if (single) z = z.reshaped({z.dim(1), z.dim(2), z.dim(3)});
        return z;
    }

    /// Image of a latent [C,h,w] or batch [N,C,h,w]; values clamped to [-1,1].
    Tensor<T> decode(const Tensor<T>& z) const {
        ag::NoGradGuard no_grad;
        const bool single = z.rank() == 3;
        Tensor<T> zs = single ? unsqueeze0(z) : z;
        for (auto& v : zs.storage()) v = static_cast<T>(v / config_.latent_scale);
        Tensor<T> x = decode_raw(ag::constant(std::move(zs))).value();
        for (auto& v : x.storage()) v = std::clamp(v, T(-1), T(1));
        if (single) x = x.reshaped({3, x.dim(2), x.dim(3)});
        return x;
    }

    /// Encoder activations after every nonlinearity, for perceptual features.
    std::vector<Tensor<T>> encoder_activations(const Tensor<T>& x) const {
        ag::NoGradGuard no_grad;
        std::vector<Tensor<T>> acts;
        Var<T> in = ag::constant(x.rank() == 3 ? unsqueeze0(x) : x);
        check_image_batch(in.shape());
        if (config_.bypass) {
            acts.push_back(constant_bypass_encode(in.value()).value());
            return acts;
        }
        Var<T> h = ag::silu(enc_in_(in));
        acts.push_back(h.value());
        for (const auto& d : enc_down_) {
            h = ag::silu(d(h));
            acts.push_back(h.value());
        }
        return acts;
    }

    void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const {
        io::Container c;
        c.kind = "codec";
        c.meta["config"] = config_;
        c.meta["checksum"] = std::to_string(checksum());
        for (const auto& [k, v] : extra.items()) c.meta[k] = v;
        nn::store_params(c, "", parameters());
        io::save_container(path, c);
    }

    static Codec from_container(const io::Container& c, const std::string& prefix = "") {
        Codec codec(c.meta.at("config").get<CodecConfig>(), 0);
        auto params = codec.parameters();
        nn::load_params(c, prefix, params);
        return codec;
    }

    static Codec load(const std::filesystem::path& path) {
        const io::Container c = io::load_container(path, "codec");
        Codec codec = from_container(c);
        if (c.meta.contains("checksum"))
            require(c.meta.at("checksum").get<std::string>() == std::to_string(codec.checksum()), ErrorKind::checkpoint,
                    "codec checksum mismatch in " + path.string());
        return codec;
    }

private:
    void check_image_batch(const Shape& s) const {
        require(s.size() == 4 && s[1] == 3, ErrorKind::shape, "codec expects [N,3,H,W] images, got " + to_string(s));
        require(s[2] % config_.spatial_factor == 0 && s[3] % config_.spatial_factor == 0, ErrorKind::shape,
                "image size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) + " not divisible by codec factor " +
                    std::to_string(config_.spatial_factor));
    }

    void check_latent_batch(const Shape& s) const {
        require(s.size() == 4 && s[1] == config_.latent_channels, ErrorKind::shape,
                "codec expects [N," + std::to_string(config_.latent_channels) + ",h,w] latents, got " + to_string(s));
    }

    Var<T> constant_bypass_encode(const Tensor<T>& x) const {
        const int n = x.dim(0), f = config_.spatial_factor, h = x.dim(2) / f, w = x.dim(3) / f;
        Tensor<T> z({n, config_.latent_channels, h, w});
        for (int b = 0; b < n; ++b)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    double rgb[3] = {0, 0, 0};
                    for (int c = 0; c < 3; ++c)
                        for (int dy = 0; dy < f; ++dy)
                            for (int dx = 0; dx < f; ++dx) rgb[c] += double(x.at(b, c, y * f + dy, xx * f + dx));
                    for (double& v : rgb) v /= double(f * f);
                    for (int c = 0; c < 3; ++c) z.at(b, c, y, xx) = static_cast<T>(rgb[c]);
                    const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                    for (int c = 3; c < config_.latent_channels; ++c) z.at(b, c, y, xx) = static_cast<T>(luma);
                }
        return ag::constant(std::move(z));
    }

    Var<T> constant_bypass_decode(const Tensor<T>& z) const {
        const int n = z.dim(0), f = config_.spatial_factor, h = z.dim(2), w = z.dim(3);
        Tensor<T> x({n, 3, h * f, w * f});
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < h * f; ++y)
                    for (int xx = 0; xx < w * f; ++xx) x.at(b, c, y, xx) = z.at(b, c, y / f, xx / f);
        return ag::constant(std::move(x));
    }

    CodecConfig config_;
    nn::Conv2d<T> enc_in_;
    std::vector<nn::Conv2d<T>> enc_down_;
    nn::Conv2d<T> enc_out_;
    nn::Conv2d<T> dec_in_;
    std::vector<nn::Conv2d<T>> dec_up_;
    nn::Conv2d<T> dec_out_;
};

struct PretrainConfig {
    int steps = 1500;
    int batch = 8;
    int crop = 32;  // random square crops; 0 uses whole images
    double learning_rate = 2e-3;
    std::uint64_t seed = 0;
    int log_every = 100;
};

struct PretrainResult {
    std::vector<double> losses;
    double latent_std = 1.0;
};

/// Fits the codec to minimise reconstruction MSE on random crops of the
/// corpus, then sets latent_scale = 1 / std(latents). Aborts on divergence.
template <class T>
PretrainResult pretrain_codec(Codec<T>& codec, const std::vector<Tensor<T>>& corpus, const PretrainConfig& cfg,
                              const std::function<void(int, double)>& on_log = {}) {
    require(!corpus.empty(), ErrorKind::data, "codec pretraining needs a non-empty corpus");
    PretrainResult result;
    auto params = codec.parameters();
    nn::Adam<T> opt({cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0, 1.0});
    const int f = codec.config().spatial_factor;
    auto sample_batch = [&](Rng& rng) {
        std::vector<Tensor<T>> crops;
        for (int i = 0; i < cfg.batch; ++i) {
            const Tensor<T>& img = corpus[static_cast<std::size_t>(rng.uniform_int(0, int(corpus.size()) - 1))];
            const int ch = cfg.crop > 0 ? cfg.crop : img.dim(1) / f * f;
            const int cw = cfg.crop > 0 ? cfg.crop : img.dim(2) / f * f;
            require(ch <= img.dim(1) && cw <= img.dim(2), ErrorKind::data, "codec crop larger than corpus image");
            const int y0 = rng.uniform_int(0, img.dim(1) - ch), x0 = rng.uniform_int(0, img.dim(2) - cw);
            Tensor<T> c({1, 3, ch, cw});
            for (int k = 0; k < 3; ++k)
                for (int y = 0; y < ch; ++y)
                    for (int x = 0; x < cw; ++x) c.at(0, k, y, x) = img.at(k, y0 + y, x0 + x);
            crops.push_back(std::move(c));
        }
        return stack_batch<T>(crops);
    };

    if (!params.empty()) {
        FlushDenormals ftz;
        for (int step = 0; step < cfg.steps; ++step) {
            Rng rng(derive_seed(cfg.seed, "codec-batch", static_cast<std::uint64_t>(step)));
            Var<T> x = ag::constant(sample_batch(rng));
            Var<T> loss = ag::mse(codec.decode_raw(codec.encode_raw(x)), x);
            const double lv = double(loss.value()[0]);
            require(std::isfinite(lv), ErrorKind::numeric,
                    "codec pretraining diverged at step " + std::to_string(step) + " (loss is not finite)");
            result.losses.push_back(lv);
            ag::backward(loss);
            opt.step(params);
            if (on_log && (step % std::max(cfg.log_every, 1) == 0 || step + 1 == cfg.steps)) on_log(step, lv);
        }
    }

    // Latent statistics on whole images fix the scale used by the diffusion model.
    double sum = 0, sum2 = 0;
    std::size_t count = 0;
    codec.set_latent_scale(1.0);
    for (const auto& img : corpus) {
        const int h = img.dim(1) / f * f, w = img.dim(2) / f * f;
        Tensor<T> cropped({3, h, w});
        for (int k = 0; k < 3; ++k)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) cropped.at(k, y, x) = img.at(k, y, x);
        const Tensor<T> z = codec.encode(cropped);
        for (T v : z.values()) {
            sum += double(v);
            sum2 += double(v) * double(v);
            ++count;
        }
    }
    const double mean = sum / double(count);
    result.latent_std = std::sqrt(std::max(sum2 / double(count) - mean * mean, 1e-12));
    codec.set_latent_scale(1.0 / result.latent_std);
    return result;
}

}  // namespace stylebrush::codec
