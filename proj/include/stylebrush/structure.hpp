#pragma once

// Structure representation: grayscale conversion followed by a randomly
// ordered chain of MinFilter, GaussianBlur and BoxBlur, plus the Structure
// Guider network that turns the structure image into features at latent
// resolution.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylebrush/autograd/ops.hpp"
#include "stylebrush/core/rng.hpp"
#include "stylebrush/nn/layers.hpp"

namespace stylebrush::structure {

using ag::Var;

// ITU-R BT.601 luma weights.
inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

/// Luma of a [3,H,W] image replicated into all three channels.
template <class T>
Tensor<T> to_grayscale(const Tensor<T>& x) {
    require(x.rank() == 3 && x.dim(0) == 3, ErrorKind::shape, "to_grayscale expects a [3,H,W] image, got " + to_string(x.shape()));
    const int h = x.dim(1), w = x.dim(2);
    Tensor<T> out(x.shape());
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            const T r = x.at(0, y, xx), g = x.at(1, y, xx), b = x.at(2, y, xx);
            // Already-gray pixels are returned untouched so gray images are exact fixed points.
            const T v = (r == g && g == b) ? r : static_cast<T>(kLumaR * r + kLumaG * g + kLumaB * b);
            for (int c = 0; c < 3; ++c) out.at(c, y, xx) = v;
        }
    return out;
}

enum class BlurKind { min_filter, gaussian, box };

inline const char* to_string(BlurKind k) {
    switch (k) {
        case BlurKind::min_filter: return "min";
        case BlurKind::gaussian: return "gauss";
        case BlurKind::box: return "box";
    }
    return "?";
}

inline BlurKind blur_kind_from_string(const std::string& s) {
    if (s == "min" || s == "MinFilter") return BlurKind::min_filter;
    if (s == "gauss" || s == "gaussian" || s == "GaussianBlur") return BlurKind::gaussian;
    if (s == "box" || s == "BoxBlur") return BlurKind::box;
    fail(ErrorKind::usage, "unknown blur kind '" + s + "' (expected min, gauss or box)");
}

struct BlurStage {
    BlurKind kind = BlurKind::box;
    int size = 3;  // odd window width
    double sigma = 0.75;  // Gaussian only: size / 4
};

struct BlurConfig {
    int min_size = 3;
    int max_size = 9;
    double sigma_ratio = 0.25;

    void validate() const {
        require(min_size >= 1 && min_size % 2 == 1 && max_size % 2 == 1 && min_size <= max_size, ErrorKind::config,
                "blur size range must have odd bounds with min <= max");
    }
};

inline void to_json(nlohmann::json& j, const BlurConfig& c) {
    j = {{"min_size", c.min_size}, {"max_size", c.max_size}, {"sigma_ratio", c.sigma_ratio}};
}
inline void from_json(const nlohmann::json& j, BlurConfig& c) {
    c.min_size = j.at("min_size").get<int>();
    c.max_size = j.at("max_size").get<int>();
    c.sigma_ratio = j.at("sigma_ratio").get<double>();
}

struct BlurChain {
    std::array<BlurStage, 3> stages{};
    std::uint64_t seed = 0;

    /// Each kind must appear exactly once with an odd window.
    void validate() const {
        std::array<int, 3> seen{};
        for (const auto& s : stages) {
            ++seen[static_cast<std::size_t>(s.kind)];
            require(s.size >= 1 && s.size % 2 == 1, ErrorKind::usage, "blur window sizes must be odd and positive");
        }
        require(seen == std::array<int, 3>{1, 1, 1}, ErrorKind::usage, "blur chain must use each filter kind exactly once");
    }

    /// Compact form such as "min:5,gauss:7,box:3".
    std::string spec() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < stages.size(); ++i) os << (i ? "," : "") << to_string(stages[i].kind) << ':' << stages[i].size;
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["spec"] = spec();
        for (const auto& s : stages) j["stages"].push_back({{"kind", to_string(s.kind)}, {"size", s.size}, {"sigma", s.sigma}});
        return j;
    }

    static BlurChain parse(const std::string& spec, double sigma_ratio = 0.25) {
        BlurChain chain;
        std::istringstream is(spec);
        std::string item;
        std::size_t i = 0;
        while (std::getline(is, item, ',')) {
            require(i < 3, ErrorKind::usage, "blur chain spec must have exactly three stages: " + spec);
            const auto colon = item.find(':');
            require(colon != std::string::npos, ErrorKind::usage, "blur stage must look like kind:size, got '" + item + "'");
            BlurStage s;
            s.kind = blur_kind_from_string(item.substr(0, colon));
            try {
                s.size = std::stoi(item.substr(colon + 1));
            } catch (const std::exception&) {
                fail(ErrorKind::usage, "bad blur window size in '" + item + "'");
            }
            s.sigma = s.size * sigma_ratio;
            chain.stages[i++] = s;
        }
        require(i == 3, ErrorKind::usage, "blur chain spec must have exactly three stages: " + spec);
        chain.validate();
        return chain;
    }
};

/// Random permutation of the three kinds with independent odd sizes drawn
/// uniformly from the configured range; a pure function of the seed.
inline BlurChain sample_blur_chain(std::uint64_t seed, const BlurConfig& config = {}) {
    config.validate();
    Rng rng(derive_seed(seed, "blur-chain"));
    std::array<BlurKind, 3> kinds{BlurKind::min_filter, BlurKind::gaussian, BlurKind::box};
    for (int i = 2; i > 0; --i) std::swap(kinds[static_cast<std::size_t>(i)], kinds[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    BlurChain chain;
    chain.seed = seed;
    const int choices = (config.max_size - config.min_size) / 2;
    for (std::size_t i = 0; i < 3; ++i) {
        BlurStage s;
        s.kind = kinds[i];
        s.size = config.min_size + 2 * rng.uniform_int(0, choices);
        s.sigma = s.size * config.sigma_ratio;
        chain.stages[i] = s;
    }
    return chain;
}

namespace detail {

// 1-D filters along one axis of an [H,W] plane with edge replication.
// Weighted filters are evaluated as center + sum w_i (x_i - center) and
// clamped to the window's range, so constants are reproduced bit-exactly
// and outputs never leave the input range.
template <class T>
void filter_axis(std::vector<T>& plane, int h, int w, bool horizontal, const BlurStage& stage) {
    const int r = stage.size / 2;
    std::vector<double> weights(static_cast<std::size_t>(stage.size), 1.0 / stage.size);
    if (stage.kind == BlurKind::gaussian) {
        double total = 0;
        for (int k = -r; k <= r; ++k) {
            const double v = std::exp(-0.5 * k * k / (stage.sigma * stage.sigma));
            weights[static_cast<std::size_t>(k + r)] = v;
            total += v;
        }
        for (double& v : weights) v /= total;
    }
    std::vector<T> out(plane.size());
    const int len = horizontal ? w : h, lines = horizontal ? h : w;
    for (int line = 0; line < lines; ++line)
        for (int i = 0; i < len; ++i) {
            auto at = [&](int j) {
                j = std::clamp(j, 0, len - 1);
                return horizontal ? plane[static_cast<std::size_t>(line) * w + j] : plane[static_cast<std::size_t>(j) * w + line];
            };
            const T center = at(i);
            T lo = center, hi = center;
            double acc = 0;
            for (int k = -r; k <= r; ++k) {
                const T v = at(i + k);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                acc += weights[static_cast<std::size_t>(k + r)] * (double(v) - double(center));
            }
            const T result = stage.kind == BlurKind::min_filter ? lo : std::clamp(static_cast<T>(double(center) + acc), lo, hi);
            (horizontal ? out[static_cast<std::size_t>(line) * w + i] : out[static_cast<std::size_t>(i) * w + line]) = result;
        }
    plane.swap(out);
}

}  // namespace detail

/// Applies one stage to an [H,W] plane. All three filters are separable.
template <class T>
void apply_stage(std::vector<T>& plane, int h, int w, const BlurStage& stage) {
    detail::filter_axis(plane, h, w, true, stage);
    detail::filter_axis(plane, h, w, false, stage);
}

template <class T>
struct StructureImage {
    Tensor<T> data;  // [3,H,W], identical channels
    std::uint64_t source_seed = 0;
};

/// Grayscale then the chain's three filters in order.
template <class T>
StructureImage<T> extract_structure(const Tensor<T>& x, const BlurChain& chain) {
    chain.validate();
    const Tensor<T> gray = to_grayscale(x);
    const int h = x.dim(1), w = x.dim(2);
    std::vector<T> plane(gray.data(), gray.data() + static_cast<std::size_t>(h) * w);
    for (const auto& stage : chain.stages) apply_stage(plane, h, w, stage);
    Tensor<T> out({3, h, w});
    for (int c = 0; c < 3; ++c) std::copy(plane.begin(), plane.end(), out.data() + static_cast<std::size_t>(c) * h * w);
    return {std::move(out), chain.seed};
}

struct GuiderConfig {
    std::vector<int> channels{16, 32, 64, 256};
    int kernel = 4;
    /// Per-layer strides; their product must equal the codec's spatial factor.
    std::vector<int> strides{2, 2, 1, 1};
    int out_channels = 32;  // UNet base width
    int in_channels = 3;

    void validate(int spatial_factor) const {
        require(channels.size() == 4 && strides.size() == 4, ErrorKind::config, "structure guider has exactly four layers");
        int prod = 1;
        for (int s : strides) {
            require(s == 1 || s == 2, ErrorKind::config, "guider strides must be 1 or 2");
            prod *= s;
        }
        require(prod == spatial_factor, ErrorKind::config,
                "guider stride product " + std::to_string(prod) + " must equal the codec spatial factor " +
                    std::to_string(spatial_factor));
        require(kernel % 2 == 0, ErrorKind::config, "guider kernel must be even (4x4 by default)");
    }

    int reduction() const {
        int p = 1;
        for (int s : strides) p *= s;
        return p;
    }
};

inline void to_json(nlohmann::json& j, const GuiderConfig& c) {
    j = {{"channels", c.channels}, {"kernel", c.kernel}, {"strides", c.strides}, {"out_channels", c.out_channels},
         {"in_channels", c.in_channels}};
}
inline void from_json(const nlohmann::json& j, GuiderConfig& c) {
    c.channels = j.at("channels").get<std::vector<int>>();
    c.kernel = j.at("kernel").get<int>();
    c.strides = j.at("strides").get<std::vector<int>>();
    c.out_channels = j.at("out_channels").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
}

/// Four 4x4 convolutions with SiLU, then a zero-initialised 1x1 projection.
template <class T>
class Guider {
public:
    Guider() = default;

    Guider(GuiderConfig config, Rng& rng) : config_(std::move(config)) {
        int in = config_.in_channels;
        const int k = config_.kernel;
        for (std::size_t i = 0; i < config_.channels.size(); ++i) {
            const int s = config_.strides[i];
            // Stride 2 halves the size with symmetric padding; stride 1 keeps it.
            const int lo = s == 2 ? (k - 2) / 2 : (k - 1) / 2;
            const int hi = s == 2 ? (k - 2) / 2 : k / 2;
            layers_.push_back(nn::Conv2d<T>(in, config_.channels[i], k, s, lo, hi, rng));
            in = config_.channels[i];
        }
        projection_ = nn::Conv2d<T>(in, config_.out_channels, 1, 1, 0, 0, rng, /*zero=*/true);
    }

    const GuiderConfig& config() const { return config_; }

    /// s: [N,3,H,W] structure images -> [N,out_channels,H/r,W/r].
    Var<T> operator()(const Var<T>& s) const {
        const Shape& sh = s.shape();
        const int r = config_.reduction();
        require(sh.size() == 4 && sh[1] == config_.in_channels, ErrorKind::shape, "guider expects [N,3,H,W] input");
        require(sh[2] % r == 0 && sh[3] % r == 0, ErrorKind::shape,
                "structure image size not divisible by guider reduction " + std::to_string(r));
        Var<T> h = s;
        for (const auto& l : layers_) h = ag::silu(l(h));
        return projection_(h);
    }

    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("layers." + std::to_string(i), out);
        projection_.collect("projection", out);
        return out;
    }

    const nn::Conv2d<T>& projection() const { return projection_; }

private:
    GuiderConfig config_;
    std::vector<nn::Conv2d<T>> layers_;
    nn::Conv2d<T> projection_;
};

}  // namespace stylebrush::structure
