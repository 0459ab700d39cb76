#pragma once

// Style branch building blocks: the spatial-attention fusion rule shared by
// the denoiser's attention sites, per-site reference feature caches, and the
// semantic encoder whose tokens feed every cross-attention layer.

#include <map>
#include <string>

#include <json.hpp>

#include "stylebrush/autograd/ops.hpp"
#include "stylebrush/nn/layers.hpp"

namespace stylebrush::stylenet {

using ag::Var;

/// Per-site activation [N,h,w,c] (channel-last).
template <class T>
struct FeatureMap {
    Var<T> data;
    std::string site_id;
};

/// Site id -> reference activation x2 [N,h,w,c] captured from the
/// reference pass. Computed once per reference and reused for every step.
template <class T>
using ReferenceFeatures = std::map<std::string, Var<T>>;

template <class T>
std::uint64_t content_hash(const ReferenceFeatures<T>& feats) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [id, v] : feats) {
        h = fnv1a64(id.data(), id.size(), h);
        h = checksum(v.value(), h);
    }
    return h;
}

/// Spatial-attention fusion of x1 (denoiser) with x2 (reference), both
/// [N,h,w,c]: concatenate along width to [N,h,2w,c], run self-attention over
/// all 2hw positions, and keep the first half along width.
template <class T>
Var<T> fuse_spatial(const Var<T>& x1, const Var<T>& x2, const nn::Attention<T>& attn) {
    require(x1.shape() == x2.shape() && x1.shape().size() == 4, ErrorKind::shape,
            "fuse_spatial: x1 " + to_string(x1.shape()) + " and x2 " + to_string(x2.shape()) + " must match");
    const int n = x1.dim(0), h = x1.dim(1), w = x1.dim(2), c = x1.dim(3);
    Var<T> joined = ag::concat<T>({x1, x2}, 2);
    Var<T> seq = ag::reshape(joined, {n, h * 2 * w, c});
    Var<T> attended = ag::reshape(attn(seq), {n, h, 2 * w, c});
    return ag::slice(attended, 2, 0, w);
}

struct SemanticConfig {
    int latent_channels = 4;
    int hidden_channels = 32;
    int n_tokens = 8;
    int d_model = 64;
};

inline void to_json(nlohmann::json& j, const SemanticConfig& c) {
    j = {{"latent_channels", c.latent_channels}, {"hidden_channels", c.hidden_channels}, {"n_tokens", c.n_tokens},
         {"d_model", c.d_model}};
}
inline void from_json(const nlohmann::json& j, SemanticConfig& c) {
    c.latent_channels = j.at("latent_channels").get<int>();
    c.hidden_channels = j.at("hidden_channels").get<int>();
    c.n_tokens = j.at("n_tokens").get<int>();
    c.d_model = j.at("d_model").get<int>();
}

/// Trainable stand-in for the image encoder that conditions cross-attention.
/// It reads codec latents, so its input space is the codec's latent space:
/// two convolutions, global average pooling, and a projection to
/// n_tokens x d_model.
template <class T>
class SemanticEncoder {
public:
    SemanticEncoder() = default;

    SemanticEncoder(SemanticConfig config, Rng& rng) : config_(config) {
        conv1_ = nn::Conv2d<T>::same(config_.latent_channels, config_.hidden_channels, 3, rng);
        conv2_ = nn::Conv2d<T>(config_.hidden_channels, config_.hidden_channels, 3, 2, 1, 1, rng);
        proj_ = nn::Linear<T>(2 * config_.hidden_channels, config_.n_tokens * config_.d_model, rng);
        norm_ = nn::LayerNorm<T>(config_.d_model);
    }

    const SemanticConfig& config() const { return config_; }

    /// z: [N,latent_channels,h,w] -> tokens [N,n_tokens,d_model].
    Var<T> operator()(const Var<T>& z) const {
        require(z.shape().size() == 4 && z.dim(1) == config_.latent_channels, ErrorKind::shape,
                "semantic encoder expects [N," + std::to_string(config_.latent_channels) + ",h,w] latents");
        Var<T> h1 = ag::silu(conv1_(z));
        Var<T> h2 = ag::silu(conv2_(h1));
        // Pool both scales so fine colour statistics survive the stride.
        Var<T> pooled = ag::concat<T>({ag::mean_spatial(h1), ag::mean_spatial(h2)}, 1);
        Var<T> tokens = ag::reshape(proj_(pooled), {z.dim(0), config_.n_tokens, config_.d_model});
        return norm_(tokens);
    }

    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        conv1_.collect("conv1", out);
        conv2_.collect("conv2", out);
        proj_.collect("proj", out);
        norm_.collect("norm", out);
        return out;
    }

private:
    SemanticConfig config_;
    nn::Conv2d<T> conv1_;
    nn::Conv2d<T> conv2_;
    nn::Linear<T> proj_;
    nn::LayerNorm<T> norm_;
};

}  // namespace stylebrush::stylenet
