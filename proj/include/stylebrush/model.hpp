#pragma once

// The full stylization model: frozen codec, structure guider, semantic
// encoder, reference UNet and denoising UNet, plus the noise schedule.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "stylebrush/codec.hpp"
#include "stylebrush/denoiser.hpp"
#include "stylebrush/diffusion.hpp"
#include "stylebrush/io/container.hpp"
#include "stylebrush/nn/serialize.hpp"
#include "stylebrush/structure.hpp"
#include "stylebrush/stylenet.hpp"

namespace stylebrush::model {

using ag::Var;

struct DiffusionConfig {
    int steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    diffusion::NoiseSchedule schedule() const { return diffusion::NoiseSchedule::linear(steps, beta_start, beta_end); }
};

inline void to_json(nlohmann::json& j, const DiffusionConfig& c) {
    j = {{"steps", c.steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}
inline void from_json(const nlohmann::json& j, DiffusionConfig& c) {
    c.steps = j.at("steps").get<int>();
    c.beta_start = j.at("beta_start").get<double>();
    c.beta_end = j.at("beta_end").get<double>();
}

struct ModelConfig {
    DiffusionConfig diffusion;
    denoiser::UNetConfig unet;
    structure::GuiderConfig guider;
    stylenet::SemanticConfig semantic;
    /// When false the guider is still built but its output is not added.
    bool inject_structure = true;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"diffusion", c.diffusion},
         {"unet", c.unet},
         {"guider", c.guider},
         {"semantic", c.semantic},
         {"inject_structure", c.inject_structure}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.diffusion = j.at("diffusion").get<DiffusionConfig>();
    c.unet = j.at("unet").get<denoiser::UNetConfig>();
    c.guider = j.at("guider").get<structure::GuiderConfig>();
    c.semantic = j.at("semantic").get<stylenet::SemanticConfig>();
    c.inject_structure = j.at("inject_structure").get<bool>();
}

/// Names of the component groups, in a fixed order.
inline const std::vector<std::string>& component_names() {
    static const std::vector<std::string> names{"codec", "guider", "semantic", "refnet", "denoiser"};
    return names;
}

template <class T>
class StyleBrushModel {
public:
    StyleBrushModel() = default;

    /// Guider gets Gaussian weights and a zero projection; denoiser and
    /// reference net are built from the same seed stream, so they start
    /// identical. The codec is taken as given (already pretrained).
    StyleBrushModel(ModelConfig config, codec::Codec<T> codec, std::uint64_t seed) : config_(std::move(config)) {
        config_.unet.in_channels = codec.config().latent_channels;
        config_.unet.context_dim = config_.semantic.d_model;
        config_.semantic.latent_channels = codec.config().latent_channels;
        config_.guider.out_channels = config_.unet.base_width;
        config_.guider.validate(codec.config().spatial_factor);
        schedule_ = config_.diffusion.schedule();
        codec_ = std::move(codec);
        Rng guider_rng(derive_seed(seed, "guider"));
        guider_ = structure::Guider<T>(config_.guider, guider_rng);
        Rng semantic_rng(derive_seed(seed, "semantic"));
        semantic_ = stylenet::SemanticEncoder<T>(config_.semantic, semantic_rng);
        Rng unet_rng(derive_seed(seed, "unet"));
        denoiser_ = denoiser::UNet<T>(config_.unet, unet_rng);
        Rng ref_rng(derive_seed(seed, "unet"));
        refnet_ = denoiser::UNet<T>(config_.unet, ref_rng);
    }

    const ModelConfig& config() const { return config_; }
    const diffusion::NoiseSchedule& schedule() const { return schedule_; }
    const codec::Codec<T>& codec() const { return codec_; }
    codec::Codec<T>& codec() { return codec_; }
    const structure::Guider<T>& guider() const { return guider_; }
    const stylenet::SemanticEncoder<T>& semantic() const { return semantic_; }
    const denoiser::UNet<T>& denoiser() const { return denoiser_; }
    const denoiser::UNet<T>& refnet() const { return refnet_; }

    /// Image size divisor required by codec and UNet together.
    int required_divisor() const { return codec_.config().spatial_factor * config_.unet.required_divisor(); }

    nn::ParamList<T> component(const std::string& name) const {
        if (name == "codec") return codec_.parameters();
        if (name == "guider") return guider_.parameters();
        if (name == "semantic") return semantic_.parameters();
        if (name == "refnet") return refnet_.parameters();
        if (name == "denoiser") return denoiser_.parameters();
        fail(ErrorKind::config, "unknown model component '" + name + "'");
    }

    /// Every parameter, names prefixed by component.
    nn::ParamList<T> all_parameters() const {
        nn::ParamList<T> out;
        for (const auto& c : component_names())
            for (auto& p : component(c)) out.push_back({c + "." + p.name, p.var});
        return out;
    }

    std::map<std::string, std::uint64_t> checksums() const {
        std::map<std::string, std::uint64_t> out;
        for (const auto& c : component_names()) out[c] = nn::checksum(component(c));
        return out;
    }

    void enable_temporal(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "temporal"));
        denoiser_.enable_temporal(rng);
        config_.unet.temporal_enabled = true;
    }

    // --- conditioning ---------------------------------------------------

    Var<T> tokens(const Var<T>& reference_latent) const { return semantic_(reference_latent); }

    /// Reference-net activations at t = 0 on the clean reference latent.
    stylenet::ReferenceFeatures<T> reference_features(const Var<T>& reference_latent, const Var<T>& tokens) const {
        std::vector<int> zeros(static_cast<std::size_t>(reference_latent.dim(0)), 0);
        return refnet_.reference_forward(reference_latent, zeros, &tokens);
    }

    Var<T> structure_features(const Var<T>& structure_images) const { return guider_(structure_images); }

    /// Noise prediction for z_t. `structure` may be null (injection off).
    Var<T> predict_noise(const Var<T>& z_t, std::span<const int> ts, const Var<T>* structure,
                         const stylenet::ReferenceFeatures<T>* reference, const Var<T>* tokens, int frames = 0) const {
        denoiser::Conditioning<T> cond;
        cond.structure = config_.inject_structure ? structure : nullptr;
        cond.reference = reference;
        cond.tokens = tokens;
        cond.frames = frames;
        return denoiser_.forward(z_t, ts, cond);
    }

    // --- persistence ----------------------------------------------------

    /// Writes weights (codec included) plus optional extra tensors/meta.
    void store(io::Container& c) const {
        c.meta["model"] = config_;
        c.meta["codec"] = {{"config", codec_.config()},
                           {"checksum", std::to_string(codec_.checksum())},
                           {"source", codec_source_}};
        nlohmann::json sums;
        for (const auto& [k, v] : checksums()) sums[k] = std::to_string(v);
        c.meta["checksums"] = sums;
        for (const auto& name : component_names()) nn::store_params(c, name + ".", component(name));
    }

    static StyleBrushModel restore(const io::Container& c) {
        require(c.meta.contains("model") && c.meta.contains("codec"), ErrorKind::checkpoint,
                "checkpoint carries no model description");
        ModelConfig cfg = c.meta.at("model").get<ModelConfig>();
        codec::Codec<T> cod(c.meta.at("codec").at("config").get<codec::CodecConfig>(), 0);
        auto cparams = cod.parameters();
        nn::load_params(c, "codec.", cparams);
        require(std::to_string(cod.checksum()) == c.meta.at("codec").at("checksum").get<std::string>(),
                ErrorKind::checkpoint, "embedded codec weights do not match their recorded checksum");
        const bool temporal = cfg.unet.temporal_enabled;
        cfg.unet.temporal_enabled = false;
        StyleBrushModel m(cfg, std::move(cod), 0);
        if (temporal) m.enable_temporal(0);
        m.codec_source_ = c.meta.at("codec").value("source", "");
        for (const auto& name : component_names()) {
            if (name == "codec") continue;
            auto params = m.component(name);
            nn::load_params(c, name + ".", params);
        }
        return m;
    }

    void set_codec_source(std::string s) { codec_source_ = std::move(s); }
    const std::string& codec_source() const { return codec_source_; }

    /// Attention sites and per-component sizes at a given latent size.
    nlohmann::json architecture(int latent_h, int latent_w) const {
        nlohmann::json sites = nlohmann::json::array();
        for (const auto& s : denoiser_.sites())
            sites.push_back({{"id", s.id},
                             {"level", s.level},
                             {"shape_hwc", {latent_h / s.reduction, latent_w / s.reduction, s.width}},
                             {"fusion", "spatial-attention(width-concat, first-half)"},
                             {"cross_attention_tokens", config_.semantic.n_tokens},
                             {"temporal", config_.unet.temporal_enabled}});
        nlohmann::json params;
        for (const auto& c : component_names()) params[c] = nn::count_parameters(component(c));
        return {{"latent", {codec_.config().latent_channels, latent_h, latent_w}},
                {"structure_injection", "after unet conv_in"},
                {"guider_output", {config_.unet.base_width, latent_h, latent_w}},
                {"sites", sites},
                {"parameters", params}};
    }

private:
    ModelConfig config_;
    diffusion::NoiseSchedule schedule_;
    codec::Codec<T> codec_;
    structure::Guider<T> guider_;
    stylenet::SemanticEncoder<T> semantic_;
    denoiser::UNet<T> refnet_;
    denoiser::UNet<T> denoiser_;
    std::string codec_source_;
};

}  // namespace stylebrush::model
