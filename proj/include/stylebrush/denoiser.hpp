#pragma once

// Noise-prediction UNet. The same class serves as the denoiser and, run in
// reference mode, as ReferenceNet: at every attention site the reference pass
// records its normalised activations, and the denoising pass fuses them with
// its own through spatial attention.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylebrush/autograd/ops.hpp"
#include "stylebrush/diffusion.hpp"
#include "stylebrush/nn/layers.hpp"
#include "stylebrush/stylenet.hpp"

namespace stylebrush::denoiser {

using ag::Var;
using stylenet::ReferenceFeatures;

struct UNetConfig {
    int in_channels = 4;
    int base_width = 32;
    std::vector<int> channel_mult{1, 2};
    std::vector<int> attention_levels{1};
    int heads = 4;
    int n_res_blocks = 1;
    int context_dim = 64;
    int groups = 8;
    bool temporal_enabled = false;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int width(int level) const { return base_width * channel_mult[static_cast<std::size_t>(level)]; }
    int temb_dim() const { return 4 * base_width; }
    bool has_attention(int level) const {
        return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
    }
    /// Latent dimensions must be divisible by this.
    int required_divisor() const { return 1 << (levels() - 1); }

    void validate() const {
        require(in_channels > 0 && base_width > 0 && n_res_blocks > 0 && heads > 0 && groups > 0, ErrorKind::config,
                "unet sizes must be positive");
        require(!channel_mult.empty(), ErrorKind::config, "unet needs at least one resolution");
        for (int l = 0; l < levels(); ++l) {
            require(width(l) % groups == 0, ErrorKind::config, "unet widths must be divisible by groups");
            require(width(l) % heads == 0, ErrorKind::config, "unet widths must be divisible by heads");
        }
        for (int l : attention_levels) require(0 <= l && l < levels(), ErrorKind::config, "attention level out of range");
        require(base_width % 2 == 0, ErrorKind::config, "unet base width must be even");
    }
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = {{"in_channels", c.in_channels},   {"base_width", c.base_width},     {"channel_mult", c.channel_mult},
         {"attention_levels", c.attention_levels}, {"heads", c.heads},     {"n_res_blocks", c.n_res_blocks},
         {"context_dim", c.context_dim}, {"groups", c.groups},             {"temporal_enabled", c.temporal_enabled}};
}
inline void from_json(const nlohmann::json& j, UNetConfig& c) {
    c.in_channels = j.at("in_channels").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
    c.heads = j.at("heads").get<int>();
    c.n_res_blocks = j.at("n_res_blocks").get<int>();
    c.context_dim = j.at("context_dim").get<int>();
    c.groups = j.at("groups").get<int>();
    c.temporal_enabled = j.at("temporal_enabled").get<bool>();
}

// ---------------------------------------------------------------------------
// Temporal layout

/// [b,t,h,w,c] -> [(b*h*w), t, c].
template <class T>
Tensor<T> temporal_reshape(const Tensor<T>& x) {
    require(x.rank() == 5, ErrorKind::shape, "temporal_reshape expects [b,t,h,w,c]");
    const int b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
    return ag::permute_tensor(x, {0, 2, 3, 1, 4}).reshaped({b * h * w, t, c});
}

/// Inverse of temporal_reshape.
template <class T>
Tensor<T> temporal_unreshape(const Tensor<T>& x, int b, int h, int w) {
    require(x.rank() == 3 && x.dim(0) == b * h * w, ErrorKind::shape, "temporal_unreshape: leading axis mismatch");
    const int t = x.dim(1), c = x.dim(2);
    return ag::permute_tensor(x.reshaped({b, h, w, t, c}), {0, 3, 1, 2, 4});
}

template <class T>
Var<T> temporal_reshape(const Var<T>& x) {
    const int b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
    return ag::reshape(ag::permute(x, {0, 2, 3, 1, 4}), {b * h * w, t, c});
}

template <class T>
Var<T> temporal_unreshape(const Var<T>& x, int b, int h, int w) {
    const int t = x.dim(1), c = x.dim(2);
    return ag::permute(ag::reshape(x, {b, h, w, t, c}), {0, 3, 1, 2, 4});
}

/// Attention across frames at every spatial location, with sinusoidal frame
/// positions and a zero-initialised output projection, added residually.
template <class T>
struct TemporalAttention {
    nn::LayerNorm<T> norm;
    nn::Attention<T> attn;

    TemporalAttention() = default;
    TemporalAttention(int width, int heads, Rng& rng) : norm(width), attn(width, width, heads, rng, /*zero_out=*/true) {}

    /// x: [b,t,h,w,c] video features -> same shape.
    Var<T> operator()(const Var<T>& x) const {
        require(x.shape().size() == 5, ErrorKind::shape, "temporal attention expects [b,t,h,w,c]");
        const int b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
        Var<T> seq = temporal_reshape(x);
        std::vector<int> frame_ids(static_cast<std::size_t>(t));
        for (int i = 0; i < t; ++i) frame_ids[static_cast<std::size_t>(i)] = i;
        const Tensor<T> pe = diffusion::sinusoidal_embedding<T>(frame_ids, c);
        Tensor<T> tiled({b * h * w, t, c});
        for (int s = 0; s < b * h * w; ++s) std::copy(pe.data(), pe.data() + pe.size(), tiled.data() + static_cast<std::size_t>(s) * pe.size());
        Var<T> attended = attn(norm(ag::add(seq, ag::constant(std::move(tiled)))));
        return ag::add(x, temporal_unreshape(attended, b, h, w));
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) const {
        norm.collect(prefix + ".norm", out);
        attn.collect(prefix + ".attn", out);
    }
};

// ---------------------------------------------------------------------------
// Blocks

template <class T>
struct ResBlock {
    nn::GroupNorm<T> norm1, norm2;
    nn::Conv2d<T> conv1, conv2;
    nn::Linear<T> temb_proj;
    std::optional<nn::Conv2d<T>> skip;

    ResBlock() = default;
    ResBlock(int in, int out, int temb, int groups, Rng& rng)
        : norm1(in, groups),
          norm2(out, groups),
          conv1(nn::Conv2d<T>::same(in, out, 3, rng)),
          conv2(nn::Conv2d<T>::same(out, out, 3, rng)),
          temb_proj(temb, out, rng) {
        if (in != out) skip = nn::Conv2d<T>(in, out, 1, 1, 0, 0, rng);
    }

    Var<T> operator()(const Var<T>& x, const Var<T>& temb_act) const {
        Var<T> h = conv1(ag::silu(norm1(x)));
        h = ag::add_per_channel(h, temb_proj(temb_act));
        h = conv2(ag::silu(norm2(h)));
        return ag::add(skip ? (*skip)(x) : x, h);
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) const {
        norm1.collect(prefix + ".norm1", out);
        conv1.collect(prefix + ".conv1", out);
        temb_proj.collect(prefix + ".temb_proj", out);
        norm2.collect(prefix + ".norm2", out);
        conv2.collect(prefix + ".conv2", out);
        if (skip) skip->collect(prefix + ".skip", out);
    }
};

template <class T>
struct Conditioning {
    /// Structure-guider features added after the input convolution.
    const Var<T>* structure = nullptr;
    /// Reference activations per site; enables spatial-attention fusion.
    const ReferenceFeatures<T>* reference = nullptr;
    /// Semantic tokens [N or 1, n_tokens, context_dim] for cross-attention.
    const Var<T>* tokens = nullptr;
    /// When > 0 the batch is b videos of this many consecutive frames and
    /// temporal layers run.
    int frames = 0;
};

namespace detail {
template <class T>
Var<T> match_batch(const Var<T>& v, int n, const char* what) {
    if (v.dim(0) == n) return v;
    require(v.dim(0) == 1, ErrorKind::shape, std::string(what) + ": batch size mismatch");
    return ag::repeat_batch(v, n);
}
}  // namespace detail

/// Attention site: self-attention (fused with the reference when available),
/// cross-attention to semantic tokens, optional temporal attention, and a
/// feed-forward layer, all residual and channel-last.
template <class T>
struct TransformerBlock {
    std::string site_id;
    nn::LayerNorm<T> norm1, norm2, norm3;
    nn::Attention<T> self_attn, cross_attn;
    nn::Linear<T> ff1, ff2;
    std::optional<TemporalAttention<T>> temporal;

    TransformerBlock() = default;
    TransformerBlock(std::string id, int width, int context_dim, int heads, bool with_temporal, Rng& rng)
        : site_id(std::move(id)),
          norm1(width),
          norm2(width),
          norm3(width),
          self_attn(width, width, heads, rng),
          cross_attn(width, context_dim, heads, rng),
          ff1(width, 4 * width, rng),
          ff2(4 * width, width, rng) {
        if (with_temporal) temporal.emplace(width, heads, rng);
    }

    Var<T> operator()(const Var<T>& x, const Conditioning<T>& cond, ReferenceFeatures<T>* capture) const {
        const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        Var<T> tokens = ag::permute(x, {0, 2, 3, 1});
        Var<T> n1 = norm1(tokens);
        if (capture) (*capture)[site_id] = n1;

        Var<T> attended;
        if (cond.reference) {
            auto it = cond.reference->find(site_id);
            require(it != cond.reference->end(), ErrorKind::shape, "reference features missing site '" + site_id + "'");
            Var<T> x2 = detail::match_batch(it->second, n, "reference features");
            attended = stylenet::fuse_spatial(n1, x2, self_attn);
        } else {
            attended = ag::reshape(self_attn(ag::reshape(n1, {n, h * w, c})), {n, h, w, c});
        }
        tokens = ag::add(tokens, attended);

        if (cond.tokens) {
            Var<T> ctx = detail::match_batch(*cond.tokens, n, "semantic tokens");
            Var<T> q = ag::reshape(norm2(tokens), {n, h * w, c});
            tokens = ag::add(tokens, ag::reshape(cross_attn(q, ctx), {n, h, w, c}));
        }

        if (cond.frames > 0) {
            require(temporal.has_value(), ErrorKind::usage, "temporal layer invoked while temporal attention is disabled");
            require(n % cond.frames == 0, ErrorKind::shape, "batch is not a whole number of videos");
            Var<T> video = ag::reshape(tokens, {n / cond.frames, cond.frames, h, w, c});
            tokens = ag::reshape((*temporal)(video), {n, h, w, c});
        }

        tokens = ag::add(tokens, ff2(ag::silu(ff1(norm3(tokens)))));
        return ag::permute(tokens, {0, 3, 1, 2});
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) const {
        norm1.collect(prefix + ".norm1", out);
        self_attn.collect(prefix + ".self_attn", out);
        norm2.collect(prefix + ".norm2", out);
        cross_attn.collect(prefix + ".cross_attn", out);
        if (temporal) temporal->collect(prefix + ".temporal", out);
        norm3.collect(prefix + ".norm3", out);
        ff1.collect(prefix + ".ff1", out);
        ff2.collect(prefix + ".ff2", out);
    }
};

struct SiteInfo {
    std::string id;
    int level = 0;
    int width = 0;
    int reduction = 1;  // spatial reduction relative to the latent
};

template <class T>
class UNet {
public:
    UNet() = default;

    UNet(UNetConfig config, Rng& rng) : config_(std::move(config)) {
        config_.validate();
        const int temb = config_.temb_dim();
        const int g = config_.groups;
        time1_ = nn::Linear<T>(config_.base_width, temb, rng);
        time2_ = nn::Linear<T>(temb, temb, rng);
        conv_in_ = nn::Conv2d<T>::same(config_.in_channels, config_.base_width, 3, rng);

        std::vector<int> skip_widths{config_.base_width};
        int ch = config_.base_width;
        for (int l = 0; l < config_.levels(); ++l) {
            Level lv;
            for (int i = 0; i < config_.n_res_blocks; ++i) {
                lv.res.emplace_back(ch, config_.width(l), temb, g, rng);
                ch = config_.width(l);
                if (config_.has_attention(l))
                    lv.attn.emplace_back(TransformerBlock<T>("down." + std::to_string(l) + "." + std::to_string(i), ch,
                                                             config_.context_dim, config_.heads, config_.temporal_enabled, rng));
                else
                    lv.attn.emplace_back(std::nullopt);
                skip_widths.push_back(ch);
            }
            if (l + 1 < config_.levels()) {
                lv.resample = nn::Conv2d<T>(ch, ch, 3, 2, 1, 1, rng);
                skip_widths.push_back(ch);
            }
            down_.push_back(std::move(lv));
        }

        mid_res1_ = ResBlock<T>(ch, ch, temb, g, rng);
        mid_attn_ = TransformerBlock<T>("mid", ch, config_.context_dim, config_.heads, config_.temporal_enabled, rng);
        mid_res2_ = ResBlock<T>(ch, ch, temb, g, rng);

        up_.resize(static_cast<std::size_t>(config_.levels()));
        for (int l = config_.levels() - 1; l >= 0; --l) {
            Level& lv = up_[static_cast<std::size_t>(l)];
            for (int i = 0; i <= config_.n_res_blocks; ++i) {
                const int skip = skip_widths.back();
                skip_widths.pop_back();
                lv.res.emplace_back(ch + skip, config_.width(l), temb, g, rng);
                ch = config_.width(l);
                if (config_.has_attention(l))
                    lv.attn.emplace_back(TransformerBlock<T>("up." + std::to_string(l) + "." + std::to_string(i), ch,
                                                             config_.context_dim, config_.heads, config_.temporal_enabled, rng));
                else
                    lv.attn.emplace_back(std::nullopt);
            }
            if (l > 0) lv.resample = nn::Conv2d<T>::same(ch, ch, 3, rng);
        }

        out_norm_ = nn::GroupNorm<T>(ch, g);
        conv_out_ = nn::Conv2d<T>::same(ch, config_.in_channels, 3, rng, /*zero=*/true);
    }

    const UNetConfig& config() const { return config_; }

    /// Attention sites in execution order.
    std::vector<SiteInfo> sites() const {
        std::vector<SiteInfo> out;
        for (int l = 0; l < config_.levels(); ++l)
            for (const auto& a : down_[static_cast<std::size_t>(l)].attn)
                if (a) out.push_back({a->site_id, l, config_.width(l), 1 << l});
        const int last = config_.levels() - 1;
        out.push_back({"mid", last, config_.width(last), 1 << last});
        for (int l = last; l >= 0; --l)
            for (const auto& a : up_[static_cast<std::size_t>(l)].attn)
                if (a) out.push_back({a->site_id, l, config_.width(l), 1 << l});
        return out;
    }

    /// Noise prediction with the shape of z [N,C,h,w].
    Var<T> forward(const Var<T>& z, std::span<const int> ts, const Conditioning<T>& cond) const {
        return run(z, ts, cond, nullptr);
    }

    /// Reference pass: records the normalised input of every self-attention
    /// site and stops after the last one.
    ReferenceFeatures<T> reference_forward(const Var<T>& z, std::span<const int> ts, const Var<T>* tokens) const {
        ReferenceFeatures<T> feats;
        Conditioning<T> cond;
        cond.tokens = tokens;
        run(z, ts, cond, &feats);
        return feats;
    }

    nn::ParamList<T> parameters() const { return collect(false); }

    /// Parameters that influence the reference pass (everything up to and
    /// including the last attention site).
    nn::ParamList<T> reference_parameters() const { return collect(true); }

    /// Adds identity temporal layers (zero output projection) to every site.
    void enable_temporal(Rng& rng) {
        if (config_.temporal_enabled) return;
        config_.temporal_enabled = true;
        auto add = [&](TransformerBlock<T>& b, int width) {
            if (!b.temporal) b.temporal.emplace(width, config_.heads, rng);
        };
        for (int l = 0; l < config_.levels(); ++l) {
            for (auto& a : down_[static_cast<std::size_t>(l)].attn)
                if (a) add(*a, config_.width(l));
            for (auto& a : up_[static_cast<std::size_t>(l)].attn)
                if (a) add(*a, config_.width(l));
        }
        add(mid_attn_, config_.width(config_.levels() - 1));
    }

private:
    struct Level {
        std::vector<ResBlock<T>> res;
        std::vector<std::optional<TransformerBlock<T>>> attn;
        std::optional<nn::Conv2d<T>> resample;
    };

    std::string last_site() const { return sites().back().id; }

    Var<T> run(const Var<T>& z, std::span<const int> ts, const Conditioning<T>& cond, ReferenceFeatures<T>* capture) const {
        const Shape& s = z.shape();
        require(s.size() == 4 && s[1] == config_.in_channels, ErrorKind::shape,
                "unet expects [N," + std::to_string(config_.in_channels) + ",h,w] latents, got " + to_string(s));
        const int div = config_.required_divisor();
        require(s[2] % div == 0 && s[3] % div == 0, ErrorKind::shape,
                "latent size not divisible by " + std::to_string(div));
        require(ts.size() == static_cast<std::size_t>(s[0]), ErrorKind::shape, "unet needs one timestep per batch item");
        const int n = s[0];
        const std::string stop_at = capture ? last_site() : std::string();

        Var<T> temb = time2_(ag::silu(time1_(ag::constant(diffusion::sinusoidal_embedding<T>(ts, config_.base_width)))));
        Var<T> temb_act = ag::silu(temb);

        Var<T> h = conv_in_(z);
        if (cond.structure) {
            Var<T> g = detail::match_batch(*cond.structure, n, "structure features");
            require(g.shape() == h.shape(), ErrorKind::shape,
                    "structure features " + to_string(g.shape()) + " do not match " + to_string(h.shape()));
            h = ag::add(h, g);
        }

        auto site = [&](const TransformerBlock<T>& block, const Var<T>& x, bool& done) {
            Var<T> y = block(x, cond, capture);
            if (capture && block.site_id == stop_at) done = true;
            return y;
        };

        bool done = false;
        std::vector<Var<T>> skips{h};
        for (const auto& lv : down_) {
            for (std::size_t i = 0; i < lv.res.size(); ++i) {
                h = lv.res[i](h, temb_act);
                if (lv.attn[i]) h = site(*lv.attn[i], h, done);
                if (done) return h;
                skips.push_back(h);
            }
            if (lv.resample) {
                h = (*lv.resample)(h);
                skips.push_back(h);
            }
        }

        h = mid_res1_(h, temb_act);
        h = site(mid_attn_, h, done);
        if (done) return h;
        h = mid_res2_(h, temb_act);

        for (int l = config_.levels() - 1; l >= 0; --l) {
            const Level& lv = up_[static_cast<std::size_t>(l)];
            for (std::size_t i = 0; i < lv.res.size(); ++i) {
                h = lv.res[i](ag::concat<T>({h, skips.back()}, 1), temb_act);
                skips.pop_back();
                if (lv.attn[i]) h = site(*lv.attn[i], h, done);
                if (done) return h;
            }
            if (lv.resample) h = (*lv.resample)(ag::upsample_nearest2x(h));
        }
        return conv_out_(ag::silu(out_norm_(h)));
    }

    nn::ParamList<T> collect(bool reference_only) const {
        nn::ParamList<T> out;
        const std::string stop_at = last_site();
        bool done = false;
        time1_.collect("time_embed.0", out);
        time2_.collect("time_embed.1", out);
        conv_in_.collect("conv_in", out);
        auto visit_level = [&](const Level& lv, const std::string& prefix) {
            for (std::size_t i = 0; i < lv.res.size() && !done; ++i) {
                lv.res[i].collect(prefix + ".res." + std::to_string(i), out);
                if (lv.attn[i]) {
                    lv.attn[i]->collect(prefix + ".attn." + std::to_string(i), out);
                    if (reference_only && lv.attn[i]->site_id == stop_at) done = true;
                }
            }
            if (lv.resample && !done) lv.resample->collect(prefix + ".resample", out);
        };
        for (int l = 0; l < config_.levels(); ++l) visit_level(down_[static_cast<std::size_t>(l)], "down." + std::to_string(l));
        if (!done) {
            mid_res1_.collect("mid.res.0", out);
            mid_attn_.collect("mid.attn", out);
            if (reference_only && stop_at == "mid") done = true;
        }
        if (!done) mid_res2_.collect("mid.res.1", out);
        for (int l = config_.levels() - 1; l >= 0 && !done; --l) visit_level(up_[static_cast<std::size_t>(l)], "up." + std::to_string(l));
        if (!done) {
            out_norm_.collect("out.norm", out);
            conv_out_.collect("out.conv", out);
        }
        return out;
    }

    UNetConfig config_;
    nn::Linear<T> time1_, time2_;
    nn::Conv2d<T> conv_in_;
    std::vector<Level> down_;
    ResBlock<T> mid_res1_;
    TransformerBlock<T> mid_attn_;
    ResBlock<T> mid_res2_;
    std::vector<Level> up_;
    nn::GroupNorm<T> out_norm_;
    nn::Conv2d<T> conv_out_;
};

}  // namespace stylebrush::denoiser
