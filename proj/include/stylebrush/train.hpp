#pragma once

// Training loop: crop pairs from the corpus, frozen codec latents, the
// epsilon objective with guider, reference and token conditioning, Adam
// updates, checkpoints that resume bit-exactly.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylebrush/core/fpu.hpp"
#include "stylebrush/core/log.hpp"
#include "stylebrush/data.hpp"
#include "stylebrush/infer.hpp"
#include "stylebrush/io/png.hpp"
#include "stylebrush/model.hpp"
#include "stylebrush/nn/adam.hpp"

namespace stylebrush::train {

namespace fs = std::filesystem;
using ag::Var;

struct FreezeFlags {
    bool codec = true;
    bool guider = false;
    bool semantic = false;
    bool refnet = false;
    bool denoiser = false;

    bool frozen(const std::string& component) const {
        if (component == "codec") return codec;
        if (component == "guider") return guider;
        if (component == "semantic") return semantic;
        if (component == "refnet") return refnet;
        if (component == "denoiser") return denoiser;
        fail(ErrorKind::config, "unknown component '" + component + "'");
    }
};

struct OptimizerConfig {
    std::string kind = "adam";
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
};

struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    double learning_rate = 1e-4;
    OptimizerConfig optimizer;
    int ddim_eval_steps = 30;
    double crop_fraction = 0.5;
    structure::BlurConfig blur;
    std::uint64_t seed = 0;
    int checkpoint_every = 500;
    int sample_every = 500;
    int log_every = 50;
    /// Loss EMA decay; 0.99 averages over roughly the last 100 steps.
    double loss_ema_decay = 0.99;
    FreezeFlags freeze;

    void validate() const {
        require(steps >= 0 && batch_size >= 1, ErrorKind::config, "train.steps must be >= 0 and train.batch_size >= 1");
        require(learning_rate > 0, ErrorKind::config, "train.learning_rate must be positive");
        require(optimizer.kind == "adam", ErrorKind::config, "only the 'adam' optimizer is implemented");
        require(ddim_eval_steps >= 1, ErrorKind::config, "train.ddim_eval_steps must be positive");
        require(checkpoint_every >= 1 && sample_every >= 1 && log_every >= 1, ErrorKind::config,
                "train cadences must be positive");
        require(loss_ema_decay >= 0 && loss_ema_decay < 1, ErrorKind::config, "train.loss_ema_decay must lie in [0,1)");
        blur.validate();
    }

    nn::AdamConfig adam() const {
        return {learning_rate, optimizer.beta1, optimizer.beta2, optimizer.epsilon, optimizer.weight_decay, optimizer.grad_clip};
    }
};

inline void to_json(nlohmann::json& j, const FreezeFlags& f) {
    j = {{"codec", f.codec}, {"guider", f.guider}, {"semantic", f.semantic}, {"refnet", f.refnet}, {"denoiser", f.denoiser}};
}
inline void from_json(const nlohmann::json& j, FreezeFlags& f) {
    f.codec = j.at("codec").get<bool>();
    f.guider = j.at("guider").get<bool>();
    f.semantic = j.at("semantic").get<bool>();
    f.refnet = j.at("refnet").get<bool>();
    f.denoiser = j.at("denoiser").get<bool>();
}
inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
    j = {{"kind", o.kind},       {"beta1", o.beta1},
         {"beta2", o.beta2},     {"epsilon", o.epsilon},
         {"weight_decay", o.weight_decay}, {"grad_clip", o.grad_clip}};
}
inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
    o.kind = j.at("kind").get<std::string>();
    o.beta1 = j.at("beta1").get<double>();
    o.beta2 = j.at("beta2").get<double>();
    o.epsilon = j.at("epsilon").get<double>();
    o.weight_decay = j.at("weight_decay").get<double>();
    o.grad_clip = j.at("grad_clip").get<double>();
}
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"steps", c.steps},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"optimizer", c.optimizer},
         {"ddim_eval_steps", c.ddim_eval_steps},
         {"crop_fraction", c.crop_fraction},
         {"blur", c.blur},
         {"seed", c.seed},
         {"checkpoint_every", c.checkpoint_every},
         {"sample_every", c.sample_every},
         {"log_every", c.log_every},
         {"loss_ema_decay", c.loss_ema_decay},
         {"freeze", c.freeze}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.steps = j.at("steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.optimizer = j.at("optimizer").get<OptimizerConfig>();
    c.ddim_eval_steps = j.at("ddim_eval_steps").get<int>();
    c.crop_fraction = j.at("crop_fraction").get<double>();
    c.blur = j.at("blur").get<structure::BlurConfig>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    c.sample_every = j.at("sample_every").get<int>();
    c.log_every = j.at("log_every").get<int>();
    c.loss_ema_decay = j.at("loss_ema_decay").get<double>();
    c.freeze = j.at("freeze").get<FreezeFlags>();
}

/// Bias-corrected exponential moving average.
struct LossEma {
    double decay = 0.99;
    double raw = 0.0;
    long count = 0;
    double initial = std::numeric_limits<double>::quiet_NaN();

    void update(double loss) {
        raw = decay * raw + (1.0 - decay) * loss;
        ++count;
        if (count == 1) initial = value();
    }
    double value() const {
        if (count == 0) return std::numeric_limits<double>::quiet_NaN();
        return raw / (1.0 - std::pow(decay, double(count)));
    }
};

/// Everything a run needs to continue: weights, optimizer moments, loss
/// EMA and the noise stream.
template <class T>
struct TrainState {
    long step = 0;
    model::StyleBrushModel<T> model;
    nn::Adam<T> optimizer;
    LossEma ema;
    Rng noise_rng;
    TrainConfig config;

    nn::ParamList<T> trainable() const {
        nn::ParamList<T> out;
        for (const auto& c : model::component_names()) {
            if (config.freeze.frozen(c)) continue;
            for (auto& p : model.component(c)) out.push_back({c + "." + p.name, p.var});
        }
        return out;
    }

    std::map<std::string, nn::ParamList<T>> groups() const {
        std::map<std::string, nn::ParamList<T>> out;
        for (const auto& c : model::component_names())
            if (!config.freeze.frozen(c)) out[c] = model.component(c);
        return out;
    }
};

/// Fresh state: guider Gaussian with zero projection, denoiser and refnet
/// identical, codec as given.
template <class T>
TrainState<T> init_weights(const TrainConfig& config, const model::ModelConfig& mc, codec::Codec<T> codec) {
    config.validate();
    TrainState<T> s;
    s.config = config;
    s.model = model::StyleBrushModel<T>(mc, std::move(codec), derive_seed(config.seed, "init"));
    s.optimizer = nn::Adam<T>(config.adam());
    s.ema.decay = config.loss_ema_decay;
    s.noise_rng = Rng(derive_seed(config.seed, "noise"));
    return s;
}

template <class T>
using Batch = std::vector<data::TrainingPair<T>>;

/// Builds batch `step` deterministically from (corpus, seed, step).
template <class T>
class PairSampler {
public:
    PairSampler(const std::vector<Tensor<T>>& images, const TrainConfig& cfg, int divisor) : images_(images), cfg_(cfg) {
        require(!images_.empty(), ErrorKind::data, "training corpus is empty");
        const Tensor<T>& first = images_.front();
        crop_ = data::crop_size_for({first.dim(2), first.dim(1)}, cfg_.crop_fraction, divisor);
    }

    data::Size2 crop_size() const { return crop_; }

    Batch<T> batch(long step) {
        Batch<T> out;
        const std::size_t n = images_.size();
        for (int i = 0; i < cfg_.batch_size; ++i) {
            const std::uint64_t g = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg_.batch_size) + static_cast<std::uint64_t>(i);
            const std::uint64_t epoch = g / n;
            if (epoch != cached_epoch_) {
                order_ = data::epoch_order(n, cfg_.seed, epoch);
                cached_epoch_ = epoch;
            }
            const std::size_t src = order_[static_cast<std::size_t>(g % n)];
            out.push_back(data::build_training_pair(images_[src], crop_, derive_seed(cfg_.seed, "pair", g), cfg_.blur,
                                                    std::to_string(src)));
        }
        return out;
    }

private:
    const std::vector<Tensor<T>>& images_;
    TrainConfig cfg_;
    data::Size2 crop_;
    std::vector<std::size_t> order_;
    std::uint64_t cached_epoch_ = std::numeric_limits<std::uint64_t>::max();
};

template <class T>
Tensor<T> stack_images(const std::vector<const Tensor<T>*>& imgs) {
    std::vector<Tensor<T>> b;
    for (const auto* p : imgs) b.push_back(unsqueeze0(*p));
    return stack_batch<T>(b);
}

/// Epsilon loss of `model` on `batch`, drawing timesteps and noise from `rng`.
/// Codec latents are differentiable only when the codec is trainable.
template <class T>
Var<T> batch_loss(const model::StyleBrushModel<T>& m, const Batch<T>& batch, Rng& rng, bool codec_trainable = false) {
    require(!batch.empty(), ErrorKind::data, "empty batch");
    std::vector<const Tensor<T>*> gt, ref, st;
    for (const auto& p : batch) {
        gt.push_back(&p.ground_truth);
        ref.push_back(&p.reference);
        st.push_back(&p.structure.data);
    }
    const Tensor<T> x = stack_images(gt), r = stack_images(ref), s = stack_images(st);
    const auto& codec = m.codec();
    const T scale = static_cast<T>(codec.config().latent_scale);
    Var<T> z0, zr;
    if (codec_trainable) {
        z0 = ag::scale(codec.encode_raw(ag::constant(x)), scale);
        zr = ag::scale(codec.encode_raw(ag::constant(r)), scale);
    } else {
        z0 = ag::constant(codec.encode(x));
        zr = ag::constant(codec.encode(r));
    }

    const int n = static_cast<int>(batch.size());
    const auto& sched = m.schedule();
    std::vector<int> ts(static_cast<std::size_t>(n));
    for (auto& t : ts) t = rng.uniform_int(1, sched.steps());
    Tensor<T> eps(z0.shape());
    for (auto& v : eps.storage()) v = static_cast<T>(rng.normal());

    // z_t = sqrt(abar) z0 + sqrt(1 - abar) eps, per batch item.
    Tensor<T> a(z0.shape()), b_eps(z0.shape());
    const std::size_t inner = eps.size() / static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i) {
        const double ab = sched.alpha_bar(ts[static_cast<std::size_t>(i)]);
        for (std::size_t k = static_cast<std::size_t>(i) * inner; k < static_cast<std::size_t>(i + 1) * inner; ++k) {
            a[k] = static_cast<T>(std::sqrt(ab));
            b_eps[k] = static_cast<T>(std::sqrt(1.0 - ab) * double(eps[k]));
        }
    }
    Var<T> zt = ag::add(ag::mul(z0, ag::constant(std::move(a))), ag::constant(std::move(b_eps)));

    Var<T> tokens = m.tokens(zr);
    const auto feats = m.reference_features(zr, tokens);
    Var<T> guide = m.structure_features(ag::constant(s));
    Var<T> pred = m.predict_noise(zt, ts, &guide, &feats, &tokens);
    if (!pred.value().all_finite()) {
        std::string seeds;
        for (const auto& p : batch) seeds += " crop=" + std::to_string(p.crop_seed) + "/blur=" + std::to_string(p.blur_seed);
        fail(ErrorKind::numeric, "non-finite prediction; batch seeds:" + seeds);
    }
    return ag::mse(pred, ag::constant(std::move(eps)));
}

/// One optimizer update. Returns the loss before the update.
template <class T>
double train_step(TrainState<T>& state, const Batch<T>& batch) {
    FlushDenormals ftz;
    Var<T> loss = batch_loss(state.model, batch, state.noise_rng, !state.config.freeze.codec);
    const double lv = double(loss.value()[0]);
    if (!std::isfinite(lv)) {
        std::string seeds;
        for (const auto& p : batch) seeds += " crop=" + std::to_string(p.crop_seed) + "/blur=" + std::to_string(p.blur_seed);
        fail(ErrorKind::numeric, "loss is not finite at step " + std::to_string(state.step) + "; batch seeds:" + seeds);
    }
    auto params = state.trainable();
    ag::backward(loss);
    state.optimizer.step(params);
    state.ema.update(lv);
    ++state.step;
    return lv;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointKind = "stylebrush.checkpoint";

template <class T>
void save_state(const fs::path& path, const TrainState<T>& s) {
    io::Container c;
    c.kind = kCheckpointKind;
    s.model.store(c);
    for (const auto& [name, m] : s.optimizer.first_moments()) c.put("optim.m." + name, m);
    for (const auto& [name, v] : s.optimizer.second_moments()) c.put("optim.v." + name, v);
    c.meta["train"] = {{"step", s.step},
                       {"optimizer_steps", s.optimizer.step_count()},
                       {"ema_raw", s.ema.raw},
                       {"ema_count", s.ema.count},
                       {"ema_initial", s.ema.initial},
                       {"noise_rng", s.noise_rng.state()},
                       {"config", s.config}};
    io::save_container(path, c);
}

template <class T>
model::StyleBrushModel<T> load_model(const fs::path& path) {
    return model::StyleBrushModel<T>::restore(io::load_container(path, kCheckpointKind));
}

template <class T>
TrainState<T> load_state(const fs::path& path) {
    const io::Container c = io::load_container(path, kCheckpointKind);
    require(c.meta.contains("train"), ErrorKind::checkpoint, path.string() + " holds no training state");
    const auto& t = c.meta.at("train");
    TrainState<T> s;
    s.model = model::StyleBrushModel<T>::restore(c);
    s.config = t.at("config").get<TrainConfig>();
    s.step = t.at("step").get<long>();
    s.optimizer = nn::Adam<T>(s.config.adam());
    s.optimizer.set_step_count(t.at("optimizer_steps").get<long>());
    for (const auto& [name, blob] : c.tensors) {
        if (name.rfind("optim.m.", 0) == 0) s.optimizer.first_moments()[name.substr(8)] = c.get<T>(name);
        if (name.rfind("optim.v.", 0) == 0) s.optimizer.second_moments()[name.substr(8)] = c.get<T>(name);
    }
    s.ema.decay = s.config.loss_ema_decay;
    s.ema.raw = t.at("ema_raw").get<double>();
    s.ema.count = t.at("ema_count").get<long>();
    s.ema.initial = t.at("ema_initial").is_null() ? std::numeric_limits<double>::quiet_NaN() : t.at("ema_initial").get<double>();
    s.noise_rng.set_state(t.at("noise_rng").get<std::string>());
    return s;
}

// ---------------------------------------------------------------------------
// Loop

struct RunOptions {
    fs::path run_dir;
    bool write_samples = true;
    bool write_checkpoints = true;
    /// Stop after this step even if config.steps is larger (-1: no limit).
    long stop_at = -1;
};

struct RunSummary {
    std::vector<double> losses;
    double initial_ema = 0;
    double final_ema = 0;
    double seconds = 0;
    std::map<std::string, std::uint64_t> checksums_before;
    std::map<std::string, std::uint64_t> checksums_after;
};

/// content | reference | structure | output for the first pair of a batch.
template <class T>
Tensor<T> sample_grid(const model::StyleBrushModel<T>& m, const data::TrainingPair<T>& p, int ddim_steps, std::uint64_t seed) {
    infer::Stylizer<T> st(m);
    infer::StylizationRequest<T> req;
    req.content = p.content;
    req.reference = p.reference;
    req.steps = ddim_steps;
    req.seed = seed;
    req.chain = structure::sample_blur_chain(p.blur_seed);
    return io::hstack_images<T>({p.content, p.reference, p.structure.data, st.stylize(req)});
}

template <class T>
RunSummary run_training(TrainState<T>& state, const std::vector<Tensor<T>>& images, const RunOptions& opt,
                        const std::function<void(long, double, double)>& on_log = {}) {
    const TrainConfig& cfg = state.config;
    PairSampler<T> sampler(images, cfg, state.model.required_divisor());
    RunSummary summary;
    summary.checksums_before = state.model.checksums();
    const auto start = std::chrono::steady_clock::now();

    std::ofstream csv;
    if (!opt.run_dir.empty()) {
        fs::create_directories(opt.run_dir);
        const fs::path csv_path = opt.run_dir / "loss.csv";
        const bool fresh = state.step == 0 || !fs::exists(csv_path);
        csv.open(csv_path, fresh ? std::ios::trunc : std::ios::app);
        if (fresh) csv << "step,loss,loss_ema,seconds\n";
    }
    const long last = opt.stop_at >= 0 ? std::min<long>(opt.stop_at, cfg.steps) : cfg.steps;
    while (state.step < last) {
        const long step = state.step;
        const Batch<T> batch = sampler.batch(step);
        const double loss = train_step(state, batch);
        summary.losses.push_back(loss);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (csv.is_open()) csv << step << ',' << loss << ',' << state.ema.value() << ',' << secs << '\n';
        if (on_log && (step % cfg.log_every == 0 || state.step == last)) on_log(step, loss, state.ema.value());
        if (!opt.run_dir.empty() && opt.write_samples && (state.step % cfg.sample_every == 0 || state.step == last)) {
            char name[48];
            std::snprintf(name, sizeof(name), "sample_%06ld.png", state.step);
            fs::create_directories(opt.run_dir / "samples");
            io::write_png(opt.run_dir / "samples" / name, sample_grid(state.model, batch.front(), cfg.ddim_eval_steps, cfg.seed));
        }
        if (!opt.run_dir.empty() && opt.write_checkpoints && (state.step % cfg.checkpoint_every == 0 || state.step == last)) {
            char name[48];
            std::snprintf(name, sizeof(name), "step_%06ld.ckpt", state.step);
            save_state(opt.run_dir / "checkpoints" / name, state);
            save_state(opt.run_dir / "checkpoints" / "latest.ckpt", state);
        }
    }
    summary.initial_ema = state.ema.initial;
    summary.final_ema = state.ema.value();
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    summary.checksums_after = state.model.checksums();
    if (cfg.freeze.codec)
        require(summary.checksums_before.at("codec") == summary.checksums_after.at("codec"), ErrorKind::numeric,
                "frozen codec weights changed during training");
    return summary;
}

}  // namespace stylebrush::train
