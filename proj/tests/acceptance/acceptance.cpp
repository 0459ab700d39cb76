// Acceptance run: one line per criterion, exit status 1 if any fails.
//
//   acceptance --work-dir DIR [--only 2,9,14] [--reuse]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "stylebrush/cli.hpp"

using namespace stylebrush;
namespace fs = std::filesystem;
using nlohmann::json;
using ag::Var;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class T>
void perturb(const nn::ParamList<T>& params, Rng& rng, double scale) {
    for (auto p : params)
        for (auto& v : p.var.mutable_value().storage()) v += static_cast<T>(scale * rng.normal());
}

template <class T>
codec::Codec<T> bypass_codec() {
    codec::CodecConfig c;
    c.bypass = true;
    return codec::Codec<T>(c, 0);
}

model::ModelConfig small_config() {
    model::ModelConfig mc;
    mc.diffusion.steps = 20;
    mc.unet.base_width = 8;
    mc.unet.channel_mult = {1, 2};
    mc.unet.heads = 2;
    mc.unet.groups = 4;
    mc.guider.channels = {4, 4, 8, 8};
    mc.semantic.hidden_channels = 8;
    mc.semantic.n_tokens = 2;
    mc.semantic.d_model = 16;
    return mc;
}

model::StyleBrushModel<float> small_model(std::uint64_t seed) {
    model::StyleBrushModel<float> m(small_config(), bypass_codec<float>(), seed);
    Rng rng(seed);
    perturb(m.all_parameters(), rng, 0.05);
    return m;
}

Tensor<float> toy(std::uint64_t seed, int size) {
    data::ToyCorpusOptions o;
    o.seed = seed;
    o.size = size;
    return data::toy_image<float>(o, 0);
}

double mse(const Tensor<float>& a, const Tensor<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i] - b[i]) * (a[i] - b[i]);
    return s / double(a.size());
}

std::array<double, 3> mean_color(const Tensor<float>& x) {
    std::array<double, 3> m{};
    const std::size_t hw = x.size() / 3;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < hw; ++i) m[c] += x[c * hw + i];
        m[c] /= double(hw);
    }
    return m;
}

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), {"stylebrush", "--log-level", "warn"});
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out;
    return cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, std::cerr);
}

// ---------------------------------------------------------------------------

Outcome artfid_consistency() {
    const double ours = metrics::artfid(8.3, 0.51), styleid = metrics::artfid(18.1, 0.50);
    return {std::abs(ours - 14.043) < 1e-9 && std::abs(ours - 14.1) <= 0.1 && std::abs(styleid - 28.65) < 1e-9 &&
                std::abs(styleid - 28.8) <= 0.2,
            fmt("artfid(8.3,0.51)=%.4f vs 14.1; artfid(18.1,0.50)=%.4f vs 28.8", ours, styleid)};
}

Outcome guider_transparency() {
    model::ModelConfig mc;
    mc.diffusion.steps = 50;
    model::StyleBrushModel<double> m(mc, bypass_codec<double>(), 4);
    Rng rng(4);
    // Moves the denoiser's zero output layer so outputs are not trivially zero.
    perturb(m.component("denoiser"), rng, 0.05);
    int identical = 0, nonzero = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto z = Tensor<double>::randn({1, 4, 8, 8}, rng);
        const Var<double> s = m.structure_features(ag::constant(Tensor<double>::randn({1, 3, 32, 32}, rng)));
        const std::vector<int> ts{rng.uniform_int(1, 50)};
        const auto with = m.predict_noise(ag::constant(z), ts, &s, nullptr, nullptr).value();
        const auto without = m.predict_noise(ag::constant(z), ts, nullptr, nullptr, nullptr).value();
        identical += with == without;
        nonzero += max_abs_diff(with, Tensor<double>(with.shape())) > 0;
    }
    return {identical == 10 && nonzero == 10, fmt("%d/10 bit-identical, %d/10 non-zero outputs", identical, nonzero)};
}

Outcome forward_process() {
    using namespace diffusion;
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    double worst_ab = 0;
    double running = 1.0;
    for (int t = 1; t <= 100; ++t) {
        running *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 99.0);
        worst_ab = std::max(worst_ab, std::abs(s.alpha_bar(t) - running) / running);
    }
    const int draws = 10000, elems = 8;
    const std::vector<double> z0{-1.5, -1.0, -0.5, 0.0, 0.25, 0.5, 1.0, 2.0};
    Tensor<double> base({draws, elems});
    for (int d = 0; d < draws; ++d)
        for (int e = 0; e < elems; ++e) base.at(d, e) = z0[static_cast<std::size_t>(e)];
    auto moments = [&](const Tensor<double>& x, std::vector<double>& mean) {
        mean.assign(elems, 0.0);
        for (int d = 0; d < draws; ++d)
            for (int e = 0; e < elems; ++e) mean[static_cast<std::size_t>(e)] += x.at(d, e) / draws;
        double v = 0;
        for (int d = 0; d < draws; ++d)
            for (int e = 0; e < elems; ++e) v += std::pow(x.at(d, e) - mean[static_cast<std::size_t>(e)], 2);
        return v / (double(elems) * (draws - 1));
    };
    Rng rng(5), rng_closed(50);
    Latent<double> z{base, 0};
    bool ok = worst_ab < 1e-12;
    double worst_se = 0, worst_var = 0;
    for (int t = 1; t <= 100; ++t) {
        z = q_step(z, t, Tensor<double>::randn({draws, elems}, rng), s);
        if (t != 10 && t != 50 && t != 100) continue;
        std::vector<double> mc, mq;
        const double vc = moments(z.data, mc);
        const double vq = moments(q_sample(Latent<double>{base, 0}, t, Tensor<double>::randn({draws, elems}, rng_closed), s).data, mq);
        const double var = 1.0 - s.alpha_bar(t);
        worst_var = std::max({worst_var, std::abs(vc / var - 1.0), std::abs(vq / var - 1.0)});
        for (int e = 0; e < elems; ++e) {
            const double want = std::sqrt(s.alpha_bar(t)) * z0[static_cast<std::size_t>(e)];
            const double se = std::sqrt(var / draws);
            worst_se = std::max({worst_se, std::abs(mc[static_cast<std::size_t>(e)] - want) / se,
                                 std::abs(mq[static_cast<std::size_t>(e)] - want) / se});
        }
    }
    ok = ok && worst_se < 3.0 && worst_var < 0.02;
    return {ok, fmt("alpha_bar rel err %.1e; worst mean %.2f SE; worst variance deviation %.2f%%", worst_ab, worst_se,
                    100 * worst_var)};
}

Outcome ddim() {
    const auto m = small_model(21);
    infer::Stylizer<float> st(m);
    infer::StylizationRequest<float> r;
    r.content = toy(1, 16);
    r.reference = toy(2, 16);
    r.steps = 5;
    r.seed = 3;
    const bool same = st.stylize(r) == st.stylize(r);

    const auto s = diffusion::NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(10);
    const auto z0 = Tensor<double>::randn({4, 8, 8}, rng);
    const auto eps = Tensor<double>::randn({4, 8, 8}, rng);
    double worst = 0;
    for (int t : {1, 37, 100}) {
        const auto zt = diffusion::q_sample(diffusion::Latent<double>{z0, 0}, t, eps, s);
        worst = std::max(worst, max_abs_diff(diffusion::ddim_step(zt, eps, 0, 0.0, s).data, z0));
    }
    return {same && worst < 1e-5, fmt("two seeded runs %s; oracle inversion max-abs %.1e", same ? "identical" : "differ", worst)};
}

Outcome gradient_fidelity() {
    model::ModelConfig mc;
    mc.diffusion.steps = 20;
    mc.unet.base_width = 4;
    mc.unet.channel_mult = {1};
    mc.unet.attention_levels = {0};
    mc.unet.heads = 1;
    mc.unet.groups = 2;
    mc.guider.channels = {4, 4, 4, 4};
    mc.semantic.hidden_channels = 4;
    mc.semantic.n_tokens = 2;
    mc.semantic.d_model = 4;
    model::StyleBrushModel<double> m(mc, bypass_codec<double>(), 6);
    Rng rng(6);
    perturb(m.all_parameters(), rng, 0.1);
    std::size_t total = 0;
    for (const char* g : {"guider", "semantic", "refnet", "denoiser"}) total += nn::count_parameters(m.component(g));

    data::ToyCorpusOptions o;
    o.size = 32;
    o.seed = 6;
    train::Batch<double> batch;
    for (int i = 0; i < 2; ++i)
        batch.push_back(data::build_training_pair(data::toy_image<double>(o, static_cast<std::size_t>(i)), data::Size2{16, 16},
                                                  derive_seed(6, "pair", static_cast<std::uint64_t>(i))));
    const Rng loss_rng(60);
    auto loss = [&] {
        Rng r = loss_rng;
        return train::batch_loss(m, batch, r).value()[0];
    };
    Rng r = loss_rng;
    nn::zero_grad(m.all_parameters());
    ag::backward(train::batch_loss(m, batch, r));

    const double h = 1e-6;
    int checked = 0, good = 0;
    for (const char* group : {"guider", "semantic", "refnet", "denoiser"}) {
        const auto params = m.component(group);
        std::vector<std::size_t> offsets{0};
        for (const auto& p : params) offsets.push_back(offsets.back() + p.var.value().size());
        for (int k = 0; k < 50; ++k) {
            const auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(offsets.back()) - 1));
            const auto pi = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
            auto var = params[pi].var;
            const std::size_t idx = flat - offsets[pi];
            const double analytic = var.grad()[idx];
            double& w = var.mutable_value()[idx];
            const double saved = w;
            w = saved + h;
            const double up = loss();
            w = saved - h;
            const double down = loss();
            w = saved;
            const double numeric = (up - down) / (2 * h);
            ++checked;
            good += std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7}) < 1e-3;
        }
    }
    return {total <= 10000 && checked == 200 && good >= 198,
            fmt("%d/%d coordinates within 1e-3 relative; %zu parameters", good, checked, total)};
}

Outcome crop_oracle() {
    const std::vector<data::Point> pts{{0, 0}, {5, 5}, {10, 10}, {15, 15}, {20, 20}};
    const auto [i, j] = data::select_farthest_pair(pts);
    const bool example = pts[i] == data::Point{0, 0} && pts[j] == data::Point{20, 20};
    const data::Size2 image{64, 48}, crop{32, 24};
    int agree = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto cand = data::crop_candidates(image, crop, seed);
        long best = -1;
        data::Point bi{}, bj{};
        for (std::size_t a = 0; a < cand.size(); ++a)
            for (std::size_t b = a + 1; b < cand.size(); ++b) {
                const long dx = cand[a].x - cand[b].x, dy = cand[a].y - cand[b].y;
                if (dx * dx + dy * dy > best) {
                    best = dx * dx + dy * dy;
                    bi = cand[a];
                    bj = cand[b];
                }
            }
        const auto [c, r] = data::sample_crop_pair(image, crop, seed);
        agree += c.center == bi && r.center == bj;
    }
    return {example && agree == 1000, fmt("worked example %s; %d/1000 seeds match brute force", example ? "ok" : "wrong", agree)};
}

Outcome structure_properties() {
    const Tensor<float> flat({3, 16, 16}, 0.375f);
    int fixed = 0;
    for (std::uint64_t s = 0; s < 20; ++s) fixed += structure::extract_structure(flat, structure::sample_blur_chain(s)).data == flat;
    Rng rng(2);
    int equal = 0, contracted = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<float> x({3, 24, 20});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
        const auto s = structure::extract_structure(x, structure::sample_blur_chain(static_cast<std::uint64_t>(trial))).data;
        const std::size_t plane = s.size() / 3;
        bool eq = true;
        for (std::size_t i = 0; i < plane; ++i) eq = eq && s[i] == s[plane + i] && s[i] == s[2 * plane + i];
        equal += eq;
        const auto g = structure::to_grayscale(x);
        const auto [lo, hi] = std::minmax_element(g.values().begin(), g.values().end());
        bool in = true;
        for (float v : s.values()) in = in && v >= *lo - 1e-6f && v <= *hi + 1e-6f;
        contracted += in;
    }
    Tensor<float> x({3, 16, 16});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    const auto chain = structure::sample_blur_chain(9);
    const bool det = structure::extract_structure(x, chain).data == structure::extract_structure(x, chain).data;
    return {fixed == 20 && equal == 100 && contracted == 100 && det,
            fmt("constant fixed %d/20; channels equal %d/100; range contracted %d/100; deterministic %s", fixed, equal,
                contracted, det ? "yes" : "no")};
}

Outcome strength_endpoints() {
    const auto m = small_model(7);
    infer::Stylizer<float> st(m);
    auto req = [](double s) {
        infer::StylizationRequest<float> r;
        r.content = toy(1, 16);
        r.reference = toy(2, 16);
        r.strength = infer::StyleStrength(s);
        r.steps = 4;
        r.seed = 11;
        return r;
    };
    const bool one = st.stylize_with_strength(req(1.0)) == st.stylize(req(1.0));
    auto self = req(1.0);
    self.reference = self.content;
    const bool zero = st.stylize_with_strength(req(0.0)) == st.stylize(self);
    const Tensor<float> a({2, 2}, {1.0f, 3.0f, -2.0f, 0.5f}), b({2, 2}, {3.0f, 1.0f, 2.0f, -0.5f});
    const auto mid = infer::interpolate_latents(a, b, infer::StyleStrength(0.5));
    const bool midpoint = mid == Tensor<float>({2, 2}, {2.0f, 2.0f, 0.0f, 0.0f});
    return {one && zero && midpoint, fmt("strength 1 %s; strength 0 %s; midpoint %s", one ? "exact" : "differs",
                                         zero ? "exact" : "differs", midpoint ? "exact" : "differs")};
}

Outcome video_consistency() {
    const auto m = small_model(9);
    infer::Stylizer<float> st(m);
    infer::StylizationRequest<float> r;
    r.reference = toy(2, 16);
    r.steps = 4;
    r.seed = 11;
    std::vector<Tensor<float>> frames;
    for (std::uint64_t k = 0; k < 4; ++k) frames.push_back(toy(20 + k, 16));
    const auto video = st.stylize_video(frames, r);
    double worst = 0;
    for (std::size_t k = 0; k < frames.size(); ++k) {
        r.content = frames[k];
        worst = std::max(worst, double(max_abs_diff(video[k], st.stylize(r))));
    }
    Rng rng(1);
    const auto x = Tensor<double>::randn({2, 3, 4, 5, 6}, rng);
    const bool roundtrip = denoiser::temporal_unreshape(denoiser::temporal_reshape(x), 2, 4, 5) == x;
    return {worst <= 1e-5 && roundtrip, fmt("video vs per-frame max-abs %.1e over 4 frames; reshape roundtrip %s", worst,
                                            roundtrip ? "exact" : "differs")};
}

Outcome frechet() {
    Rng rng(1);
    auto random_set = [&](int n, double scale) {
        metrics::FeatureSet s;
        s.features.resize(n, 3);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < 3; ++j) s.features(i, j) = scale * rng.normal() + 0.1 * j;
        return s;
    };
    const auto a = random_set(40, 1.0);
    const double self = metrics::frechet_distance(a, a);
    metrics::GaussianStats p, q;
    p.mean = Eigen::Vector2d(0, 0);
    q.mean = Eigen::Vector2d(1, 0);
    p.cov = q.cov = Eigen::Matrix2d::Identity();
    const double shift = metrics::frechet_distance(p, q);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_set(30, 1.0 + 0.1 * trial), y = random_set(25, 0.5);
        const auto gx = metrics::fit_gaussian(x), gy = metrics::fit_gaussian(y);
        Eigen::EigenSolver<Eigen::MatrixXd> es(gx.cov * gy.cov);
        double tr = 0;
        for (long i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(es.eigenvalues()[i].real(), 0.0));
        const double oracle = (gx.mean - gy.mean).squaredNorm() + gx.cov.trace() + gy.cov.trace() - 2 * tr;
        worst = std::max(worst, std::abs(metrics::frechet_distance(x, y) - oracle));
    }
    return {self <= 1e-6 && shift == 1.0 && worst <= 1e-8,
            fmt("identical sets %.1e; unit mean shift %.17g; eigen oracle max diff %.1e", self, shift, worst)};
}

// ---------------------------------------------------------------------------
// Trained-model criteria

// Calibrated once on this implementation (see README) and frozen.
constexpr double kSmokeRatio = 0.5;
constexpr double kSmokeSeconds = 1800;
constexpr int kOverfitSteps = 3000;
constexpr double kOverfitLearningRate = 3e-4;
constexpr double kOverfitMseThreshold = 0.14;
constexpr int kProbeTrials = 50;

struct Smoke {
    fs::path dir;
    json summary;
    double pipeline_seconds = 0;
    std::string error;
};

class Acceptance {
public:
    Acceptance(fs::path work, bool reuse) : work_(std::move(work)), reuse_(reuse) {}

    Outcome smoke_training() {
        const Smoke& s = smoke();
        if (!s.error.empty()) return {false, s.error};
        const double ratio = s.summary.at("ema_ratio").get<double>();
        return {ratio < kSmokeRatio && s.pipeline_seconds <= kSmokeSeconds,
                fmt("EMA %.4f -> %.4f (ratio %.3f) after %d steps; pipeline %.0f s", s.summary.at("initial_loss_ema").get<double>(),
                    s.summary.at("final_loss_ema").get<double>(), ratio, s.summary.at("steps").get<int>(), s.pipeline_seconds)};
    }

    Outcome overfit() {
        const Smoke& s = smoke();
        if (!s.error.empty()) return {false, "needs the smoke codec: " + s.error};
        data::ToyCorpusOptions o;
        o.palettes = 2;
        const auto img = data::toy_image<float>(o, 0);
        train::TrainConfig tc;
        tc.steps = kOverfitSteps;
        tc.batch_size = 4;
        tc.learning_rate = kOverfitLearningRate;
        tc.seed = 10;
        auto state = train::init_weights(tc, model::ModelConfig{}, codec::Codec<float>::load(s.dir / "codec.ckpt"));
        train::RunOptions ro;
        ro.run_dir = work_ / "overfit";
        ro.write_samples = false;
        ro.write_checkpoints = false;
        const auto t0 = std::chrono::steady_clock::now();
        const auto summary = train::run_training(state, {img}, ro);

        const auto [cc, rc] = data::sample_crop_pair({64, 64}, {32, 32}, 99);
        infer::StylizationRequest<float> r;
        r.content = data::crop(img, cc);
        r.reference = data::crop(img, rc);
        r.seed = 7;
        infer::Stylizer<float> st(state.model);
        const auto out = st.stylize(r);
        io::write_png(work_ / "overfit" / "content_reference_output.png", io::hstack_images<float>({r.content, r.reference, out}));
        const double err = mse(out, r.content);
        return {err < kOverfitMseThreshold,
                fmt("MSE %.4f (threshold %.2f; reference crop alone %.4f) after %d steps, EMA %.3f -> %.3f, %.0f s", err,
                    kOverfitMseThreshold, mse(r.reference, r.content), kOverfitSteps, summary.initial_ema, summary.final_ema,
                    seconds_since(t0))};
    }

    Outcome style_probe() {
        const Smoke& s = smoke();
        if (!s.error.empty()) return {false, "needs the smoke checkpoint: " + s.error};
        const auto m = train::load_model<float>(s.dir / "run" / "checkpoints" / "latest.ckpt");
        data::ToyCorpusOptions o;
        o.count = 256;
        o.palettes = 2;
        std::array<double, 3> pa{}, pb{};
        for (int i = 0; i < o.count; ++i) {
            const auto c = mean_color(data::toy_image<float>(o, static_cast<std::size_t>(i)));
            for (int k = 0; k < 3; ++k) (i % 2 ? pb : pa)[static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(k)] / (o.count / 2);
        }
        data::ToyCorpusOptions oc;
        oc.seed = 777;
        const auto content = data::toy_image<float>(oc, 0);
        infer::Stylizer<float> st(m);
        int ok = 0;
        for (int t = 0; t < kProbeTrials; ++t) {
            infer::StylizationRequest<float> r;
            r.content = content;
            r.seed = derive_seed(5, "probe", static_cast<std::uint64_t>(t));
            r.reference = data::toy_image<float>(o, static_cast<std::size_t>(2 * t));
            const auto a = mean_color(st.stylize(r));
            r.reference = data::toy_image<float>(o, static_cast<std::size_t>(2 * t + 1));
            const auto b = mean_color(st.stylize(r));
            ok += color_distance(a, pa) < color_distance(a, pb) && color_distance(b, pb) < color_distance(b, pa);
        }
        return {ok >= (kProbeTrials * 8 + 9) / 10, fmt("%d/%d trials closer to the matching palette", ok, kProbeTrials)};
    }

private:
    const Smoke& smoke() {
        if (smoke_) return *smoke_;
        smoke_ = Smoke{};
        Smoke& s = *smoke_;
        s.dir = work_ / "smoke";
        const fs::path summary = s.dir / "run" / "summary.json";
        if (reuse_ && fs::exists(summary) && fs::exists(s.dir / "pipeline_seconds")) {
            s.summary = json::parse(std::ifstream(summary));
            std::ifstream(s.dir / "pipeline_seconds") >> s.pipeline_seconds;
            return s;
        }
        fs::remove_all(s.dir);
        const auto t0 = std::chrono::steady_clock::now();
        const std::string corpus = (s.dir / "corpus").string(), codec = (s.dir / "codec.ckpt").string();
        const std::string manifest = (s.dir / "corpus" / "manifest.jsonl").string();
        if (run_cli({"gen-corpus", "--out", corpus, "--count", "256", "--size", "64", "--palettes", "2"}) != 0) {
            s.error = "gen-corpus failed";
        } else if (run_cli({"pretrain-codec", "--manifest", manifest, "--out", codec}) != 0) {
            s.error = "pretrain-codec failed";
        } else if (run_cli({"train", "--out", (s.dir / "run").string(), "--set", "data.manifest=\"" + manifest + "\"", "--set",
                            "codec.checkpoint=\"" + codec + "\"", "--set", "train.steps=2000", "--set", "train.batch_size=8",
                            "--set", "diffusion.steps=100"}) != 0) {
            s.error = "train failed";
        } else {
            s.pipeline_seconds = seconds_since(t0);
            s.summary = json::parse(std::ifstream(summary));
            std::ofstream(s.dir / "pipeline_seconds") << s.pipeline_seconds << "\n";
        }
        return s;
    }

    fs::path work_;
    bool reuse_;
    std::optional<Smoke> smoke_;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria 2-14"};
    std::string work = "acceptance_work";
    std::vector<int> only;
    bool reuse = false;
    app.add_option("--work-dir", work, "scratch directory for the training runs");
    app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
    app.add_flag("--reuse", reuse, "reuse a finished smoke run in the work directory");
    CLI11_PARSE(app, argc, argv);

    log::set_level(log::Level::warn);
    fs::create_directories(work);
    Acceptance acc(work, reuse);

    const std::vector<std::tuple<int, std::string, std::function<Outcome()>>> criteria{
        {2, "ArtFID composition matches the reported triples", artfid_consistency},
        {3, "fresh structure guider is transparent", guider_transparency},
        {4, "chained and closed-form forward process agree", forward_process},
        {5, "DDIM determinism and oracle inversion", ddim},
        {6, "analytic gradients match finite differences", gradient_fidelity},
        {7, "crop pair equals brute-force farthest pair", crop_oracle},
        {8, "structure extraction properties", structure_properties},
        {9, "smoke training halves the loss EMA", [&] { return acc.smoke_training(); }},
        {10, "overfit model reconstructs its own content", [&] { return acc.overfit(); }},
        {11, "style strength endpoints", strength_endpoints},
        {12, "video equals per-frame stylization", video_consistency},
        {13, "Frechet distance checks", frechet},
        {14, "style signal follows the reference palette", [&] { return acc.style_probe(); }},
    };

    const std::set<int> selected(only.begin(), only.end());
    int failed = 0;
    json report = json::array();
    for (const auto& [id, name, fn] : criteria) {
        if (!selected.empty() && !selected.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        failed += !o.pass;
        std::printf("criterion %2d: %s  %s  [%s] (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
        report.push_back({{"criterion", id}, {"pass", o.pass}, {"name", name}, {"detail", o.detail}, {"seconds", secs}});
    }
    std::ofstream(fs::path(work) / "acceptance.json") << report.dump(2) << "\n";
    std::printf("%d criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
