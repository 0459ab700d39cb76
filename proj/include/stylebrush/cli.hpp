#pragma once

// Command-line entry point. Every subcommand that writes output also writes
// an effective-config snapshot and a seeds record next to it.

#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stylebrush/config.hpp"
#include "stylebrush/data.hpp"
#include "stylebrush/infer.hpp"
#include "stylebrush/metrics.hpp"
#include "stylebrush/train.hpp"

namespace stylebrush::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

inline int exit_code(ErrorKind kind) {
    return kind == ErrorKind::usage || kind == ErrorKind::config ? kExitUsage : kExitRuntime;
}

namespace detail {

inline json parse_value(const std::string& s) {
    try {
        return json::parse(s);
    } catch (const json::exception&) {
        return s;
    }
}

/// Every option of `sub`, as given or defaulted.
inline json options_record(const CLI::App& sub) {
    json opts = json::object();
    for (const CLI::Option* o : sub.get_options()) {
        if (o->get_lnames().empty()) continue;
        const std::string name = o->get_lnames().front();
        if (name == "help") continue;
        if (o->get_expected_max() == 0) {
            opts[name] = o->as<bool>();
        } else if (o->get_expected_max() > 1) {
            json arr = json::array();
            for (const auto& r : o->results()) arr.push_back(r);
            opts[name] = arr;
        } else if (o->count() > 0) {
            opts[name] = parse_value(o->results().back());
        } else {
            opts[name] = o->get_default_str().empty() ? json(nullptr) : parse_value(o->get_default_str());
        }
    }
    return opts;
}

struct Records {
    fs::path config_path;
    fs::path seeds_path;
};

/// Directory outputs hold `<command>.*.json`; file outputs get sidecars.
inline Records records_for(const std::string& command, const fs::path& out, bool out_is_dir) {
    if (out_is_dir) return {out / (command + ".effective_config.json"), out / (command + ".seeds.json")};
    return {fs::path(out.string() + ".effective_config.json"), fs::path(out.string() + ".seeds.json")};
}

inline void write_records(const Records& r, const json& effective, const json& seeds) {
    if (!r.config_path.parent_path().empty()) fs::create_directories(r.config_path.parent_path());
    io::write_file_atomic(r.config_path, effective.dump(2) + "\n");
    io::write_file_atomic(r.seeds_path, seeds.dump(2) + "\n");
}

inline std::vector<fs::path> numbered_pngs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& name : metrics::png_names(dir)) out.push_back(dir / name);
    require(!out.empty(), ErrorKind::data, "no PNG frames in " + dir.string());
    return out;
}

}  // namespace detail

/// Parsed arguments of every subcommand.
struct Args {
    std::string out;
    std::uint64_t seed = 0;
    std::string log_level = "info";

    // gen-corpus
    int count = 256;
    int size = 64;
    int palettes = 0;
    double test_fraction = 0.1;

    // make-pairs
    std::string manifest;
    std::string split = "train";
    double crop_fraction = 0.5;
    int multiple = 8;

    // extract-structure
    std::string input;
    std::string chain;

    // pretrain-codec / train
    std::string config;
    std::vector<std::string> sets;
    std::string resume;

    // stylize / stylize-video / manifest
    std::string checkpoint;
    std::string content;
    std::string reference;
    std::string frames;
    double strength = 1.0;
    int steps = 30;
    double eta = 0.0;
    bool from_content = false;
    int start_timestep = -1;
    int height = 64;
    int width = 64;

    // evaluate
    std::string results;
    std::string styles;
    std::string contents;
    std::string fid_extractor = "color-stats";
    std::string perceptual = "auto";
    std::string codec;
};

struct Context {
    const CLI::App& sub;
    const Args& args;
    std::ostream& out;
};

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen_corpus(const Context& cx) {
    const Args& a = cx.args;
    data::ToyCorpusOptions o;
    o.count = a.count;
    o.size = a.size;
    o.seed = a.seed;
    o.palettes = a.palettes;
    o.test_fraction = a.test_fraction;
    const auto m = data::generate_toy_corpus(a.out, o);
    detail::write_records(detail::records_for("gen-corpus", a.out, true),
                          {{"command", "gen-corpus"}, {"options", detail::options_record(cx.sub)}},
                          config::seeds_record(a.seed, {"toy-image", "hue", "palette-base", "split"}));
    cx.out << "wrote " << m.records.size() << " images and manifest.jsonl to " << a.out << "\n";
    return kExitOk;
}

inline int cmd_make_pairs(const Context& cx) {
    const Args& a = cx.args;
    const auto m = data::read_manifest(a.manifest);
    std::vector<const data::ManifestRecord*> records;
    for (const auto& r : m.records)
        if (a.split.empty() || r.split == a.split) records.push_back(&r);
    require(!records.empty(), ErrorKind::data, "manifest " + a.manifest + " has no '" + a.split + "' images");
    require(a.count >= 1, ErrorKind::usage, "--count must be positive");
    fs::create_directories(a.out);
    std::string log;
    for (int i = 0; i < a.count; ++i) {
        const auto& rec = *records[static_cast<std::size_t>(i) % records.size()];
        const Tensor<float> img = io::read_png<float>(m.resolve(rec));
        const auto crop = data::crop_size_for({img.dim(2), img.dim(1)}, a.crop_fraction, a.multiple);
        const std::uint64_t seed = derive_seed(a.seed, "pair", static_cast<std::uint64_t>(i));
        const auto p = data::build_training_pair(img, crop, seed, {}, rec.path);
        char name[32];
        std::snprintf(name, sizeof(name), "pair_%04d.png", i);
        io::write_png(fs::path(a.out) / name,
                      io::hstack_images<float>({p.content, p.reference, p.structure.data, p.ground_truth}));
        json line{{"index", i},
                  {"file", name},
                  {"source", rec.path},
                  {"pair_seed", seed},
                  {"crop_seed", p.crop_seed},
                  {"blur_seed", p.blur_seed},
                  {"chain", structure::sample_blur_chain(p.blur_seed).spec()},
                  {"content_center", {p.content_crop.center.x, p.content_crop.center.y}},
                  {"reference_center", {p.reference_crop.center.x, p.reference_crop.center.y}},
                  {"crop_size", {crop.w, crop.h}}};
        log += line.dump() + "\n";
    }
    io::write_file_atomic(fs::path(a.out) / "pairs.jsonl", log);
    detail::write_records(detail::records_for("make-pairs", a.out, true),
                          {{"command", "make-pairs"}, {"options", detail::options_record(cx.sub)}},
                          config::seeds_record(a.seed, {"pair"}));
    cx.out << "wrote " << a.count << " pair grids (content | reference | structure | ground truth) to " << a.out << "\n";
    return kExitOk;
}

inline int cmd_extract_structure(const Context& cx) {
    const Args& a = cx.args;
    const structure::BlurChain chain =
        a.chain.empty() ? structure::sample_blur_chain(derive_seed(a.seed, "blur")) : structure::BlurChain::parse(a.chain);
    const Tensor<float> img = io::read_png<float>(a.input);
    io::write_png(a.out, structure::extract_structure(img, chain).data);
    io::write_file_atomic(fs::path(a.out + ".chain.json"), json{{"input", a.input}, {"chain", chain.to_json()}}.dump(2) + "\n");
    detail::write_records(detail::records_for("extract-structure", a.out, false),
                          {{"command", "extract-structure"}, {"options", detail::options_record(cx.sub)}},
                          config::seeds_record(a.seed, {"blur"}));
    cx.out << "chain " << chain.spec() << " -> " << a.out << "\n";
    return kExitOk;
}

inline std::vector<Tensor<float>> corpus_images(const config::RunConfig& rc) {
    require(!rc.data.manifest.empty(), ErrorKind::config, "data.manifest is not set");
    const auto m = data::read_manifest(rc.data.manifest);
    auto images = data::load_images<float>(m, rc.data.split);
    require(!images.empty(), ErrorKind::data, "no '" + rc.data.split + "' images in " + rc.data.manifest);
    return images;
}

inline int cmd_pretrain_codec(const Context& cx) {
    const Args& a = cx.args;
    auto sets = a.sets;
    if (!a.manifest.empty()) sets.push_back("data.manifest=\"" + a.manifest + "\"");
    const config::RunConfig rc = config::load(a.config, sets);
    const auto images = corpus_images(rc);
    codec::Codec<float> c(rc.codec.model, derive_seed(rc.seed, "codec-init"));
    const auto result = codec::pretrain_codec(c, images, rc.codec.pretrain, [&](int step, double loss) {
        log::info("codec step ", step, " loss ", loss);
    });
    c.save(a.out, {{"pretrain", {{"steps", rc.codec.pretrain.steps},
                                 {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
                                 {"latent_std", result.latent_std}}}});
    detail::write_records(detail::records_for("pretrain-codec", a.out, false),
                          {{"command", "pretrain-codec"}, {"options", detail::options_record(cx.sub)}, {"config", rc.tree}},
                          config::seeds_record(rc.seed, {"codec-init", "codec-pretrain"}));
    cx.out << "codec saved to " << a.out << " (final loss "
           << (result.losses.empty() ? 0.0 : result.losses.back()) << ", latent std " << result.latent_std << ")\n";
    return kExitOk;
}

inline int cmd_train(const Context& cx) {
    const Args& a = cx.args;
    const config::RunConfig rc = config::load(a.config, a.sets);
    const fs::path run_dir = a.out;
    train::TrainState<float> state;
    if (!a.resume.empty()) {
        state = train::load_state<float>(a.resume);
        // The step budget may be extended on resume; everything else comes from the checkpoint.
        state.config.steps = rc.train.steps;
        log::info("resuming from ", a.resume, " at step ", state.step);
    } else {
        require(!rc.codec.checkpoint.empty(), ErrorKind::config,
                "codec.checkpoint is not set (run pretrain-codec first)");
        auto c = codec::Codec<float>::load(rc.codec.checkpoint);
        state = train::init_weights(rc.train, rc.model, std::move(c));
        state.model.set_codec_source(rc.codec.checkpoint);
    }
    const auto images = corpus_images(rc);
    detail::write_records(detail::records_for("train", run_dir, true),
                          {{"command", "train"}, {"options", detail::options_record(cx.sub)}, {"config", rc.tree}},
                          config::seeds_record(rc.seed, {"init", "noise", "epoch", "pair"}));
    train::RunOptions ro;
    ro.run_dir = run_dir;
    const auto summary = train::run_training(state, images, ro, [&](long step, double loss, double ema) {
        log::info("step ", step, " loss ", loss, " ema ", ema);
    });
    const json s{{"steps", state.step},
                 {"initial_loss_ema", summary.initial_ema},
                 {"final_loss_ema", summary.final_ema},
                 {"ema_ratio", summary.final_ema / summary.initial_ema},
                 {"seconds", summary.seconds}};
    io::write_file_atomic(run_dir / "summary.json", s.dump(2) + "\n");
    cx.out << "trained to step " << state.step << "; loss EMA " << summary.initial_ema << " -> " << summary.final_ema
           << " in " << summary.seconds << " s\n";
    return kExitOk;
}

inline infer::StylizationRequest<float> request_from(const Args& a, infer::StyleStrength strength) {
    infer::StylizationRequest<float> req;
    req.strength = strength;
    req.steps = a.steps;
    req.eta = a.eta;
    req.seed = a.seed;
    if (!a.chain.empty()) req.chain = structure::BlurChain::parse(a.chain);
    req.init_from_content = a.from_content;
    req.start_timestep = a.start_timestep;
    return req;
}

inline int cmd_stylize(const Context& cx) {
    const Args& a = cx.args;
    // Validated before anything is loaded.
    const infer::StyleStrength strength(a.strength);
    auto req = request_from(a, strength);
    const auto m = train::load_model<float>(a.checkpoint);
    req.content = io::read_png<float>(a.content);
    req.reference = io::read_png<float>(a.reference);
    infer::Stylizer<float> st(m);
    io::write_png(a.out, st.stylize_with_strength(req));
    detail::write_records(detail::records_for("stylize", a.out, false),
                          {{"command", "stylize"}, {"options", detail::options_record(cx.sub)}},
                          config::seeds_record(a.seed, {"blur", "init-noise", "ddim-noise"}));
    cx.out << "wrote " << a.out << "\n";
    return kExitOk;
}

inline int cmd_stylize_video(const Context& cx) {
    const Args& a = cx.args;
    const infer::StyleStrength strength(a.strength);
    require(strength.value() == 1.0, ErrorKind::usage, "stylize-video supports strength 1 only");
    auto req = request_from(a, strength);
    const auto m = train::load_model<float>(a.checkpoint);
    const auto paths = detail::numbered_pngs(a.frames);
    std::vector<Tensor<float>> frames;
    for (const auto& p : paths) frames.push_back(io::read_png<float>(p));
    req.content = frames.front();
    req.reference = io::read_png<float>(a.reference);
    infer::Stylizer<float> st(m);
    const auto out = st.stylize_video(frames, req);
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < out.size(); ++i) io::write_png(fs::path(a.out) / paths[i].filename(), out[i]);
    detail::write_records(detail::records_for("stylize-video", a.out, true),
                          {{"command", "stylize-video"}, {"options", detail::options_record(cx.sub)}},
                          config::seeds_record(a.seed, {"blur", "init-noise", "ddim-noise", "temporal-init"}));
    cx.out << "wrote " << out.size() << " frames to " << a.out << "\n";
    return kExitOk;
}

inline int cmd_evaluate(const Context& cx) {
    const Args& a = cx.args;
    std::shared_ptr<const codec::Codec<float>> c;
    if (!a.codec.empty()) c = std::make_shared<const codec::Codec<float>>(codec::Codec<float>::load(a.codec));

    std::unique_ptr<metrics::FeatureExtractor> fid;
    if (a.fid_extractor == "color-stats") {
        fid = std::make_unique<metrics::ColorStatsExtractor>();
    } else if (a.fid_extractor == "codec-pool") {
        require(c != nullptr, ErrorKind::usage, "--fid-extractor codec-pool needs --codec");
        fid = std::make_unique<metrics::CodecPoolExtractor>(c);
    } else {
        fail(ErrorKind::usage, "unknown FID extractor '" + a.fid_extractor + "'");
    }
    std::unique_ptr<metrics::PerceptualExtractor> perc;
    const std::string pname = a.perceptual == "auto" ? (c ? "codec-lpips-surrogate" : "pixel-pyramid") : a.perceptual;
    if (pname == "codec-lpips-surrogate") {
        require(c != nullptr, ErrorKind::usage, "--perceptual codec-lpips-surrogate needs --codec");
        perc = std::make_unique<metrics::CodecPerceptual>(c);
    } else if (pname == "pixel-pyramid") {
        perc = std::make_unique<metrics::PixelPyramidPerceptual>();
    } else {
        fail(ErrorKind::usage, "unknown perceptual extractor '" + pname + "'");
    }

    const auto report = metrics::evaluate(a.results, a.styles, a.contents, *fid, *perc);
    cx.out << report.text();
    if (!a.out.empty()) {
        if (!fs::path(a.out).parent_path().empty()) fs::create_directories(fs::path(a.out).parent_path());
        io::write_file_atomic(a.out + ".txt", report.text());
        io::write_file_atomic(a.out + ".csv", report.csv());
        detail::write_records(detail::records_for("evaluate", a.out, false),
                              {{"command", "evaluate"}, {"options", detail::options_record(cx.sub)}},
                              config::seeds_record(0, {}));
    }
    return kExitOk;
}

/// Architecture dump for a checkpoint, or for a config when no checkpoint is given.
inline int cmd_manifest(const Context& cx) {
    const Args& a = cx.args;
    std::unique_ptr<model::StyleBrushModel<float>> m;
    config::RunConfig rc;
    if (!a.checkpoint.empty()) {
        m = std::make_unique<model::StyleBrushModel<float>>(train::load_model<float>(a.checkpoint));
    } else {
        rc = config::load(a.config, a.sets);
        codec::Codec<float> c(rc.codec.model, derive_seed(rc.seed, "codec-init"));
        m = std::make_unique<model::StyleBrushModel<float>>(rc.model, std::move(c), derive_seed(rc.seed, "init"));
    }
    const int f = m->codec().config().spatial_factor;
    const int d = m->required_divisor();
    require(a.height % d == 0 && a.width % d == 0, ErrorKind::usage,
            "image size must be divisible by " + std::to_string(d));
    const json arch = m->architecture(a.height / f, a.width / f);
    cx.out << arch.dump(2) << "\n";
    if (!a.out.empty()) {
        io::write_file_atomic(a.out, arch.dump(2) + "\n");
        json eff{{"command", "manifest"}, {"options", detail::options_record(cx.sub)}};
        if (a.checkpoint.empty()) eff["config"] = rc.tree;
        detail::write_records(detail::records_for("manifest", a.out, false), eff,
                              config::seeds_record(rc.seed, {"codec-init", "init"}));
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// Dispatch

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    Args a;
    CLI::App app{"stylebrush: reference-guided latent diffusion stylization", "stylebrush"};
    app.require_subcommand(1, 1);
    app.option_defaults()->always_capture_default();
    app.add_option("--log-level", a.log_level, "debug, info, warn, error or off")
        ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

    std::vector<std::pair<CLI::App*, std::function<int(const Context&)>>> commands;
    auto add = [&](const char* name, const char* help, std::function<int(const Context&)> fn) {
        CLI::App* s = app.add_subcommand(name, help);
        commands.emplace_back(s, std::move(fn));
        return s;
    };
    auto config_flags = [&](CLI::App* s) {
        s->add_option("--config", a.config, "JSON config file");
        s->add_option("--set", a.sets, "override, key.path=value (repeatable)")->allow_extra_args(false);
    };
    auto sampling_flags = [&](CLI::App* s) {
        s->add_option("--checkpoint", a.checkpoint, "trained model checkpoint")->required();
        s->add_option("--reference", a.reference, "style reference PNG")->required();
        s->add_option("--strength", a.strength, "style strength in [0,1]");
        s->add_option("--steps", a.steps, "DDIM steps");
        s->add_option("--eta", a.eta, "DDIM eta in [0,1]");
        s->add_option("--seed", a.seed, "master seed");
        s->add_option("--chain", a.chain, "explicit blur chain, e.g. min:5,gauss:7,box:3");
        s->add_flag("--from-content", a.from_content, "start from the noised content latent");
        s->add_option("--start-timestep", a.start_timestep, "first timestep with --from-content (-1: 60% of T)");
    };

    {
        auto* s = add("gen-corpus", "write the procedural toy corpus", cmd_gen_corpus);
        s->add_option("--out", a.out, "output directory")->required();
        s->add_option("--count", a.count, "number of images");
        s->add_option("--size", a.size, "image side in pixels");
        s->add_option("--palettes", a.palettes, "0: random hue per image, 2: two alternating palettes");
        s->add_option("--seed", a.seed, "master seed");
        s->add_option("--test-fraction", a.test_fraction, "fraction of images in the test split");
    }
    {
        auto* s = add("make-pairs", "preview training pairs from a manifest", cmd_make_pairs);
        s->add_option("--manifest", a.manifest, "manifest.jsonl")->required();
        s->add_option("--out", a.out, "output directory")->required();
        s->add_option("--count", a.count, "number of pairs")->default_val(8);
        s->add_option("--seed", a.seed, "master seed");
        s->add_option("--split", a.split, "train, test or empty for all");
        s->add_option("--crop-fraction", a.crop_fraction, "crop side relative to the image");
        s->add_option("--multiple", a.multiple, "crop sides are rounded down to this multiple");
    }
    {
        auto* s = add("extract-structure", "gray + nested blur structure image", cmd_extract_structure);
        s->add_option("--input", a.input, "input PNG")->required();
        s->add_option("--out", a.out, "output PNG")->required();
        s->add_option("--seed", a.seed, "seed of the sampled blur chain");
        s->add_option("--chain", a.chain, "explicit chain, e.g. min:5,gauss:7,box:3");
    }
    {
        auto* s = add("pretrain-codec", "fit the latent codec on a corpus", cmd_pretrain_codec);
        config_flags(s);
        s->add_option("--manifest", a.manifest, "shorthand for --set data.manifest=...");
        s->add_option("--out", a.out, "codec checkpoint to write")->required();
    }
    {
        auto* s = add("train", "train the stylization model", cmd_train);
        config_flags(s);
        s->add_option("--out", a.out, "run directory")->required();
        s->add_option("--resume", a.resume, "training checkpoint to resume from");
    }
    {
        auto* s = add("stylize", "stylize one content image", cmd_stylize);
        s->add_option("--content", a.content, "content PNG")->required();
        s->add_option("--out", a.out, "output PNG")->required();
        sampling_flags(s);
    }
    {
        auto* s = add("stylize-video", "stylize a directory of numbered PNG frames", cmd_stylize_video);
        s->add_option("--frames", a.frames, "directory of frames")->required();
        s->add_option("--out", a.out, "output directory")->required();
        sampling_flags(s);
    }
    {
        auto* s = add("evaluate", "FID, perceptual distance and ArtFID over result/style/content directories",
                      cmd_evaluate);
        s->add_option("--results", a.results, "stylized images")->required();
        s->add_option("--styles", a.styles, "style references, same file names")->required();
        s->add_option("--contents", a.contents, "content images, same file names")->required();
        s->add_option("--fid-extractor", a.fid_extractor, "color-stats or codec-pool");
        s->add_option("--perceptual", a.perceptual, "codec-lpips-surrogate, pixel-pyramid or auto");
        s->add_option("--codec", a.codec, "codec checkpoint for codec-based extractors");
        s->add_option("--out", a.out, "report prefix; writes <prefix>.txt and <prefix>.csv");
    }
    {
        auto* s = add("manifest", "dump the architecture: attention sites, shapes, parameter counts", cmd_manifest);
        s->add_option("--checkpoint", a.checkpoint, "model checkpoint (default: a fresh model from the config)");
        config_flags(s);
        s->add_option("--height", a.height, "image height");
        s->add_option("--width", a.width, "image width");
        s->add_option("--seed", a.seed, "unused; recorded for completeness");
        s->add_option("--out", a.out, "also write the JSON here");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error[usage]: " << e.what() << "\n";
        err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return kExitUsage;
    }

    const std::vector<std::string> levels{"debug", "info", "warn", "error", "off"};
    log::set_level(static_cast<log::Level>(std::find(levels.begin(), levels.end(), a.log_level) - levels.begin()));

    for (const auto& [sub, fn] : commands) {
        if (!sub->parsed()) continue;
        try {
            return fn(Context{*sub, a, out});
        } catch (const Error& e) {
            err << "error[" << to_string(e.kind()) << "]: " << e.what() << "\n";
            return exit_code(e.kind());
        } catch (const nlohmann::json::exception& e) {
            err << "error[config]: " << e.what() << "\n";
            return kExitUsage;
        } catch (const std::filesystem::filesystem_error& e) {
            err << "error[io]: " << e.what() << "\n";
            return kExitRuntime;
        } catch (const std::exception& e) {
            err << "error[internal]: " << e.what() << "\n";
            return kExitRuntime;
        }
    }
    return kExitUsage;
}

}  // namespace stylebrush::cli
