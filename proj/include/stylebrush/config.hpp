#pragma once

// Run configuration: one JSON tree with a section per module. A config file
// and `key.path=value` overrides are merged onto the defaults; keys that the
// defaults do not have are rejected.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylebrush/codec.hpp"
#include "stylebrush/model.hpp"
#include "stylebrush/train.hpp"

namespace stylebrush::config {

namespace fs = std::filesystem;
using nlohmann::json;

struct DataConfig {
    std::string manifest;
    std::string split = "train";
};

struct CodecSection {
    std::string checkpoint;
    codec::CodecConfig model;
    codec::PretrainConfig pretrain;
};

struct RunConfig {
    std::uint64_t seed = 0;
    train::TrainConfig train;
    model::ModelConfig model;
    DataConfig data;
    CodecSection codec;
    json tree;  // effective tree, as echoed to the run directory
};

namespace detail {

// Keys that the model derives from other components; they are not
// configurable and are filled in before typed parsing.
inline const std::vector<std::string>& derived_keys() {
    static const std::vector<std::string> keys{"/unet/in_channels", "/unet/context_dim", "/guider/out_channels",
                                               "/guider/in_channels", "/semantic/latent_channels"};
    return keys;
}

inline const char* type_name(const json& j) {
    if (j.is_boolean()) return "boolean";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

inline bool compatible(const json& def, const json& v) {
    if (def.is_number()) return v.is_number();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) return v.is_array();
    if (def.is_object()) return v.is_object();
    return true;
}

inline void merge_into(json& base, const json& overlay, const std::string& path) {
    require(overlay.is_object(), ErrorKind::config, "config section '" + path + "' must be an object");
    for (const auto& [key, value] : overlay.items()) {
        const std::string full = path.empty() ? key : path + "." + key;
        require(base.contains(key), ErrorKind::config, "unknown config key '" + full + "'");
        json& slot = base[key];
        require(compatible(slot, value), ErrorKind::config,
                "config key '" + full + "' expects a " + type_name(slot) + ", got a " + type_name(value));
        if (slot.is_object())
            merge_into(slot, value, full);
        else
            slot = value;
    }
}

}  // namespace detail

inline json default_tree() {
    json t;
    t["seed"] = 0;
    t["train"] = train::TrainConfig{};
    t["train"].erase("seed");
    const model::ModelConfig mc;
    t["diffusion"] = mc.diffusion;
    t["unet"] = mc.unet;
    t["guider"] = mc.guider;
    t["semantic"] = mc.semantic;
    t["inject_structure"] = mc.inject_structure;
    t["data"] = {{"manifest", ""}, {"split", "train"}};
    const codec::PretrainConfig pc;
    t["codec"] = {{"checkpoint", ""},
                  {"model", codec::CodecConfig{}},
                  {"pretrain",
                   {{"steps", pc.steps}, {"batch", pc.batch}, {"crop", pc.crop}, {"learning_rate", pc.learning_rate}, {"log_every", pc.log_every}}}};
    t["codec"]["model"].erase("latent_scale");
    for (const auto& k : detail::derived_keys()) {
        const json::json_pointer p(k);
        json& parent = t[p.parent_pointer()];
        parent.erase(p.back());
    }
    return t;
}

/// "a.b.c=value"; the value is parsed as JSON and otherwise taken as a string.
inline void apply_override(json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::config, "override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json patch = value;
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        parts.push_back(key.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    detail::merge_into(tree, patch, "");
}

inline json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::config, "config not found: " + path.string());
    try {
        return json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        fail(ErrorKind::config, "cannot parse config " + path.string() + ": " + e.what());
    }
}

/// Typed view of a merged tree.
inline RunConfig from_tree(const json& tree) {
    RunConfig rc;
    rc.tree = tree;
    try {
        rc.seed = tree.at("seed").get<std::uint64_t>();
        json tr = tree.at("train");
        tr["seed"] = rc.seed;
        rc.train = tr.get<train::TrainConfig>();
        json unet = tree.at("unet");
        unet["in_channels"] = 4;
        unet["context_dim"] = tree.at("semantic").at("d_model");
        json guider = tree.at("guider");
        guider["out_channels"] = unet.at("base_width");
        guider["in_channels"] = 3;
        json semantic = tree.at("semantic");
        semantic["latent_channels"] = 4;
        rc.model.diffusion = tree.at("diffusion").get<model::DiffusionConfig>();
        rc.model.unet = unet.get<denoiser::UNetConfig>();
        rc.model.guider = guider.get<structure::GuiderConfig>();
        rc.model.semantic = semantic.get<stylenet::SemanticConfig>();
        rc.model.inject_structure = tree.at("inject_structure").get<bool>();
        rc.data.manifest = tree.at("data").at("manifest").get<std::string>();
        rc.data.split = tree.at("data").at("split").get<std::string>();
        const json& c = tree.at("codec");
        rc.codec.checkpoint = c.at("checkpoint").get<std::string>();
        json cm = c.at("model");
        cm["latent_scale"] = 1.0;
        rc.codec.model = cm.get<codec::CodecConfig>();
        const json& p = c.at("pretrain");
        rc.codec.pretrain.steps = p.at("steps").get<int>();
        rc.codec.pretrain.batch = p.at("batch").get<int>();
        rc.codec.pretrain.crop = p.at("crop").get<int>();
        rc.codec.pretrain.learning_rate = p.at("learning_rate").get<double>();
        rc.codec.pretrain.log_every = p.at("log_every").get<int>();
        rc.codec.pretrain.seed = derive_seed(rc.seed, "codec-pretrain");
    } catch (const json::exception& e) {
        fail(ErrorKind::config, std::string("malformed config: ") + e.what());
    }
    rc.train.validate();
    rc.model.unet.validate();
    rc.codec.model.validate();
    require(rc.data.split == "train" || rc.data.split == "test" || rc.data.split.empty(), ErrorKind::config,
            "data.split must be 'train', 'test' or empty");
    require(rc.model.diffusion.steps >= 1, ErrorKind::config, "diffusion.steps must be >= 1");
    return rc;
}

/// Defaults, then the optional file, then overrides in order.
inline RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
    json tree = default_tree();
    if (!path.empty()) detail::merge_into(tree, read_json_file(path), "");
    for (const auto& o : overrides) apply_override(tree, o);
    return from_tree(tree);
}

/// Seeds of every stream a run derives from its master seed.
inline json seeds_record(std::uint64_t master, const std::vector<std::string>& streams) {
    json j{{"master_seed", master}, {"derivation", "splitmix64(master ^ fnv1a64(stream)) [+ index mixing]"}};
    json s = json::object();
    for (const auto& name : streams) s[name] = derive_seed(master, name);
    j["streams"] = s;
    return j;
}

}  // namespace stylebrush::config
