#pragma once

// Training-pair construction from single images, the procedural toy corpus,
// the JSON-lines dataset manifest and the aesthetic filter hook.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stylebrush/core/log.hpp"
#include "stylebrush/core/rng.hpp"
#include "stylebrush/io/container.hpp"
#include "stylebrush/io/png.hpp"
#include "stylebrush/structure.hpp"

namespace stylebrush::data {

namespace fs = std::filesystem;

struct Point {
    int x = 0;
    int y = 0;
    bool operator==(const Point&) const = default;
};

struct Size2 {
    int w = 0;
    int h = 0;
    bool operator==(const Size2&) const = default;
};

/// Crop of `size` whose top-left corner is center - size/2 (integer division).
struct CropSpec {
    Point center;
    Size2 size;

    Point origin() const { return {center.x - size.w / 2, center.y - size.h / 2}; }
    bool operator==(const CropSpec&) const = default;
};

inline constexpr int kCropAttempts = 5;

/// Range of valid crop centres along one axis.
inline std::pair<int, int> center_range(int image, int crop) { return {crop / 2, image - crop + crop / 2}; }

/// Indices (i < j) of the two candidates farthest apart; ties keep the
/// lexicographically first pair. Warns when every candidate coincides.
inline std::pair<std::size_t, std::size_t> select_farthest_pair(std::span<const Point> candidates) {
    require(candidates.size() >= 2, ErrorKind::data, "need at least two crop candidates");
    std::pair<std::size_t, std::size_t> best{0, 1};
    long best_d = -1;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        for (std::size_t j = i + 1; j < candidates.size(); ++j) {
            const long dx = candidates[i].x - candidates[j].x, dy = candidates[i].y - candidates[j].y;
            const long d = dx * dx + dy * dy;
            if (d > best_d) {
                best_d = d;
                best = {i, j};
            }
        }
    if (best_d == 0) log::warn("all crop candidates coincide; content and reference crops are identical");
    return best;
}

/// Draws the candidate centres used by sample_crop_pair.
inline std::vector<Point> crop_candidates(Size2 image, Size2 crop, std::uint64_t seed) {
    require(crop.w > 0 && crop.h > 0, ErrorKind::data, "crop size must be positive");
    require(crop.w <= image.w && crop.h <= image.h, ErrorKind::data,
            "crop " + std::to_string(crop.w) + "x" + std::to_string(crop.h) + " larger than image " +
                std::to_string(image.w) + "x" + std::to_string(image.h));
    require(crop.w < image.w || crop.h < image.h, ErrorKind::data, "image admits a single crop position only");
    Rng rng(derive_seed(seed, "crop"));
    const auto [x0, x1] = center_range(image.w, crop.w);
    const auto [y0, y1] = center_range(image.h, crop.h);
    std::vector<Point> pts;
    for (int i = 0; i < kCropAttempts; ++i) {
        const int x = rng.uniform_int(x0, x1);
        const int y = rng.uniform_int(y0, y1);
        pts.push_back({x, y});
    }
    return pts;
}

/// Five random centres; the farthest-apart pair gives (content, reference).
inline std::pair<CropSpec, CropSpec> sample_crop_pair(Size2 image, Size2 crop, std::uint64_t seed) {
    const auto pts = crop_candidates(image, crop, seed);
    const auto [i, j] = select_farthest_pair(pts);
    return {CropSpec{pts[i], crop}, CropSpec{pts[j], crop}};
}

template <class T>
Tensor<T> crop(const Tensor<T>& img, const CropSpec& spec) {
    require(img.rank() == 3, ErrorKind::shape, "crop expects [C,H,W]");
    const Point o = spec.origin();
    require(o.x >= 0 && o.y >= 0 && o.x + spec.size.w <= img.dim(2) && o.y + spec.size.h <= img.dim(1), ErrorKind::data,
            "crop lies outside the image");
    Tensor<T> out({img.dim(0), spec.size.h, spec.size.w});
    for (int c = 0; c < img.dim(0); ++c)
        for (int y = 0; y < spec.size.h; ++y)
            std::copy_n(&img.at(c, o.y + y, o.x), spec.size.w, &out.at(c, y, 0));
    return out;
}

/// Crop side lengths as a fraction of the source, rounded down to `multiple`.
inline Size2 crop_size_for(Size2 image, double fraction, int multiple) {
    require(fraction > 0 && fraction <= 1, ErrorKind::config, "crop fraction must lie in (0,1]");
    auto side = [&](int n) { return std::max(multiple, static_cast<int>(n * fraction) / multiple * multiple); };
    return {side(image.w), side(image.h)};
}

template <class T>
struct TrainingPair {
    Tensor<T> content;
    Tensor<T> reference;
    structure::StructureImage<T> structure;
    Tensor<T> ground_truth;
    std::string source_id;
    CropSpec content_crop;
    CropSpec reference_crop;
    std::uint64_t crop_seed = 0;
    std::uint64_t blur_seed = 0;
};

/// Content and reference are crops of one source; the structure image is the
/// content made gray and blurred; the target is the content itself.
template <class T>
TrainingPair<T> build_training_pair(const Tensor<T>& source, Size2 crop_size, std::uint64_t seed,
                                    const structure::BlurConfig& blur = {}, std::string source_id = {}) {
    require(source.rank() == 3 && source.dim(0) == 3, ErrorKind::shape, "training source must be [3,H,W]");
    TrainingPair<T> p;
    p.crop_seed = derive_seed(seed, "pair-crop");
    p.blur_seed = derive_seed(seed, "pair-blur");
    const auto [c, r] = sample_crop_pair({source.dim(2), source.dim(1)}, crop_size, p.crop_seed);
    p.content_crop = c;
    p.reference_crop = r;
    p.content = crop(source, c);
    p.reference = crop(source, r);
    p.structure = structure::extract_structure(p.content, structure::sample_blur_chain(p.blur_seed, blur));
    p.ground_truth = p.content;
    p.source_id = std::move(source_id);
    return p;
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr const char* kManifestFormat = "stylebrush-manifest";
inline constexpr int kManifestVersion = 1;

struct ManifestRecord {
    std::string path;  // relative to the manifest's directory
    std::string split = "train";
    std::optional<double> score;
    int palette = -1;
    double hue = -1;
};

struct DatasetManifest {
    int version = kManifestVersion;
    fs::path root;  // directory that relative paths resolve against
    std::vector<ManifestRecord> records;

    fs::path resolve(const ManifestRecord& r) const { return root / r.path; }

    std::vector<ManifestRecord> split(const std::string& tag) const {
        std::vector<ManifestRecord> out;
        for (const auto& r : records)
            if (r.split == tag) out.push_back(r);
        return out;
    }
};

inline nlohmann::json to_json(const ManifestRecord& r) {
    nlohmann::json j{{"path", r.path}, {"split", r.split}};
    if (r.score) j["score"] = *r.score;
    if (r.palette >= 0) j["palette"] = r.palette;
    if (r.hue >= 0) j["hue"] = r.hue;
    return j;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
    std::string text = nlohmann::json{{"format", kManifestFormat}, {"version", m.version}}.dump() + "\n";
    for (const auto& r : m.records) text += to_json(r).dump() + "\n";
    io::write_file_atomic(path, text);
}

/// Parses a manifest; every listed file must exist and splits are
/// train/test only.
inline DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "manifest not found: " + path.string());
    DatasetManifest m;
    m.root = path.parent_path();
    std::string line;
    int lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::data, path.string() + ":" + std::to_string(lineno) + ": not a JSON record");
        }
        if (!header) {
            require(j.value("format", "") == kManifestFormat, ErrorKind::data,
                    path.string() + " does not start with a manifest header");
            m.version = j.value("version", -1);
            require(m.version == kManifestVersion, ErrorKind::data,
                    "manifest version " + std::to_string(m.version) + " is not supported");
            header = true;
            continue;
        }
        ManifestRecord r;
        r.path = j.at("path").get<std::string>();
        r.split = j.value("split", "train");
        require(r.split == "train" || r.split == "test", ErrorKind::data, "unknown split '" + r.split + "'");
        if (j.contains("score")) r.score = j.at("score").get<double>();
        r.palette = j.value("palette", -1);
        r.hue = j.value("hue", -1.0);
        require(fs::exists(m.root / r.path), ErrorKind::data, "manifest entry missing on disk: " + (m.root / r.path).string());
        m.records.push_back(std::move(r));
    }
    require(header, ErrorKind::data, "empty manifest: " + path.string());
    return m;
}

/// Manifest over every PNG in a folder (sorted by name); a deterministic
/// fraction goes to the test split.
inline DatasetManifest manifest_from_folder(const fs::path& dir, double test_fraction, std::uint64_t seed) {
    require(fs::is_directory(dir), ErrorKind::io, "not a directory: " + dir.string());
    DatasetManifest m;
    m.root = dir;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (std::size_t i = 0; i < names.size(); ++i) {
        Rng rng(derive_seed(seed, "split", i));
        m.records.push_back({names[i], rng.uniform() < test_fraction ? "test" : "train", std::nullopt, -1, -1});
    }
    return m;
}

template <class T = float>
std::vector<Tensor<T>> load_images(const DatasetManifest& m, const std::string& split = "train") {
    std::vector<Tensor<T>> out;
    for (const auto& r : m.records)
        if (split.empty() || r.split == split) out.push_back(io::read_png<T>(m.resolve(r)));
    return out;
}

/// Epoch visiting order: a pure function of (n, seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "epoch", epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(0, int(i) - 1))]);
    return idx;
}

// ---------------------------------------------------------------------------
// Aesthetic filter

using Scorer = std::function<double(const fs::path&)>;

inline constexpr double kStubScore = 5.0;

/// Stand-in for a learned aesthetic model: every image scores the same.
inline Scorer constant_scorer(double value = kStubScore) {
    return [value](const fs::path&) { return value; };
}

/// Keeps records scoring at least `threshold` and stores their scores.
/// Files the scorer cannot handle are dropped with a warning.
inline DatasetManifest aesthetic_filter(const DatasetManifest& m, const Scorer& scorer, double threshold) {
    DatasetManifest out;
    out.version = m.version;
    out.root = m.root;
    for (const auto& r : m.records) {
        double s = 0;
        try {
            s = scorer(m.resolve(r));
        } catch (const std::exception& e) {
            log::warn("scorer failed on ", r.path, " (", e.what(), "); skipping");
            continue;
        }
        if (s < threshold) continue;
        ManifestRecord kept = r;
        kept.score = s;
        out.records.push_back(std::move(kept));
    }
    if (out.records.empty() && !m.records.empty())
        log::warn("aesthetic filter removed every image (threshold ", threshold, ")");
    return out;
}

// ---------------------------------------------------------------------------
// Toy corpus

struct Rgb {
    double r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int i = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

/// Style of one toy image: three colours derived from a hue and a stroke
/// field (orientation, frequency, warp).
struct ToyStyle {
    double hue = 0;
    Rgb light{}, mid{}, dark{};
    double angle = 0, frequency = 0, warp = 0, phase = 0;

    static ToyStyle from_hue(double hue, Rng& rng) {
        ToyStyle s;
        s.hue = hue;
        s.light = hsv_to_rgb(hue, 0.55, 0.95);
        s.mid = hsv_to_rgb(hue + 0.04, 0.85, 0.6);
        s.dark = hsv_to_rgb(hue - 0.03, 0.75, 0.3);
        s.angle = rng.uniform(0, M_PI);
        s.frequency = rng.uniform(0.6, 1.0);
        s.warp = rng.uniform(0.8, 2.0);
        s.phase = rng.uniform(0, 2 * M_PI);
        return s;
    }

    Rgb mean_color() const {
        return {(light.r + mid.r) / 2, (light.g + mid.g) / 2, (light.b + mid.b) / 2};
    }
};

/// One image: the stroke texture everywhere (style) plus a few dark shapes
/// (content). Values in [-1,1].
template <class T = float>
Tensor<T> generate_toy_image(int size, const ToyStyle& style, Rng& rng) {
    Tensor<T> img({3, size, size});
    const double ca = std::cos(style.angle), sa = std::sin(style.angle);
    struct Shape2 {
        bool circle;
        double cx, cy, a, b;
    };
    std::vector<Shape2> shapes;
    const int n_shapes = rng.uniform_int(2, 3);
    for (int i = 0; i < n_shapes; ++i) {
        Shape2 s;
        s.circle = rng.uniform() < 0.5;
        s.cx = rng.uniform(0.1, 0.9) * size;
        s.cy = rng.uniform(0.1, 0.9) * size;
        s.a = rng.uniform(0.05, 0.09) * size;
        s.b = rng.uniform(0.05, 0.09) * size;
        shapes.push_back(s);
    }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = x * ca + y * sa, v = -x * sa + y * ca;
            const double stroke = 0.5 + 0.5 * std::sin(style.frequency * u + style.warp * std::sin(0.21 * v) + style.phase);
            Rgb c{style.light.r + (style.mid.r - style.light.r) * stroke, style.light.g + (style.mid.g - style.light.g) * stroke,
                  style.light.b + (style.mid.b - style.light.b) * stroke};
            bool inside = false;
            for (const auto& s : shapes) {
                const double dx = (x - s.cx) / s.a, dy = (y - s.cy) / s.b;
                inside |= s.circle ? dx * dx + dy * dy <= 1.0 : (std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0);
            }
            if (inside) {
                const double k = 0.8 + 0.2 * stroke;
                c = {style.dark.r * k, style.dark.g * k, style.dark.b * k};
            }
            img.at(0, y, x) = static_cast<T>(c.r * 2 - 1);
            img.at(1, y, x) = static_cast<T>(c.g * 2 - 1);
            img.at(2, y, x) = static_cast<T>(c.b * 2 - 1);
        }
    return img;
}

struct ToyCorpusOptions {
    int count = 256;
    int size = 64;
    std::uint64_t seed = 0;
    /// 0: a random hue per image. 2: two opposite hues, alternating.
    int palettes = 0;
    double test_fraction = 0.1;
};

inline double toy_hue(const ToyCorpusOptions& o, std::size_t index) {
    if (o.palettes == 2) {
        Rng rng(derive_seed(o.seed, "palette-base"));
        const double base = rng.uniform();
        return std::fmod(base + 0.5 * double(index % 2), 1.0);
    }
    Rng rng(derive_seed(o.seed, "hue", index));
    return rng.uniform();
}

/// Image `index` of the corpus described by `o`, without touching disk.
template <class T = float>
Tensor<T> toy_image(const ToyCorpusOptions& o, std::size_t index) {
    Rng rng(derive_seed(o.seed, "toy-image", index));
    const ToyStyle style = ToyStyle::from_hue(toy_hue(o, index), rng);
    return generate_toy_image<T>(o.size, style, rng);
}

/// Writes `count` PNGs plus manifest.jsonl into `dir`.
inline DatasetManifest generate_toy_corpus(const fs::path& dir, const ToyCorpusOptions& o) {
    require(o.count >= 1, ErrorKind::config, "corpus needs at least one image");
    require(o.size >= 8, ErrorKind::config, "corpus images must be at least 8 pixels");
    require(o.palettes == 0 || o.palettes == 2, ErrorKind::config, "palettes must be 0 (random) or 2");
    fs::create_directories(dir);
    DatasetManifest m;
    m.root = dir;
    for (std::size_t i = 0; i < static_cast<std::size_t>(o.count); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "toy_%05zu.png", i);
        io::write_png(dir / name, toy_image<float>(o, i));
        ManifestRecord r;
        r.path = name;
        Rng split_rng(derive_seed(o.seed, "split", i));
        r.split = split_rng.uniform() < o.test_fraction ? "test" : "train";
        r.hue = toy_hue(o, i);
        r.palette = o.palettes == 2 ? static_cast<int>(i % 2) : -1;
        m.records.push_back(std::move(r));
    }
    write_manifest(dir / "manifest.jsonl", m);
    return m;
}

/// Normalised 4x4x4 RGB histogram of an image in [-1,1].
template <class T>
std::vector<double> color_histogram(const Tensor<T>& img, int bins = 4) {
    const int h = img.dim(1), w = img.dim(2);
    std::vector<double> hist(static_cast<std::size_t>(bins * bins * bins), 0.0);
    auto bin = [&](T v) { return std::clamp(static_cast<int>((double(v) + 1) / 2 * bins), 0, bins - 1); };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            hist[static_cast<std::size_t>((bin(img.at(0, y, x)) * bins + bin(img.at(1, y, x))) * bins + bin(img.at(2, y, x)))] += 1;
    for (double& v : hist) v /= double(h * w);
    return hist;
}

inline double histogram_intersection(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), ErrorKind::shape, "histograms differ in size");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    return s;
}

}  // namespace stylebrush::data
