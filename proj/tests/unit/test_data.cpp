#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "stylebrush/data.hpp"

using namespace stylebrush;
using namespace stylebrush::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("stylebrush_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

long dist2(Point a, Point b) { return long(a.x - b.x) * (a.x - b.x) + long(a.y - b.y) * (a.y - b.y); }

}  // namespace

TEST(CropPair, WorkedExamplePicksTheEnds) {
    const std::vector<Point> pts{{0, 0}, {5, 5}, {10, 10}, {15, 15}, {20, 20}};
    const auto [i, j] = select_farthest_pair(pts);
    EXPECT_EQ(pts[i], (Point{0, 0}));
    EXPECT_EQ(pts[j], (Point{20, 20}));
}

TEST(CropPair, TiesKeepTheFirstPair) {
    const std::vector<Point> pts{{0, 0}, {4, 0}, {0, 4}, {4, 4}, {2, 2}};
    const auto [i, j] = select_farthest_pair(pts);
    EXPECT_EQ(i, 0u);
    EXPECT_EQ(j, 3u);
    const std::vector<Point> same(5, Point{3, 3});
    EXPECT_EQ(select_farthest_pair(same), (std::pair<std::size_t, std::size_t>{0, 1}));
    EXPECT_THROW(select_farthest_pair(std::vector<Point>{{1, 1}}), Error);
}

TEST(CropPair, MatchesBruteForceOverManySeeds) {
    const Size2 image{64, 48}, crop{32, 24};
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto pts = crop_candidates(image, crop, seed);
        ASSERT_EQ(pts.size(), static_cast<std::size_t>(kCropAttempts));
        long best = -1;
        Point bi{}, bj{};
        for (std::size_t a = 0; a < pts.size(); ++a)
            for (std::size_t b = a + 1; b < pts.size(); ++b)
                if (dist2(pts[a], pts[b]) > best) {
                    best = dist2(pts[a], pts[b]);
                    bi = pts[a];
                    bj = pts[b];
                }
        const auto [c, r] = sample_crop_pair(image, crop, seed);
        ASSERT_EQ(c.center, bi) << "seed " << seed;
        ASSERT_EQ(r.center, bj) << "seed " << seed;
        for (const auto& s : {c, r}) {
            const Point o = s.origin();
            ASSERT_GE(o.x, 0);
            ASSERT_GE(o.y, 0);
            ASSERT_LE(o.x + crop.w, image.w);
            ASSERT_LE(o.y + crop.h, image.h);
        }
    }
}

TEST(CropPair, RejectsImpossibleCrops) {
    EXPECT_THROW(sample_crop_pair({16, 16}, {32, 8}, 0), Error);
    EXPECT_THROW(sample_crop_pair({16, 16}, {16, 16}, 0), Error);
    EXPECT_THROW(sample_crop_pair({16, 16}, {0, 8}, 0), Error);
}

TEST(CropPair, CropSizeRoundsDownToMultiple) {
    EXPECT_EQ(crop_size_for({64, 64}, 0.5, 8), (Size2{32, 32}));
    EXPECT_EQ(crop_size_for({100, 60}, 0.5, 8), (Size2{48, 24}));
    EXPECT_EQ(crop_size_for({10, 10}, 0.5, 8), (Size2{8, 8}));
    EXPECT_THROW(crop_size_for({64, 64}, 0.0, 8), Error);
}

TEST(TrainingPair, CropsComeFromTheSourceAndTargetIsContent) {
    ToyCorpusOptions o;
    const auto src = toy_image<float>(o, 3);
    const auto p = build_training_pair(src, {32, 32}, 17);
    EXPECT_EQ(p.ground_truth, p.content);
    EXPECT_EQ(p.content, crop(src, p.content_crop));
    EXPECT_EQ(p.reference, crop(src, p.reference_crop));
    EXPECT_EQ(p.structure.data, structure::extract_structure(p.content, structure::sample_blur_chain(p.blur_seed)).data);
    const auto again = build_training_pair(src, {32, 32}, 17);
    EXPECT_EQ(again.content_crop, p.content_crop);
    EXPECT_EQ(again.structure.data, p.structure.data);
}

TEST(Manifest, RoundTripAndValidation) {
    const fs::path dir = temp_dir("manifest");
    ToyCorpusOptions o;
    o.count = 6;
    o.size = 16;
    o.palettes = 2;
    o.test_fraction = 0.5;
    const auto written = generate_toy_corpus(dir, o);
    const auto back = read_manifest(dir / "manifest.jsonl");
    ASSERT_EQ(back.records.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(back.records[i].path, written.records[i].path);
        EXPECT_EQ(back.records[i].split, written.records[i].split);
        EXPECT_EQ(back.records[i].palette, static_cast<int>(i % 2));
    }
    EXPECT_EQ(back.split("train").size() + back.split("test").size(), 6u);
    EXPECT_EQ(load_images<float>(back, "").size(), 6u);
    EXPECT_EQ(load_images<float>(back, "")[2], io::read_png<float>(dir / "toy_00002.png"));

    fs::remove(dir / "toy_00001.png");
    EXPECT_THROW(read_manifest(dir / "manifest.jsonl"), Error);
    {
        std::ofstream bad(dir / "bad.jsonl");
        bad << "{\"format\":\"something-else\",\"version\":1}\n";
    }
    EXPECT_THROW(read_manifest(dir / "bad.jsonl"), Error);
    EXPECT_THROW(read_manifest(dir / "missing.jsonl"), Error);
}

TEST(Manifest, FolderListingIsSortedAndDeterministic) {
    const fs::path dir = temp_dir("folder");
    for (const char* n : {"b.png", "a.png", "c.png"}) io::write_png(dir / n, Tensor<float>({3, 4, 4}));
    std::ofstream(dir / "notes.txt") << "x";
    const auto m = manifest_from_folder(dir, 0.3, 5);
    ASSERT_EQ(m.records.size(), 3u);
    EXPECT_EQ(m.records[0].path, "a.png");
    EXPECT_EQ(m.records[2].path, "c.png");
    const auto again = manifest_from_folder(dir, 0.3, 5);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.records[i].split, again.records[i].split);
}

TEST(AestheticFilter, KeepsHighScoresAndSkipsFailures) {
    DatasetManifest m;
    for (const char* n : {"a.png", "b.png", "c.png"}) {
        ManifestRecord r;
        r.path = n;
        m.records.push_back(r);
    }
    const Scorer scorer = [](const fs::path& p) {
        if (p.filename() == "c.png") throw std::runtime_error("unreadable");
        return p.filename() == "a.png" ? 6.0 : 4.0;
    };
    const auto kept = aesthetic_filter(m, scorer, 5.0);
    ASSERT_EQ(kept.records.size(), 1u);
    EXPECT_EQ(kept.records[0].path, "a.png");
    EXPECT_DOUBLE_EQ(*kept.records[0].score, 6.0);
    EXPECT_EQ(aesthetic_filter(m, constant_scorer(), 5.0).records.size(), 3u);
    EXPECT_EQ(aesthetic_filter(m, constant_scorer(), 5.5).records.size(), 0u);
}

TEST(EpochOrder, IsAPermutationAndVariesByEpoch) {
    const auto a = epoch_order(50, 3, 0);
    const auto b = epoch_order(50, 3, 1);
    EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 50u);
    EXPECT_EQ(*std::max_element(a.begin(), a.end()), 49u);
    EXPECT_NE(a, b);
    EXPECT_EQ(a, epoch_order(50, 3, 0));
}

TEST(ToyCorpus, ImagesAreDeterministicAndInRange) {
    ToyCorpusOptions o;
    o.size = 32;
    const auto a = toy_image<float>(o, 5);
    EXPECT_EQ(a, toy_image<float>(o, 5));
    EXPECT_NE(a, toy_image<float>(o, 6));
    for (float v : a.values()) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(ToyCorpus, PalettesSeparateByColourHistogram) {
    ToyCorpusOptions o;
    o.count = 20;
    o.size = 32;
    o.palettes = 2;
    std::vector<std::vector<double>> h;
    for (std::size_t i = 0; i < 20; ++i) {
        h.push_back(color_histogram(toy_image<float>(o, i)));
        EXPECT_DOUBLE_EQ(std::accumulate(h.back().begin(), h.back().end(), 0.0), 1.0);
    }
    double same = 0, cross = 0;
    int ns = 0, nc = 0;
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t j = i + 1; j < 20; ++j) {
            const double v = histogram_intersection(h[i], h[j]);
            if (i % 2 == j % 2) {
                same += v;
                ++ns;
            } else {
                cross += v;
                ++nc;
            }
        }
    EXPECT_GT(same / ns, cross / nc + 0.3);
    EXPECT_DOUBLE_EQ(histogram_intersection(h[0], h[0]), 1.0);
    EXPECT_NEAR(std::fmod(toy_hue(o, 1) - toy_hue(o, 0) + 1.0, 1.0), 0.5, 1e-12);
}

TEST(ToyCorpus, HsvPrimaries) {
    const auto red = hsv_to_rgb(0.0, 1.0, 1.0);
    EXPECT_DOUBLE_EQ(red.r, 1.0);
    EXPECT_DOUBLE_EQ(red.g, 0.0);
    const auto blue = hsv_to_rgb(2.0 / 3.0, 1.0, 1.0);
    EXPECT_NEAR(blue.b, 1.0, 1e-12);
    EXPECT_NEAR(blue.r, 0.0, 1e-12);
}
