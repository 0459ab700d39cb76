#pragma once

// Frechet distance between Gaussian fits of feature sets, a perceptual
// distance surrogate, their ArtFID composition and a directory evaluator.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stylebrush/codec.hpp"
#include "stylebrush/io/container.hpp"
#include "stylebrush/io/png.hpp"

namespace stylebrush::metrics {

namespace fs = std::filesystem;

struct FeatureSet {
    Eigen::MatrixXd features;  // [n_samples, d]
    std::string extractor_id;

    int samples() const { return static_cast<int>(features.rows()); }
    int dim() const { return static_cast<int>(features.cols()); }
};

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

/// Mean and unbiased (n-1) covariance.
inline GaussianStats fit_gaussian(const FeatureSet& s) {
    require(s.samples() >= 2, ErrorKind::data, "a feature set needs at least two samples");
    require(s.features.allFinite(), ErrorKind::numeric, "feature set contains non-finite values");
    GaussianStats g;
    g.mean = s.features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = s.features.rowwise() - g.mean.transpose();
    g.cov = centered.transpose() * centered / double(s.samples() - 1);
    return g;
}

namespace detail {

/// Eigenvalues of a symmetric matrix, with small negatives clamped to zero.
/// Values below -tol * max(1, largest) mean the input is not PSD.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what,
                                                                double tol = 1e-8) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    require(es.info() == Eigen::Success, ErrorKind::numeric, std::string("eigendecomposition failed for ") + what);
    const double top = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    const double lowest = es.eigenvalues().minCoeff();
    require(lowest >= -tol * top, ErrorKind::numeric,
            std::string(what) + " is not positive semi-definite (eigenvalue " + std::to_string(lowest) + ")");
    return es;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    const auto es = psd_eigen(m, what);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), using
/// Tr((S1 S2)^(1/2)) = Tr((S1^(1/2) S2 S1^(1/2))^(1/2)).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    require(a.mean.size() == b.mean.size(), ErrorKind::shape,
            "feature dimensions differ: " + std::to_string(a.mean.size()) + " vs " + std::to_string(b.mean.size()));
    const Eigen::MatrixXd r1 = detail::psd_sqrt(a.cov, "first covariance");
    const Eigen::MatrixXd inner = r1 * b.cov * r1;
    const auto es = detail::psd_eigen(inner, "covariance product");
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

inline double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
    require(a.dim() == b.dim(), ErrorKind::shape,
            "feature dimensions differ: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
    return frechet_distance(fit_gaussian(a), fit_gaussian(b));
}

/// (1 + fid) * (1 + lpips).
inline double artfid(double fid, double lpips_mean) {
    require(fid >= 0 && lpips_mean >= 0, ErrorKind::usage, "artfid inputs must be non-negative");
    return (1.0 + fid) * (1.0 + lpips_mean);
}

// ---------------------------------------------------------------------------
// Extractors

/// Image [3,H,W] -> feature vector, for distribution statistics.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string id() const = 0;
    virtual std::vector<double> operator()(const Tensor<float>& img) const = 0;
};

/// Colour statistics: per-channel mean and std, channel correlations and
/// mean gradient magnitude. Needs no weights.
class ColorStatsExtractor : public FeatureExtractor {
public:
    std::string id() const override { return "color-stats"; }
    std::vector<double> operator()(const Tensor<float>& img) const override {
        const int h = img.dim(1), w = img.dim(2);
        const double n = double(h) * double(w);
        double mean[3] = {0, 0, 0};
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) mean[c] += img.at(c, y, x);
        for (double& m : mean) m /= n;
        double cov[3][3] = {};
        double grad[3] = {0, 0, 0};
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) {
                    for (int k = 0; k < 3; ++k) cov[c][k] += (img.at(c, y, x) - mean[c]) * (img.at(k, y, x) - mean[k]);
                    const double gx = img.at(c, y, std::min(x + 1, w - 1)) - img.at(c, y, x);
                    const double gy = img.at(c, std::min(y + 1, h - 1), x) - img.at(c, y, x);
                    grad[c] += std::sqrt(gx * gx + gy * gy);
                }
        std::vector<double> f;
        for (double m : mean) f.push_back(m);
        for (int c = 0; c < 3; ++c) f.push_back(std::sqrt(cov[c][c] / n));
        f.push_back(cov[0][1] / n);
        f.push_back(cov[0][2] / n);
        f.push_back(cov[1][2] / n);
        for (double g : grad) f.push_back(g / n);
        return f;
    }
};

/// Per-channel mean and std of every codec encoder activation.
class CodecPoolExtractor : public FeatureExtractor {
public:
    explicit CodecPoolExtractor(std::shared_ptr<const codec::Codec<float>> c) : codec_(std::move(c)) {}
    std::string id() const override { return "codec-pool"; }
    std::vector<double> operator()(const Tensor<float>& img) const override {
        std::vector<double> f;
        for (const auto& a : codec_->encoder_activations(img)) {
            const int ch = a.dim(1), hw = a.dim(2) * a.dim(3);
            for (int c = 0; c < ch; ++c) {
                double s = 0, s2 = 0;
                const float* p = a.data() + static_cast<std::size_t>(c) * hw;
                for (int i = 0; i < hw; ++i) {
                    s += p[i];
                    s2 += double(p[i]) * p[i];
                }
                const double m = s / hw;
                f.push_back(m);
                f.push_back(std::sqrt(std::max(s2 / hw - m * m, 0.0)));
            }
        }
        return f;
    }

private:
    std::shared_ptr<const codec::Codec<float>> codec_;
};

/// Image -> list of feature maps [C,h,w] compared position by position.
class PerceptualExtractor {
public:
    virtual ~PerceptualExtractor() = default;
    virtual std::string id() const = 0;
    virtual std::vector<Tensor<float>> maps(const Tensor<float>& img) const = 0;
};

namespace detail {
inline Tensor<float> avg_pool2(const Tensor<float>& x) {
    const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
    Tensor<float> out({c, h, w});
    for (int k = 0; k < c; ++k)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out.at(k, y, xx) = 0.25f * (x.at(k, 2 * y, 2 * xx) + x.at(k, 2 * y + 1, 2 * xx) + x.at(k, 2 * y, 2 * xx + 1) +
                                            x.at(k, 2 * y + 1, 2 * xx + 1));
    return out;
}
}  // namespace detail

/// Pixels plus every codec encoder activation: an LPIPS stand-in. Its
/// values are not comparable with published LPIPS numbers.
class CodecPerceptual : public PerceptualExtractor {
public:
    explicit CodecPerceptual(std::shared_ptr<const codec::Codec<float>> c) : codec_(std::move(c)) {}
    std::string id() const override { return "codec-lpips-surrogate"; }
    std::vector<Tensor<float>> maps(const Tensor<float>& img) const override {
        std::vector<Tensor<float>> out{img};
        for (auto& a : codec_->encoder_activations(img)) out.push_back(a.reshaped({a.dim(1), a.dim(2), a.dim(3)}));
        return out;
    }

private:
    std::shared_ptr<const codec::Codec<float>> codec_;
};

/// Weight-free fallback: a three-level average-pooling pyramid of pixels.
class PixelPyramidPerceptual : public PerceptualExtractor {
public:
    std::string id() const override { return "pixel-pyramid"; }
    std::vector<Tensor<float>> maps(const Tensor<float>& img) const override {
        std::vector<Tensor<float>> out{img};
        for (int i = 0; i < 2 && out.back().dim(1) >= 2 && out.back().dim(2) >= 2; ++i) out.push_back(detail::avg_pool2(out.back()));
        return out;
    }
};

namespace detail {
/// Copy of a [C,h,w] map, each position scaled to unit channel norm when
/// `normalise` is set.
inline std::vector<double> unit_channels(const Tensor<float>& a, bool normalise) {
    const int c = a.dim(0), hw = a.dim(1) * a.dim(2);
    std::vector<double> out(a.values().begin(), a.values().end());
    if (!normalise) return out;
    for (int i = 0; i < hw; ++i) {
        double n = 0;
        for (int k = 0; k < c; ++k) n += out[static_cast<std::size_t>(k) * hw + i] * out[static_cast<std::size_t>(k) * hw + i];
        const double inv = 1.0 / (std::sqrt(n) + 1e-10);
        for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(k) * hw + i] *= inv;
    }
    return out;
}
}  // namespace detail

/// Sum over levels of the spatial mean of squared differences between
/// channel-normalised features (pixels are compared unnormalised).
inline double perceptual_distance(const Tensor<float>& x, const Tensor<float>& y, const PerceptualExtractor& ex) {
    require(x.shape() == y.shape(), ErrorKind::shape,
            "perceptual distance needs equal shapes, got " + to_string(x.shape()) + " and " + to_string(y.shape()));
    const auto fx = ex.maps(x), fy = ex.maps(y);
    double total = 0;
    for (std::size_t l = 0; l < fx.size(); ++l) {
        const std::vector<double> a = detail::unit_channels(fx[l], l > 0);
        const std::vector<double> b = detail::unit_channels(fy[l], l > 0);
        double level = 0;
        for (std::size_t i = 0; i < a.size(); ++i) level += (a[i] - b[i]) * (a[i] - b[i]);
        total += level / (fx[l].dim(1) * fx[l].dim(2));
    }
    return total;
}

// ---------------------------------------------------------------------------
// Evaluation

struct MetricReport {
    double fid = 0;
    double lpips_mean = 0;
    double artfid = 0;
    int n_pairs = 0;
    std::string fid_extractor;
    std::string perceptual_extractor;
    std::vector<std::string> notes;

    std::string text() const {
        std::ostringstream os;
        os.precision(6);
        os << "pairs:                " << n_pairs << "\n"
           << "FID:                  " << fid << "  (features: " << fid_extractor << ")\n"
           << "perceptual distance:  " << lpips_mean << "  (extractor: " << perceptual_extractor << ")\n"
           << "ArtFID:               " << artfid << "  = (1 + FID) * (1 + perceptual)\n";
        for (const auto& n : notes) os << "note: " << n << "\n";
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os.precision(10);
        os << "n_pairs,fid[" << fid_extractor << "],lpips_mean[" << perceptual_extractor << "],artfid\n"
           << n_pairs << ',' << fid << ',' << lpips_mean << ',' << artfid << '\n';
        return os.str();
    }
};

inline FeatureSet extract_features(const std::vector<Tensor<float>>& images, const FeatureExtractor& ex) {
    require(!images.empty(), ErrorKind::data, "no images to extract features from");
    std::vector<std::vector<double>> rows;
    for (const auto& img : images) rows.push_back(ex(img));
    FeatureSet fs;
    fs.extractor_id = ex.id();
    fs.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            fs.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return fs;
}

inline std::vector<std::string> png_names(const fs::path& dir) {
    require(fs::is_directory(dir), ErrorKind::io, "not a directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

/// Results, styles and contents are matched by file name.
inline MetricReport evaluate(const fs::path& results, const fs::path& styles, const fs::path& contents,
                             const FeatureExtractor& fid_ex, const PerceptualExtractor& perc_ex) {
    const auto names = png_names(results);
    require(!names.empty(), ErrorKind::data, "no PNG results in " + results.string());
    std::vector<Tensor<float>> res, sty;
    MetricReport r;
    double total = 0;
    for (const auto& n : names) {
        require(fs::exists(styles / n), ErrorKind::data, "no style image matching result " + n + " in " + styles.string());
        require(fs::exists(contents / n), ErrorKind::data, "no content image matching result " + n + " in " + contents.string());
        Tensor<float> out = io::read_png<float>(results / n);
        Tensor<float> con = io::read_png<float>(contents / n);
        require(out.shape() == con.shape(), ErrorKind::shape, "result " + n + " and its content differ in size");
        total += perceptual_distance(out, con, perc_ex);
        res.push_back(std::move(out));
        sty.push_back(io::read_png<float>(styles / n));
    }
    require(names.size() >= 2, ErrorKind::data, "FID needs at least two result images");
    r.n_pairs = static_cast<int>(names.size());
    r.fid = frechet_distance(extract_features(res, fid_ex), extract_features(sty, fid_ex));
    r.lpips_mean = total / double(names.size());
    r.artfid = artfid(r.fid, r.lpips_mean);
    r.fid_extractor = fid_ex.id();
    r.perceptual_extractor = perc_ex.id();
    r.notes.push_back("surrogate extractors; absolute values are not comparable with Inception FID or published LPIPS");
    return r;
}

}  // namespace stylebrush::metrics
