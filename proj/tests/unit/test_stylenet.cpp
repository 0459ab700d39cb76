#include <gtest/gtest.h>

#include <cmath>

#include "stylebrush/stylenet.hpp"

using namespace stylebrush;
using namespace stylebrush::stylenet;

namespace {

// out = x W^T (+ b), rows of x are positions.
std::vector<double> project(const std::vector<double>& x, int rows, const nn::Linear<double>& l) {
    const auto& w = l.weight.value();
    const int out = w.dim(0), in = w.dim(1);
    std::vector<double> y(static_cast<std::size_t>(rows) * out, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int o = 0; o < out; ++o) {
            double s = l.has_bias ? l.bias.value()[static_cast<std::size_t>(o)] : 0.0;
            for (int i = 0; i < in; ++i) s += x[static_cast<std::size_t>(r * in + i)] * w.at(o, i);
            y[static_cast<std::size_t>(r * out + o)] = s;
        }
    return y;
}

// Single-head self-attention over the width-concatenated map, first half kept.
Tensor<double> fuse_oracle(const Tensor<double>& x1, const Tensor<double>& x2, const nn::Attention<double>& a) {
    const int n = x1.dim(0), h = x1.dim(1), w = x1.dim(2), c = x1.dim(3);
    const int len = h * 2 * w;
    Tensor<double> out(x1.shape());
    for (int b = 0; b < n; ++b) {
        std::vector<double> seq(static_cast<std::size_t>(len) * c);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                for (int k = 0; k < c; ++k)
                    seq[static_cast<std::size_t>((y * 2 * w + xx) * c + k)] =
                        xx < w ? x1.at(b, y, xx, k) : x2.at(b, y, xx - w, k);
        const auto q = project(seq, len, a.to_q), kk = project(seq, len, a.to_k), v = project(seq, len, a.to_v);
        std::vector<double> mixed(seq.size(), 0.0);
        for (int i = 0; i < len; ++i) {
            std::vector<double> s(static_cast<std::size_t>(len));
            double mx = -1e300;
            for (int j = 0; j < len; ++j) {
                double d = 0;
                for (int k = 0; k < c; ++k) d += q[static_cast<std::size_t>(i * c + k)] * kk[static_cast<std::size_t>(j * c + k)];
                s[static_cast<std::size_t>(j)] = d / std::sqrt(double(c));
                mx = std::max(mx, s[static_cast<std::size_t>(j)]);
            }
            double z = 0;
            for (double& e : s) z += (e = std::exp(e - mx));
            for (int j = 0; j < len; ++j)
                for (int k = 0; k < c; ++k)
                    mixed[static_cast<std::size_t>(i * c + k)] += s[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>(j * c + k)];
        }
        const auto o = project(mixed, len, a.to_out);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int k = 0; k < c; ++k) out.at(b, y, xx, k) = o[static_cast<std::size_t>((y * 2 * w + xx) * c + k)];
    }
    return out;
}

}  // namespace

TEST(FuseSpatial, MatchesHandWrittenAttention) {
    Rng rng(1);
    nn::Attention<double> attn(6, 6, 1, rng);
    // Non-zero output bias so it participates.
    for (std::size_t i = 0; i < 6; ++i) attn.to_out.bias.mutable_value()[i] = 0.1 * double(i);
    const auto x1 = Tensor<double>::randn({2, 3, 4, 6}, rng);
    const auto x2 = Tensor<double>::randn({2, 3, 4, 6}, rng);
    const auto got = fuse_spatial(ag::constant(x1), ag::constant(x2), attn).value();
    const auto want = fuse_oracle(x1, x2, attn);
    ASSERT_EQ(got.shape(), (Shape{2, 3, 4, 6}));
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

TEST(FuseSpatial, ReferenceLayoutDoesNotMatter) {
    // Keys and values from x2 form an unordered set, so shuffling x2's
    // positions leaves the fused output unchanged.
    Rng rng(2);
    nn::Attention<double> attn(4, 4, 2, rng);
    const auto x1 = Tensor<double>::randn({1, 2, 3, 4}, rng);
    const auto x2 = Tensor<double>::randn({1, 2, 3, 4}, rng);
    Tensor<double> shuffled(x2.shape());
    const int perm[6] = {4, 0, 5, 2, 1, 3};
    for (int p = 0; p < 6; ++p)
        for (int k = 0; k < 4; ++k) shuffled.at(0, p / 3, p % 3, k) = x2.at(0, perm[p] / 3, perm[p] % 3, k);
    const auto a = fuse_spatial(ag::constant(x1), ag::constant(x2), attn).value();
    const auto b = fuse_spatial(ag::constant(x1), ag::constant(shuffled), attn).value();
    EXPECT_LT(max_abs_diff(a, b), 1e-12);
}

TEST(FuseSpatial, ReferenceInfluencesOutputAndReceivesGradient) {
    Rng rng(3);
    nn::Attention<double> attn(4, 4, 1, rng);
    const auto x1 = Tensor<double>::randn({1, 2, 2, 4}, rng);
    auto x2 = ag::parameter(Tensor<double>::randn({1, 2, 2, 4}, rng));
    const auto base = fuse_spatial(ag::constant(x1), x2, attn);
    ag::backward(ag::mean(base));
    double gnorm = 0;
    const auto g2 = x2.grad();
    for (double g : g2.values()) gnorm += g * g;
    EXPECT_GT(gnorm, 0.0);
    const auto other = fuse_spatial(ag::constant(x1), ag::constant(Tensor<double>::randn({1, 2, 2, 4}, rng)), attn);
    EXPECT_GT(max_abs_diff(base.value(), other.value()), 1e-6);
}

TEST(FuseSpatial, RejectsMismatchedShapes) {
    Rng rng(4);
    nn::Attention<float> attn(4, 4, 1, rng);
    EXPECT_THROW(fuse_spatial(ag::constant(Tensor<float>({1, 2, 2, 4})), ag::constant(Tensor<float>({1, 2, 3, 4})), attn), Error);
    EXPECT_THROW(fuse_spatial(ag::constant(Tensor<float>({2, 4})), ag::constant(Tensor<float>({2, 4})), attn), Error);
}

TEST(ReferenceFeatures, ContentHashTracksIdsAndValues) {
    ReferenceFeatures<float> a;
    a["down.1.0"] = ag::constant(Tensor<float>({1, 2, 2, 3}, 0.5f));
    a["up.0.1"] = ag::constant(Tensor<float>({1, 4, 4, 3}, -0.5f));
    ReferenceFeatures<float> b = a;
    EXPECT_EQ(content_hash(a), content_hash(b));
    b["up.0.1"] = ag::constant(Tensor<float>({1, 4, 4, 3}, -0.25f));
    EXPECT_NE(content_hash(a), content_hash(b));
    ReferenceFeatures<float> renamed;
    renamed["down.1.1"] = a["down.1.0"];
    renamed["up.0.1"] = a["up.0.1"];
    EXPECT_NE(content_hash(a), content_hash(renamed));
}

TEST(SemanticEncoder, TokenShapeAndNormalisation) {
    Rng rng(5);
    SemanticEncoder<double> enc(SemanticConfig{}, rng);
    const auto z = Tensor<double>::randn({3, 4, 16, 16}, rng);
    const auto tokens = enc(ag::constant(z)).value();
    ASSERT_EQ(tokens.shape(), (Shape{3, 8, 64}));
    for (int b = 0; b < 3; ++b)
        for (int t = 0; t < 8; ++t) {
            double m = 0, v = 0;
            for (int k = 0; k < 64; ++k) m += tokens.at(b, t, k);
            m /= 64;
            for (int k = 0; k < 64; ++k) v += (tokens.at(b, t, k) - m) * (tokens.at(b, t, k) - m);
            EXPECT_NEAR(m, 0.0, 1e-9);
            EXPECT_NEAR(v / 64, 1.0, 1e-3);
        }
}

TEST(SemanticEncoder, BatchItemsAreIndependentAndSizeAgnostic) {
    Rng rng(6);
    SemanticEncoder<double> enc(SemanticConfig{}, rng);
    const auto z = Tensor<double>::randn({2, 4, 8, 8}, rng);
    const auto both = enc(ag::constant(z)).value();
    const auto first = enc(ag::constant(z.batch_slice(0, 1))).value();
    EXPECT_LT(max_abs_diff(both.batch_slice(0, 1), first), 1e-12);
    EXPECT_EQ(enc(ag::constant(Tensor<double>::randn({1, 4, 12, 20}, rng))).shape(), (Shape{1, 8, 64}));
    EXPECT_THROW(enc(ag::constant(Tensor<double>({1, 3, 8, 8}))), Error);
}

TEST(SemanticEncoder, DistinguishesGlobalColour) {
    Rng rng(7);
    SemanticEncoder<double> enc(SemanticConfig{}, rng);
    const auto a = enc(ag::constant(Tensor<double>({1, 4, 8, 8}, 0.5))).value();
    const auto b = enc(ag::constant(Tensor<double>({1, 4, 8, 8}, -0.5))).value();
    EXPECT_GT(max_abs_diff(a, b), 1e-3);
}
