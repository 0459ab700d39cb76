#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stylebrush/diffusion.hpp"

using namespace stylebrush;
using namespace stylebrush::diffusion;

namespace {

// Product of (1 - beta) over the linear schedule, in exact rationals.
constexpr double kAlphaBar999 = 4.0358297653756835e-05;

Tensor<double> filled(const Shape& s, double v) { return Tensor<double>(s, v); }

}  // namespace

TEST(NoiseSchedule, SingleStep) {
    const auto s = NoiseSchedule::linear(1, 0.5, 0.5);
    ASSERT_EQ(s.steps(), 1);
    EXPECT_EQ(s.betas()[0], 0.5);
    EXPECT_EQ(s.alpha_bars()[0], 0.5);
}

TEST(NoiseSchedule, TwoStepsHandProduct) {
    const auto s = NoiseSchedule::linear(2, 0.1, 0.3);
    EXPECT_NEAR(s.betas()[0], 0.1, 1e-15);
    EXPECT_NEAR(s.betas()[1], 0.3, 1e-15);
    EXPECT_NEAR(s.alpha_bars()[0], 0.9, 1e-15);
    EXPECT_NEAR(s.alpha_bars()[1], 0.63, 1e-15);
}

TEST(NoiseSchedule, ThousandStepGolden) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    EXPECT_NEAR(s.alpha_bar(1000) / kAlphaBar999, 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(s.betas().front(), 1e-4);
    EXPECT_DOUBLE_EQ(s.betas().back(), 0.02);
}

TEST(NoiseSchedule, InvariantsHold) {
    for (int T : {1, 7, 100, 1000}) {
        const auto s = NoiseSchedule::linear(T, 1e-4, 0.02);
        double running = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double b = s.beta(t);
            EXPECT_GT(b, 0.0);
            EXPECT_LT(b, 1.0);
            if (t > 1) {
                EXPECT_GE(b, s.beta(t - 1));
                EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
                EXPECT_NEAR(s.alpha_bar(t), s.alpha_bar(t - 1) * (1.0 - b), 1e-15);
            }
            running *= 1.0 - b;
            EXPECT_NEAR(s.alpha_bar(t) / running, 1.0, 1e-12);
        }
        EXPECT_EQ(s.alpha_bar(0), 1.0);
    }
}

TEST(NoiseSchedule, RejectsBadArguments) {
    EXPECT_THROW(NoiseSchedule::linear(0, 1e-4, 0.02), Error);
    EXPECT_THROW(NoiseSchedule::linear(10, 0.0, 0.02), Error);
    EXPECT_THROW(NoiseSchedule::linear(10, 0.1, 0.05), Error);
    EXPECT_THROW(NoiseSchedule::linear(10, 0.1, 1.0), Error);
    EXPECT_THROW(NoiseSchedule::from_betas({0.5, 1.0}), Error);
    EXPECT_THROW(NoiseSchedule::from_betas({}), Error);
}

TEST(QSample, ZeroNoiseLimitIsIdentity) {
    const auto s = NoiseSchedule::from_betas({0.0, 0.0, 0.0});
    Rng rng(1);
    const auto z0 = Tensor<double>::randn({2, 3, 3}, rng, 1.0);
    const auto eps = Tensor<double>::randn({2, 3, 3}, rng, 1.0);
    const auto z = q_sample(Latent<double>{z0, 0}, 3, eps, s);
    EXPECT_EQ(z.timestep, 3);
    for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_EQ(z.data[i], z0[i]);
}

TEST(QSample, ZeroSignalGivesScaledNoise) {
    const auto s = NoiseSchedule::from_betas({0.64});  // alpha_bar = 0.36
    Rng rng(2);
    const auto eps = Tensor<double>::randn({4, 5}, rng, 1.0);
    const auto z = q_sample(Latent<double>{filled({4, 5}, 0.0), 0}, 1, eps, s);
    for (std::size_t i = 0; i < eps.size(); ++i) EXPECT_NEAR(z.data[i], 0.8 * eps[i], 1e-15);
}

TEST(QSample, RejectsShapeAndRange) {
    const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
    const Latent<double> z0{filled({2, 2}, 1.0), 0};
    EXPECT_THROW(q_sample(z0, 1, filled({2, 3}, 0.0), s), Error);
    EXPECT_THROW(q_sample(z0, 0, filled({2, 2}, 0.0), s), Error);
    EXPECT_THROW(q_sample(z0, 11, filled({2, 2}, 0.0), s), Error);
}

// Draws of an 8-element latent; the variance is pooled over elements, the
// mean is checked per element.
constexpr int kDraws = 10000;
constexpr int kElems = 8;

struct Moments {
    std::vector<double> mean;
    double pooled_var = 0;
};

Moments moments(const Tensor<double>& draws) {
    Moments m;
    m.mean.assign(kElems, 0.0);
    for (int d = 0; d < kDraws; ++d)
        for (int e = 0; e < kElems; ++e) m.mean[e] += draws.at(d, e) / kDraws;
    for (int d = 0; d < kDraws; ++d)
        for (int e = 0; e < kElems; ++e) m.pooled_var += std::pow(draws.at(d, e) - m.mean[e], 2);
    m.pooled_var /= double(kElems) * (kDraws - 1);
    return m;
}

Tensor<double> tiled(const std::vector<double>& z0) {
    Tensor<double> t({kDraws, kElems});
    for (int d = 0; d < kDraws; ++d)
        for (int e = 0; e < kElems; ++e) t.at(d, e) = z0[e];
    return t;
}

TEST(QSample, MonteCarloMoments) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    const std::vector<double> z0{-1.5, -1.0, -0.5, 0.0, 0.25, 0.5, 1.0, 2.0};
    Rng rng(3);
    for (int t : {1, 50, 100}) {
        const auto z = q_sample(Latent<double>{tiled(z0), 0}, t, Tensor<double>::randn({kDraws, kElems}, rng), s);
        const auto m = moments(z.data);
        const double var = 1.0 - s.alpha_bar(t);
        EXPECT_NEAR(m.pooled_var / var, 1.0, 0.02) << "t=" << t;
        for (int e = 0; e < kElems; ++e)
            EXPECT_LT(std::abs(m.mean[e] - std::sqrt(s.alpha_bar(t)) * z0[e]), 3.0 * std::sqrt(var / kDraws));
    }
}

TEST(QSample, ZeroInputVarianceIsOneMinusAlphaBar) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(30);
    const auto z = q_sample(Latent<double>{filled({kDraws, kElems}, 0.0), 0}, 70,
                            Tensor<double>::randn({kDraws, kElems}, rng), s);
    EXPECT_NEAR(moments(z.data).pooled_var / (1.0 - s.alpha_bar(70)), 1.0, 0.02);
}

TEST(QStep, DegenerateKernelIsIdentity) {
    const auto s = NoiseSchedule::from_betas({0.0});
    Rng rng(4);
    const auto z = Tensor<double>::randn({3, 4}, rng, 1.0);
    const auto out = q_step(Latent<double>{z, 0}, 1, Tensor<double>::randn({3, 4}, rng, 1.0), s);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(out.data[i], z[i]);
}

TEST(QStep, HandValue) {
    const auto s = NoiseSchedule::from_betas({0.19});
    const auto out = q_step(Latent<double>{filled({2, 3}, 1.0), 0}, 1, filled({2, 3}, 0.0), s);
    for (std::size_t i = 0; i < out.data.size(); ++i) EXPECT_NEAR(out.data[i], 0.9, 1e-15);
}

TEST(QStep, ChainMatchesClosedFormMarginals) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    const std::vector<double> z0{-1.5, -1.0, -0.5, 0.0, 0.25, 0.5, 1.0, 2.0};
    Rng rng(5), rng_closed(50);
    Latent<double> z{tiled(z0), 0};
    for (int t = 1; t <= 100; ++t) {
        z = q_step(z, t, Tensor<double>::randn({kDraws, kElems}, rng), s);
        if (t != 10 && t != 50 && t != 100) continue;
        const auto chained = moments(z.data);
        const auto closed =
            moments(q_sample(Latent<double>{tiled(z0), 0}, t, Tensor<double>::randn({kDraws, kElems}, rng_closed), s).data);
        const double var = 1.0 - s.alpha_bar(t);
        EXPECT_NEAR(chained.pooled_var / var, 1.0, 0.02) << "t=" << t;
        EXPECT_NEAR(chained.pooled_var / closed.pooled_var, 1.0, 0.03) << "t=" << t;
        for (int e = 0; e < kElems; ++e)
            EXPECT_LT(std::abs(chained.mean[e] - std::sqrt(s.alpha_bar(t)) * z0[e]), 3.0 * std::sqrt(var / kDraws))
                << "t=" << t << " element " << e;
    }
}

TEST(TrainingLoss, OraclePredictionGivesZero) {
    const auto s = NoiseSchedule::linear(50, 1e-4, 0.02);
    Rng rng(6);
    const auto z0 = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0);
    const auto eps = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0);
    const std::vector<int> ts{3, 40};
    const Denoiser<double> oracle = [&](const ag::Var<double>&, std::span<const int>) { return ag::constant(eps); };
    EXPECT_EQ(training_loss(oracle, z0, ts, eps, s).value()[0], 0.0);
}

TEST(TrainingLoss, ZeroPredictionGivesUnitLoss) {
    const auto s = NoiseSchedule::linear(50, 1e-4, 0.02);
    Rng rng(7);
    const auto z0 = Tensor<double>::randn({1, 10000}, rng, 1.0);
    const auto eps = Tensor<double>::randn({1, 10000}, rng, 1.0);
    const std::vector<int> ts{25};
    const Denoiser<double> zero = [](const ag::Var<double>& z, std::span<const int>) {
        return ag::constant(Tensor<double>(z.shape()));
    };
    EXPECT_NEAR(training_loss(zero, z0, ts, eps, s).value()[0], 1.0, 0.05);
}

TEST(TrainingLoss, InvariantToBatchOrder) {
    const auto s = NoiseSchedule::linear(50, 1e-4, 0.02);
    Rng rng(8);
    const auto z0 = Tensor<double>::randn({3, 2, 2}, rng, 1.0);
    const auto eps = Tensor<double>::randn({3, 2, 2}, rng, 1.0);
    // Deterministic per-item "network": scales the input.
    const Denoiser<double> net = [](const ag::Var<double>& z, std::span<const int>) { return ag::scale(z, 0.3); };
    const std::vector<int> ts{5, 20, 45};
    const double a = training_loss(net, z0, ts, eps, s).value()[0];

    const std::vector<int> perm{2, 0, 1};
    Tensor<double> z0p(z0.shape()), epsp(eps.shape());
    std::vector<int> tsp;
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 4; ++k) {
            z0p[i * 4 + k] = z0[perm[i] * 4 + k];
            epsp[i * 4 + k] = eps[perm[i] * 4 + k];
        }
        tsp.push_back(ts[perm[i]]);
    }
    EXPECT_NEAR(training_loss(net, z0p, tsp, epsp, s).value()[0], a, 1e-14);
}

TEST(TrainingLoss, NonFinitePredictionThrows) {
    const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
    const auto z0 = filled({1, 4}, 0.0);
    const std::vector<int> ts{1};
    const Denoiser<double> bad = [](const ag::Var<double>& z, std::span<const int>) {
        Tensor<double> t(z.shape());
        t[0] = std::nan("");
        return ag::constant(t);
    };
    try {
        training_loss(bad, z0, ts, z0, s);
        FAIL() << "expected a numeric error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
    }
}

TEST(TrainingLoss, NonNegativeOnRandomPredictions) {
    const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const auto z0 = Tensor<double>::randn({2, 3}, rng, 1.0);
        const auto eps = Tensor<double>::randn({2, 3}, rng, 1.0);
        const auto pred = Tensor<double>::randn({2, 3}, rng, 1.0);
        const std::vector<int> ts{1, 10};
        const Denoiser<double> net = [&](const ag::Var<double>&, std::span<const int>) { return ag::constant(pred); };
        EXPECT_GE(training_loss(net, z0, ts, eps, s).value()[0], 0.0);
    }
}

TEST(DdimStep, OracleEpsilonInvertsToZ0) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(10);
    const auto z0 = Tensor<double>::randn({4, 8, 8}, rng, 1.0);
    const auto eps = Tensor<double>::randn({4, 8, 8}, rng, 1.0);
    for (int t : {1, 37, 100}) {
        const auto zt = q_sample(Latent<double>{z0, 0}, t, eps, s);
        const auto rec = ddim_step(zt, eps, 0, 0.0, s);
        EXPECT_EQ(rec.timestep, 0);
        EXPECT_LT(max_abs_diff(rec.data, z0), 1e-5);
    }
}

TEST(DdimStep, EtaZeroIsDeterministic) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(11);
    const Latent<double> zt{Tensor<double>::randn({2, 4, 4}, rng, 1.0), 80};
    const auto e = Tensor<double>::randn({2, 4, 4}, rng, 1.0);
    const auto a = ddim_step(zt, e, 40, 0.0, s);
    const auto b = ddim_step(zt, e, 40, 0.0, s);
    for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_EQ(a.data[i], b.data[i]);
}

TEST(DdimStep, SigmaMatchesDdimVariance) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    EXPECT_EQ(ddim_sigma(s, 50, 20, 0.0), 0.0);
    // eta = 1 reproduces the DDPM posterior variance for a single step.
    const int t = 60;
    const double posterior = (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)) * s.beta(t);
    EXPECT_NEAR(ddim_sigma(s, t, t - 1, 1.0), std::sqrt(posterior), 1e-14);
}

TEST(DdimStep, StochasticNeedsNoiseAndUsesIt) {
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(12);
    const Latent<double> zt{Tensor<double>::randn({16}, rng, 1.0), 50};
    const auto e = Tensor<double>::randn({16}, rng, 1.0);
    EXPECT_THROW(ddim_step(zt, e, 10, 0.5, s), Error);
    Rng a(1), b(1), c(2);
    const auto x = ddim_step(zt, e, 10, 0.5, s, &a);
    const auto y = ddim_step(zt, e, 10, 0.5, s, &b);
    const auto z = ddim_step(zt, e, 10, 0.5, s, &c);
    EXPECT_EQ(max_abs_diff(x.data, y.data), 0.0);
    EXPECT_GT(max_abs_diff(x.data, z.data), 0.0);
}

TEST(DdimStep, RejectsBadArguments) {
    const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
    const Latent<double> zt{filled({3}, 0.0), 5};
    const auto e = filled({3}, 0.0);
    EXPECT_THROW(ddim_step(zt, e, 5, 0.0, s), Error);
    EXPECT_THROW(ddim_step(zt, e, 6, 0.0, s), Error);
    EXPECT_THROW(ddim_step(zt, e, 2, 1.5, s), Error);
    EXPECT_THROW(ddim_step(zt, e, 2, -0.1, s), Error);
    EXPECT_THROW(ddim_step(zt, filled({4}, 0.0), 2, 0.0, s), Error);
}

TEST(DdimStep, FullLoopWithOverfitOracleReproducesLatent) {
    // A denoiser that knows the target latent predicts the exact noise at
    // every step, so the eta = 0 trajectory lands on the target.
    const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(13);
    const auto target = Tensor<double>::randn({4, 6, 6}, rng, 1.0);
    Latent<double> z{Tensor<double>::randn({4, 6, 6}, rng, 1.0), 100};
    const auto ts = ddim_timesteps(100, 30);
    ASSERT_EQ(ts.front(), 100);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        ASSERT_EQ(z.timestep, ts[i]);
        const double ab = s.alpha_bar(z.timestep);
        Tensor<double> eps(z.data.shape());
        for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = (z.data[k] - std::sqrt(ab) * target[k]) / std::sqrt(1 - ab);
        z = ddim_step(z, eps, i + 1 < ts.size() ? ts[i + 1] : 0, 0.0, s);
    }
    EXPECT_EQ(z.timestep, 0);
    EXPECT_LT(max_abs_diff(z.data, target), 1e-9);
}

TEST(DdimTimesteps, DescendingAndBounded) {
    for (int T : {10, 100, 1000})
        for (int n : {1, 5, 30, 2000}) {
            const auto ts = ddim_timesteps(T, n);
            EXPECT_EQ(ts.front(), T);
            EXPECT_GE(ts.back(), 1);
            EXPECT_EQ(static_cast<int>(ts.size()), std::min(n, T));
            for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
        }
    const auto partial = ddim_timesteps(100, 10, 60);
    EXPECT_EQ(partial.front(), 60);
    EXPECT_THROW(ddim_timesteps(100, 0), Error);
    EXPECT_THROW(ddim_timesteps(100, 5, 101), Error);
}

TEST(SinusoidalEmbedding, KnownValues) {
    const std::vector<int> pos{0, 3};
    const auto e = sinusoidal_embedding<double>(pos, 8);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(e.at(0, i), 0.0);
        EXPECT_EQ(e.at(0, i + 4), 1.0);
    }
    EXPECT_NEAR(e.at(1, 0), std::sin(3.0), 1e-15);
    EXPECT_NEAR(e.at(1, 4), std::cos(3.0), 1e-15);
    EXPECT_NEAR(e.at(1, 1), std::sin(3.0 * std::pow(10000.0, -0.25)), 1e-15);
    EXPECT_THROW(sinusoidal_embedding<double>(pos, 7), Error);
}
