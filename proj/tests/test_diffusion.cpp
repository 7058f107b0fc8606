#include <gtest/gtest.h>

#include <cmath>

#include "fdm/data/phantom.hpp"
#include "fdm/diffusion/ddpm.hpp"

using namespace fdm;
using namespace fdm::diffusion;
using nn::RngStream;

namespace {

const nn::UNetSpec kTinyEps{"eps-tiny", 2, 1, 8, 16, 8, 32, {1, 1, 1}};

data::SiteDataset small_site(char site, std::size_t patients, std::size_t slices, std::uint64_t seed) {
    auto [a, b] = data::default_profiles();
    auto p = site == 'A' ? a : b;
    return data::split_dataset(data::generate_site_dataset(p, patients, slices, seed), {}, seed + 1);
}

} // namespace

TEST(Schedule, TwoStepProduct) {
    auto s = build_schedule(2, 0.5, 0.5);
    ASSERT_EQ(s.alpha_bars.size(), 3u);
    EXPECT_EQ(s.alpha_bars[0], 1.0);
    EXPECT_EQ(s.alpha_bars[1], 0.5);
    EXPECT_EQ(s.alpha_bars[2], 0.25);
}

TEST(Schedule, DefaultMatchesDirectProduct) {
    auto s = build_schedule(200, 1e-4, 0.02);
    double worst = 0;
    for (int t = 1; t <= 200; ++t) {
        long double prod = 1.0L;
        for (int k = 1; k <= t; ++k) {
            const long double beta = 1e-4L + (0.02L - 1e-4L) * (k - 1) / 199.0L;
            prod *= 1.0L - beta;
        }
        worst = std::max(worst, static_cast<double>(std::fabs(prod - static_cast<long double>(s.alpha_bars[t]))));
    }
    EXPECT_LT(worst, 1e-7);
    EXPECT_NEAR(s.betas[1], 1e-4, 1e-18);
    EXPECT_NEAR(s.betas[200], 0.02, 1e-17);
    EXPECT_NEAR(s.sigmas[100], std::sqrt(s.betas[100]), 1e-18);
}

TEST(Schedule, MonotoneAndValidated) {
    auto s = build_schedule(200, 1e-4, 0.02);
    for (int t = 1; t <= 200; ++t) {
        EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
        if (t > 1) {
            EXPECT_LE(s.betas[t - 1], s.betas[t]);
        }
        EXPECT_GT(s.betas[t], 0.0);
        EXPECT_LT(s.betas[t], 1.0);
    }
    EXPECT_THROW(build_schedule(1, 1e-4, 0.02), Error);
    EXPECT_THROW(build_schedule(10, 0.0, 0.02), Error);
    EXPECT_THROW(build_schedule(10, 0.03, 0.02), Error);
    EXPECT_THROW(build_schedule(10, 1e-4, 1.0), Error);
}

TEST(QSample, BoundaryAndZeroNoise) {
    auto s = build_schedule(200, 1e-4, 0.02);
    RngStream r(1, 1);
    auto x0 = nn::rng_gaussian<float>(r, {1, 1, 4, 4});
    auto eps = nn::rng_gaussian<float>(r, {1, 1, 4, 4});
    EXPECT_EQ(q_sample(x0, 0, eps, s), x0);
    auto xt = q_sample(x0, 50, nn::Tensor<float>(x0.shape), s);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        EXPECT_EQ(xt[i], static_cast<float>(std::sqrt(s.alpha_bars[50]) * x0[i]));
    }
    EXPECT_THROW(q_sample(x0, 201, eps, s), Error);
    EXPECT_THROW(q_sample(x0, -1, eps, s), Error);
    EXPECT_THROW(q_sample(x0, 3, nn::Tensor<float>({2}), s), ShapeError);
}

TEST(QSample, MonteCarloMoments) {
    auto s = build_schedule(200, 1e-4, 0.02);
    const std::size_t n = 10000;
    for (int t : {1, 37, 120, 200}) {
        nn::Tensor<double> x0({n}, 0.7);
        RngStream r(77, static_cast<std::uint64_t>(t));
        auto xt = q_sample(x0, t, nn::rng_gaussian<double>(r, {n}), s);
        double mean = 0;
        for (double v : xt.data) mean += v;
        mean /= n;
        double var = 0;
        for (double v : xt.data) var += (v - mean) * (v - mean);
        var /= (n - 1);
        const double ab = s.alpha_bars[t];
        const double target_var = 1.0 - ab;
        EXPECT_LT(std::abs(mean - std::sqrt(ab) * 0.7), 3 * std::sqrt(target_var / n)) << t;
        EXPECT_LT(std::abs(var - target_var), 3 * target_var * std::sqrt(2.0 / (n - 1))) << t;
    }
}

// Closed form versus t single noising steps x_k = sqrt(a_k) x_{k-1} + sqrt(b_k) z.
TEST(QSample, ClosedFormMatchesIteratedNoising) {
    auto s = build_schedule(200, 1e-4, 0.02);
    const std::size_t n = 10000;
    const int t = 60;
    RngStream r(5, 5);
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double x = 0.4;
        for (int k = 1; k <= t; ++k) x = std::sqrt(s.alphas[k]) * x + std::sqrt(s.betas[k]) * r.gaussian();
        mean += x;
        sq += x * x;
    }
    mean /= n;
    const double var = (sq - n * mean * mean) / (n - 1);
    const double target_var = 1.0 - s.alpha_bars[t];
    EXPECT_LT(std::abs(mean - std::sqrt(s.alpha_bars[t]) * 0.4), 3 * std::sqrt(target_var / n));
    EXPECT_LT(std::abs(var - target_var), 3 * target_var * std::sqrt(2.0 / (n - 1)));
}

TEST(DdpmLoss, StubNets) {
    auto s = build_schedule(200, 1e-4, 0.02);
    RngStream r(3, 3);
    auto x0 = nn::rng_gaussian<float>(r, {4, 1, 16, 16});
    nn::Tensor<float> mask(x0.shape);
    auto eps = nn::rng_gaussian<float>(r, x0.shape);
    std::vector<int> steps{1, 50, 100, 200};
    nn::Tape<float> tape;
    EpsNet<float> exact = [&](nn::Var<float> in, const std::vector<int>&) {
        EXPECT_EQ(in.dim(1), 2u);
        return tape.constant(eps);
    };
    EXPECT_EQ(ddpm_loss(tape, exact, x0, mask, steps, eps, s).value()[0], 0.0f);
    EpsNet<float> zero = [&](nn::Var<float> in, const std::vector<int>&) {
        return tape.constant(nn::Tensor<float>({in.dim(0), 1, in.dim(2), in.dim(3)}));
    };
    const float l0 = ddpm_loss(tape, zero, x0, mask, steps, eps, s).value()[0];
    EXPECT_NEAR(l0, 1.0, 0.05);
    EXPECT_GE(l0, 0.0f);
    EpsNet<float> nan = [&](nn::Var<float> in, const std::vector<int>&) {
        return tape.constant(nn::Tensor<float>({in.dim(0), 1, in.dim(2), in.dim(3)}, std::nanf("")));
    };
    EXPECT_THROW(ddpm_loss(tape, nan, x0, mask, steps, eps, s), DivergenceError);
    EXPECT_THROW(ddpm_loss(tape, zero, x0, mask, std::vector<int>{0, 1, 2, 3}, eps, s), Error);
}

TEST(DdpmLoss, NonNegativeForRandomNet) {
    auto s = build_schedule(50, 1e-4, 0.02);
    auto params = nn::unet_init(kTinyEps, RngStream(8, 8));
    RngStream r(4, 4);
    auto x0 = nn::rng_gaussian<float>(r, {2, 1, 32, 32});
    auto eps = nn::rng_gaussian<float>(r, x0.shape);
    nn::Tape<float> tape;
    nn::ParamBinder<float> b(tape, params);
    auto net = unet_eps_net(kTinyEps, b);
    EXPECT_GE(ddpm_loss(tape, net, x0, nn::Tensor<float>(x0.shape), {3, 40}, eps, s).value()[0], 0.0f);
}

// Independent loop: with zero predicted noise each step is
// x <- clip(x / sqrt(alpha_t) + sqrt(beta_t) z).
TEST(Sampling, ZeroStubMatchesReferenceLoop) {
    auto s = build_schedule(200, 1e-4, 0.02);
    std::vector<std::uint8_t> mask(32 * 32, 0);
    for (std::size_t i = 300; i < 400; ++i) mask[i] = 1;
    EpsEvaluator zero = [](const nn::Tensor<float>& in, const std::vector<int>& steps) {
        EXPECT_EQ(steps.size(), in.dim(0));
        return nn::Tensor<float>({in.dim(0), 1, in.dim(2), in.dim(3)});
    };
    RngStream start(123, 4);
    std::vector<RngStream> streams{start};
    auto got = ancestral_chain(zero, {&mask}, 32, 32, s, streams)[0];

    RngStream ref_stream = start;
    std::vector<double> x(1024);
    for (std::size_t i = 0; i < 1024; i += 2) {
        auto p = ref_stream.gaussian_pair();
        x[i] = p[0];
        x[i + 1] = p[1];
    }
    for (int t = 200; t >= 1; --t) {
        std::vector<double> z(1024, 0.0);
        if (t > 1) {
            for (std::size_t i = 0; i < 1024; i += 2) {
                auto p = ref_stream.gaussian_pair();
                z[i] = p[0];
                z[i + 1] = p[1];
            }
        }
        const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 199.0;
        for (std::size_t i = 0; i < 1024; ++i) {
            x[i] = std::min(2.5, std::max(-1.5, x[i] / std::sqrt(1.0 - beta) + std::sqrt(beta) * z[i]));
        }
    }
    double worst = 0;
    for (std::size_t i = 0; i < 1024; ++i) worst = std::max(worst, std::abs(got[i] - x[i]));
    EXPECT_LT(worst, 1e-6);
    auto fin = finalize_sample(got);
    for (float v : fin) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Sampling, SameInputsSameOutput) {
    auto s = build_schedule(20, 1e-4, 0.02);
    auto params = nn::unet_init(kTinyEps, RngStream(8, 8));
    auto ds = small_site('A', 5, 1, 3);
    const auto& mask = ds.samples[0].mask;
    auto x = sample_conditional(kTinyEps, params, mask, 32, 32, s, RngStream(1, 2));
    auto y = sample_conditional(kTinyEps, params, mask, 32, 32, s, RngStream(1, 2));
    auto z = sample_conditional(kTinyEps, params, mask, 32, 32, s, RngStream(1, 3));
    EXPECT_EQ(x, y);
    EXPECT_NE(x, z);
}

TEST(Synthesize, CountsTagsAndSplitHygiene) {
    auto s = build_schedule(10, 1e-4, 0.02);
    auto params = nn::unet_init(kTinyEps, RngStream(8, 8));
    auto local = small_site('A', 10, 2, 5);
    SynthesisConfig cfg;
    cfg.seed = 4;
    auto syn = synthesize_dataset(kTinyEps, params, 'B', local, s, cfg);
    const auto train = local.in_split(data::Split::train);
    ASSERT_EQ(syn.samples.size(), train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto& x = syn.samples[i];
        EXPECT_EQ(x.provenance, (data::Provenance{true, 'B'}));
        EXPECT_EQ(x.mask, train[i].mask);
        EXPECT_EQ(x.patient_id, train[i].patient_id);
        EXPECT_EQ(local.split_of(x.patient_id), data::Split::train);
        EXPECT_EQ(syn.split_of(x.patient_id), data::Split::train);
        EXPECT_NO_THROW(data::check_sample(x));
    }
    data::SiteDataset empty = local;
    empty.splits.clear();
    EXPECT_THROW(synthesize_dataset(kTinyEps, params, 'B', empty, s, cfg), Error);
}

TEST(Synthesize, ParallelAndBatchedEqualSerial) {
    auto s = build_schedule(10, 1e-4, 0.02);
    auto params = nn::unet_init(kTinyEps, RngStream(8, 8));
    auto local = small_site('B', 10, 2, 6);
    SynthesisConfig serial;
    serial.seed = 4;
    serial.batch_size = 1;
    SynthesisConfig par = serial;
    par.batch_size = 5;
    par.threads = 3;
    auto a = synthesize_dataset(kTinyEps, params, 'A', local, s, serial);
    auto b = synthesize_dataset(kTinyEps, params, 'A', local, s, par);
    EXPECT_EQ(a, b);
}

TEST(TrainDiffusion, EmptySplitAndDeterminism) {
    DiffusionTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 9;
    EXPECT_THROW(train_diffusion({}, cfg, kTinyEps), Error);
    auto ds = small_site('B', 5, 2, 2);
    auto train = ds.in_split(data::Split::train);
    auto [p1, l1] = train_diffusion(train, cfg, kTinyEps);
    auto [p2, l2] = train_diffusion(train, cfg, kTinyEps);
    EXPECT_EQ(p1, p2);
    EXPECT_EQ(l1.epoch_loss, l2.epoch_loss);
    EXPECT_EQ(l1.epoch_loss.size(), 2u);
}

TEST(TrainDiffusion, LossDecreasesOnPhantomSet) {
    auto [a, b] = data::default_profiles();
    auto ds = data::split_dataset(data::generate_site_dataset(a, 40, 4, 7), {}, 8);
    DiffusionTrainConfig cfg;
    cfg.epochs = 6;
    cfg.seed = 3;
    auto [params, log] = train_diffusion(ds.in_split(data::Split::train), cfg);
    EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
}

TEST(TrainDiffusion, DivergenceCarriesCheckpoint) {
    auto ds = small_site('A', 5, 2, 2);
    auto train = ds.in_split(data::Split::train);
    train[1].image[5] = std::numeric_limits<float>::infinity();
    DiffusionTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 64;
    try {
        train_diffusion(train, cfg, kTinyEps);
        FAIL() << "expected divergence";
    } catch (const nn::TrainingDiverged& e) {
        EXPECT_EQ(e.epoch(), 0u);
        EXPECT_EQ(e.last_good(), nn::unet_init(kTinyEps, RngStream(cfg.seed, 0xd1f0)));
    }
}
