#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "fdm/nn/adam.hpp"
#include "fdm/nn/codec.hpp"
#include "fdm/nn/ops.hpp"
#include "fdm/nn/rng.hpp"
#include "fdm/nn/unet.hpp"
#include "gradcheck.hpp"

using namespace fdm;
using namespace fdm::nn;
using fdm::test::grad_check;
using fdm::test::LossFn;
using fdm::test::random_tensor;
using fdm::test::uniform_tensor;

namespace {

constexpr double kGradTol = 1e-4;

// Direct quadruple loop over output pixels and kernel taps.
Tensor<double> reference_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                              std::size_t stride, std::size_t pad) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
    Tensor<double> out({N, O, OH, OW});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double s = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky)
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const long iy = long(oy * stride + ky) - long(pad);
                                const long ix = long(ox * stride + kx) - long(pad);
                                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                                s += x[((n * C + c) * H + iy) * W + ix] * w[((o * C + c) * KH + ky) * KW + kx];
                            }
                    out[((n * O + o) * OH + oy) * OW + ox] = s;
                }
    return out;
}

// Weighted sum so every output element gets a distinct, O(1) upstream gradient.
Var<double> weighted_sum(Var<double> y, std::uint64_t seed) {
    RngStream r(seed, 99);
    Tape<double>& t = *y.tape;
    return sum(mul(y, t.constant(random_tensor(r, y.shape()))));
}

void expect_grad_ok(const LossFn& f, const std::vector<Tensor<double>>& in, std::size_t max_per_input = 0) {
    auto res = grad_check(f, in, 1e-3, max_per_input);
    EXPECT_GT(res.checked, 0u);
    EXPECT_LT(res.worst_rel, kGradTol) << res.where;
}

} // namespace

TEST(Conv2d, IdentityKernel) {
    Tape<float> t;
    auto y = conv2d(t.leaf(Tensor<float>({1, 1, 3, 3}, 1.0f)), t.leaf(Tensor<float>({1, 1, 1, 1}, 1.0f)),
                    t.leaf(Tensor<float>({1})), 1, 0);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (float v : y.value().data) EXPECT_EQ(v, 1.0f);
}

TEST(Conv2d, SameShapeWithPadding) {
    Tape<float> t;
    auto y = conv2d(t.leaf(Tensor<float>({1, 1, 4, 4}, 0.5f)), t.leaf(Tensor<float>({1, 1, 3, 3}, 1.0f)),
                    t.leaf(Tensor<float>({1})), 1, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
}

TEST(Conv2d, MatchesDirectLoop) {
    RngStream r(5, 1);
    for (std::size_t stride : {1u, 2u}) {
        auto x = random_tensor(r, {1, 2, 5, 5});
        auto w = random_tensor(r, {3, 2, 3, 3});
        auto b = random_tensor(r, {3});
        auto ref = reference_conv(x, w, b, stride, 1);
        Tape<float> t;
        auto y = conv2d(t.leaf(x.cast<float>()), t.leaf(w.cast<float>()), t.leaf(b.cast<float>()), stride, 1);
        ASSERT_EQ(y.shape(), ref.shape);
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-6 * (1 + std::abs(ref[i])));
        Tape<double> td;
        auto yd = conv2d(td.leaf(x), td.leaf(w), td.leaf(b), stride, 1);
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(yd.value()[i], ref[i], 1e-12);
    }
}

TEST(Conv2d, WideInputMatchesDirectLoop) {
    // Wider than one 64-column panel, with a ragged tail.
    RngStream r(5, 2);
    auto x = random_tensor(r, {2, 9, 9, 11});
    auto w = random_tensor(r, {5, 9, 3, 3});
    auto b = random_tensor(r, {5});
    auto ref = reference_conv(x, w, b, 1, 1);
    Tape<double> t;
    auto y = conv2d(t.leaf(x), t.leaf(w), t.leaf(b), 1, 1);
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-11);
}

TEST(Conv2d, ShapeErrorsNameTheDimension) {
    Tape<float> t;
    auto x = t.leaf(Tensor<float>({1, 2, 4, 4}));
    try {
        conv2d(x, t.leaf(Tensor<float>({1, 3, 3, 3})), t.leaf(Tensor<float>({1})), 1, 1);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
    }
    EXPECT_THROW(conv2d(x, t.leaf(Tensor<float>({1, 2, 2, 2})), t.leaf(Tensor<float>({1})), 1, 1), ShapeError);
    EXPECT_THROW(conv2d(x, t.leaf(Tensor<float>({1, 2, 3, 3})), t.leaf(Tensor<float>({2})), 1, 1), ShapeError);
}

TEST(Backward, SumOfSquares) {
    Tape<float> t;
    auto x = t.leaf(Tensor<float>({2}, {1.0f, -2.0f}));
    t.backward(sum(mul(x, x)));
    EXPECT_EQ(t.grad(x), (std::vector<float>{2.0f, -4.0f}));
}

TEST(Backward, UnreachableLeafHasZeroGrad) {
    Tape<float> t;
    auto x = t.leaf(Tensor<float>({2}, {1.0f, 2.0f}));
    auto unused = t.leaf(Tensor<float>({3}, 7.0f));
    t.backward(sum(x));
    EXPECT_EQ(t.grad(unused), (std::vector<float>{0, 0, 0}));
}

TEST(Backward, NonScalarLossThrows) {
    Tape<float> t;
    auto x = t.leaf(Tensor<float>({2}, 1.0f));
    EXPECT_THROW(t.backward(mul(x, x)), ShapeError);
}

TEST(Backward, NonFiniteIsDivergence) {
    Tape<float> t;
    auto x = t.leaf(Tensor<float>({2}, {1.0f, std::nanf("")}));
    EXPECT_THROW(t.backward(sum(x)), DivergenceError);
    Tape<float> t2;
    auto y = t2.leaf(Tensor<float>({1}, {1e30f}));
    auto big = t2.leaf(Tensor<float>({1}, {1e30f}));
    EXPECT_THROW(t2.backward(sum(mul(mul(y, big), big))), DivergenceError);
}

TEST(GradCheck, Elementwise) {
    RngStream r(11, 0);
    auto a = random_tensor(r, {2, 3, 4});
    auto b = random_tensor(r, {2, 3, 4});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(add(v[0], v[1]), 1); }, {a, b});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(sub(v[0], v[1]), 2); }, {a, b});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(mul(v[0], v[1]), 3); }, {a, b});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(scale(v[0], 0.37), 4); }, {a});
    expect_grad_ok([](Tape<double>&, const auto& v) { return mean(mul(v[0], v[0])); }, {a});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(silu(v[0]), 5); }, {a});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(sigmoid(v[0]), 6); }, {a});
}

TEST(GradCheck, Conv2d) {
    RngStream r(12, 0);
    for (std::size_t stride : {1u, 2u}) {
        auto x = random_tensor(r, {2, 3, 6, 6});
        auto w = random_tensor(r, {4, 3, 3, 3}, 0.5);
        auto b = random_tensor(r, {4});
        expect_grad_ok(
            [stride](Tape<double>&, const auto& v) { return weighted_sum(conv2d(v[0], v[1], v[2], stride, 1), 7); },
            {x, w, b});
    }
    auto x = random_tensor(r, {1, 2, 5, 5});
    auto w = random_tensor(r, {2, 2, 1, 1});
    auto b = random_tensor(r, {2});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(conv2d(v[0], v[1], v[2], 1, 0), 8); },
                   {x, w, b});
}

TEST(GradCheck, GroupNorm) {
    RngStream r(13, 0);
    auto x = random_tensor(r, {2, 16, 3, 3}, 2.0);
    auto g = random_tensor(r, {16});
    auto b = random_tensor(r, {16});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(group_norm(v[0], v[1], v[2], 8), 9); },
                   {x, g, b});
}

TEST(GradCheck, ChannelBiasLinearConcatUpsample) {
    RngStream r(14, 0);
    auto x = random_tensor(r, {2, 3, 2, 2});
    auto cb = random_tensor(r, {2, 3});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(add_channel_bias(v[0], v[1]), 10); },
                   {x, cb});
    auto li = random_tensor(r, {3, 5});
    auto lw = random_tensor(r, {4, 5});
    auto lb = random_tensor(r, {4});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(linear(v[0], v[1], v[2]), 11); },
                   {li, lw, lb});
    auto y = random_tensor(r, {2, 1, 2, 2});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(concat_channels(v[0], v[1]), 12); },
                   {x, y});
    expect_grad_ok([](Tape<double>&, const auto& v) { return weighted_sum(upsample_nearest2x(v[0]), 13); }, {x});
}

TEST(GradCheck, Losses) {
    RngStream r(15, 0);
    auto p = random_tensor(r, {2, 1, 4, 4});
    auto q = random_tensor(r, {2, 1, 4, 4});
    expect_grad_ok([](Tape<double>&, const auto& v) { return mse_loss(v[0], v[1]); }, {p, q});
    auto probs = uniform_tensor(r, {2, 1, 4, 4}, 0.05, 0.95);
    Tensor<double> mask({2, 1, 4, 4});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = (i % 3 == 0) ? 1.0 : 0.0;
    expect_grad_ok(
        [mask](Tape<double>& t, const auto& v) { return soft_dice_loss(v[0], t.constant(mask)); }, {probs});
    auto logits = random_tensor(r, {2, 1, 4, 4});
    expect_grad_ok(
        [mask](Tape<double>& t, const auto& v) { return soft_dice_loss(sigmoid(v[0]), t.constant(mask)); },
        {logits});
}

TEST(GradCheck, WholeNetworks) {
    RngStream r(16, 0);
    UNetSpec eps{"eps-small", 2, 1, 8, 16, 8, 8, {1, 1, 2}};
    UNetSpec seg{"seg-small", 1, 1, 8, 0, 8, 8};
    for (const UNetSpec& spec : {eps, seg}) {
        ParamTree<double> params = cast_tree<double>(unet_init(spec, RngStream(3, 4)));
        // Non-trivial norm affine and biases so every path carries signal.
        RngStream pr(17, 0);
        for (auto& [path, t] : params) {
            if (!path.ends_with(".weight")) {
                for (double& v : t.data) v += 0.3 * pr.gaussian();
            }
        }
        std::vector<std::string> paths;
        std::vector<Tensor<double>> inputs{random_tensor(r, {2, spec.in_channels, 8, 8})};
        for (const auto& [path, t] : params) {
            paths.push_back(path);
            inputs.push_back(t);
        }
        const std::vector<int> steps{3, 150};
        LossFn f = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
            ParamBinder<double> binder(t, params);
            for (std::size_t i = 0; i < paths.size(); ++i) binder.bind(paths[i], v[i + 1]);
            return weighted_sum(unet_forward(spec, binder, v[0], spec.time_dim ? &steps : nullptr), 21);
        };
        expect_grad_ok(f, inputs, 6);
    }
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
    ParamTree<float> p{{"a", Tensor<float>({3}, {1.0f, -2.0f, 0.5f})}};
    ParamTree<float> g{{"a", Tensor<float>({3})}};
    AdamState s;
    const auto before = p;
    adam_step(p, g, s);
    EXPECT_EQ(p, before);
    EXPECT_EQ(s.t, 1u);
    for (double m : s.m.at("a")) EXPECT_EQ(m, 0.0);
    for (double v : s.v.at("a")) EXPECT_EQ(v, 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamTree<double> p{{"a", Tensor<double>({3}, {1.0, -2.0, 0.5})}};
    ParamTree<double> g{{"a", Tensor<double>({3}, {0.3, -4.0, 1e-3})}};
    AdamState s(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    const auto before = p;
    adam_step(p, g, s);
    for (std::size_t i = 0; i < 3; ++i) {
        const double gi = g.at("a")[i];
        const double expected = 0.01 * std::abs(gi) / (std::abs(gi) + 1e-8);
        EXPECT_NEAR(std::abs(p.at("a")[i] - before.at("a")[i]), expected, 1e-12);
        EXPECT_LT(p.at("a")[i] * gi, before.at("a")[i] * gi);
    }
}

TEST(Adam, QuadraticConvergesLikeScalarRecurrence) {
    // Scalar oracle written out independently of adam_step.
    double x_ref = 0, m = 0, v = 0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2 * (x_ref - 3);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        x_ref -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    ParamTree<double> p{{"x", Tensor<double>({1}, {0.0})}};
    AdamState s(AdamConfig{0.1, 0.9, 0.999, 1e-8});
    for (int t = 0; t < 100; ++t) {
        ParamTree<double> g{{"x", Tensor<double>({1}, {2 * (p.at("x")[0] - 3)})}};
        adam_step(p, g, s);
    }
    EXPECT_EQ(s.t, 100u);
    EXPECT_DOUBLE_EQ(p.at("x")[0], x_ref);
    EXPECT_LT(std::abs(p.at("x")[0] - 3), 0.1);
}

TEST(Adam, StructuralMismatchThrows) {
    ParamTree<float> p{{"a", Tensor<float>({2})}};
    ParamTree<float> g{{"b", Tensor<float>({2})}};
    AdamState s;
    EXPECT_THROW(adam_step(p, g, s), ShapeError);
    ParamTree<float> g2{{"a", Tensor<float>({3})}};
    EXPECT_THROW(adam_step(p, g2, s), ShapeError);
}

TEST(Rng, PhiloxKnownAnswer) {
    // Random123 known-answer vectors for philox4x32-10.
    auto z = philox4x32({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(z, (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    auto f = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(f, (std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    auto pi = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(pi, (std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, SameStateSameTensor) {
    RngStream a(42, 3, 17), b(42, 3, 17);
    EXPECT_EQ(rng_gaussian<float>(a, {4, 5}), rng_gaussian<float>(b, {4, 5}));
    EXPECT_EQ(a.counter(), b.counter());
    EXPECT_GT(a.counter(), 17u);
}

TEST(Rng, GaussianMoments) {
    RngStream r(2024, 0);
    auto t = rng_gaussian<double>(r, {100000});
    double mean = 0;
    for (double v : t.data) mean += v;
    mean /= 100000;
    double var = 0;
    for (double v : t.data) var += (v - mean) * (v - mean);
    var /= 99999;
    EXPECT_LT(std::abs(mean), 0.02);
    EXPECT_GE(var, 0.97);
    EXPECT_LE(var, 1.03);
}

TEST(Rng, StreamsAreUncorrelated) {
    RngStream a(7, 1), b(7, 2);
    auto x = rng_gaussian<double>(a, {10000});
    auto y = rng_gaussian<double>(b, {10000});
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < 10000; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= 10000;
    my /= 10000;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < 10000; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.05);
}

TEST(Codec, EmptyTreeRoundTrips) {
    ParamTree<float> empty;
    Bytes b = encode_weights(empty);
    EXPECT_EQ(b.size(), 4u + 1 + 4 + 4);
    EXPECT_TRUE(decode_weights(b).empty());
}

TEST(Codec, ArbitraryTreeRoundTripsBitExactly) {
    RngStream r(9, 9);
    ParamTree<float> p;
    p.emplace("z.last", rng_gaussian<float>(r, {3, 1, 2}));
    p.emplace("a.first", rng_gaussian<float>(r, {5}));
    p.emplace("m.middle", Tensor<float>({2, 2}, {-0.0f, std::numeric_limits<float>::denorm_min(), 1e38f, -3.5f}));
    Bytes b = encode_weights(p);
    EXPECT_EQ(b.size(), encoded_weights_size({{"z.last", {3, 1, 2}}, {"a.first", {5}}, {"m.middle", {2, 2}}}));
    auto q = decode_weights(b);
    ASSERT_EQ(q.size(), p.size());
    auto it = q.begin();
    for (const auto& [path, t] : p) {
        EXPECT_EQ(it->first, path);
        EXPECT_EQ(it->second.shape, t.shape);
        EXPECT_EQ(std::memcmp(it->second.data.data(), t.data.data(), t.numel() * 4), 0);
        ++it;
    }
    EXPECT_EQ(encode_weights(q), b);
}

TEST(Codec, CorruptionIsDetected) {
    ParamTree<float> p{{"w", Tensor<float>({4}, {1, 2, 3, 4})}};
    Bytes b = encode_weights(p);
    Bytes flipped = b;
    flipped[b.size() - 8] ^= 0x01;
    EXPECT_THROW(decode_weights(flipped), ChecksumError);
    Bytes truncated(b.begin(), b.end() - 6);
    EXPECT_THROW(decode_weights(truncated), FormatError);
    try {
        decode_weights(flipped);
    } catch (const ChecksumError& e) {
        EXPECT_EQ(e.offset(), b.size() - 4);
    }
}

TEST(UNet, OutputShapeAndStableHash) {
    UNetSpec s{"seg", 1, 1, 16, 0};
    auto p = unet_init(s, RngStream(1, 1));
    Tape<float> t(false);
    ParamBinder<float> binder(t, p);
    auto y = unet_forward(s, binder, t.constant(Tensor<float>({2, 1, 32, 32}, 0.3f)));
    EXPECT_EQ(y.shape(), (Shape{2, 1, 32, 32}));
    EXPECT_EQ(s.arch_hash(), UNetSpec({"seg", 1, 1, 16, 0}).arch_hash());
    EXPECT_NE(s.arch_hash(), UNetSpec({"seg", 1, 1, 32, 0}).arch_hash());
    for (const auto& [path, shape] : unet_layout(s)) EXPECT_EQ(p.at(path).shape, shape);
}

TEST(UNet, InitIsKaimingUniformWithZeroBiases) {
    UNetSpec s{"eps", 2, 1, 32, 64, 8, 32, {1, 1, 2}};
    auto p = unet_init(s, RngStream(1, 1));
    for (const auto& [path, t] : p) {
        if (path.ends_with(".bias") || path.ends_with(".beta")) {
            for (float v : t.data) EXPECT_EQ(v, 0.0f) << path;
        } else if (path.ends_with(".weight")) {
            const double bound = std::sqrt(6.0 / double(t.numel() / t.dim(0)));
            for (float v : t.data) EXPECT_LE(std::abs(v), bound) << path;
        }
    }
}

TEST(UNet, BatchedForwardEqualsPerSample) {
    UNetSpec s{"eps", 2, 1, 32, 64, 8, 32, {1, 1, 2}};
    auto p = unet_init(s, RngStream(3, 3));
    RngStream r(4, 4);
    auto x = rng_gaussian<float>(r, {3, 2, 32, 32});
    std::vector<int> steps{1, 77, 200};
    Tape<float> t(false);
    ParamBinder<float> b(t, p);
    auto all = unet_forward(s, b, t.constant(x), &steps).value();
    for (std::size_t n = 0; n < 3; ++n) {
        Tensor<float> xn({1, 2, 32, 32}, std::vector<float>(x.data.begin() + n * 2048, x.data.begin() + (n + 1) * 2048));
        std::vector<int> sn{steps[n]};
        Tape<float> t1(false);
        ParamBinder<float> b1(t1, p);
        auto one = unet_forward(s, b1, t1.constant(xn), &sn).value();
        for (std::size_t i = 0; i < 1024; ++i) ASSERT_EQ(one[i], all[n * 1024 + i]);
    }
}
