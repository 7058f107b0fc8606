#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fdm/bytes.hpp"
#include "fdm/nn/ops.hpp"
#include "fdm/nn/rng.hpp"

namespace fdm::nn {

// Three-resolution encoder/decoder with skip connections. Level widths are
// base times the per-level multipliers. Every block is conv3x3 -> GroupNorm
// -> (+time bias) -> SiLU; downsampling is a stride-2 conv, upsampling nearest x2 followed
// by concatenation with the skip and a block.
struct UNetSpec {
    std::string name;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t base_width = 16;
    std::size_t time_dim = 0; // 0 disables timestep conditioning
    std::size_t channels_per_group = 8;
    std::size_t image_size = 32;
    std::array<std::size_t, 3> multipliers{1, 2, 2};

    std::size_t width(int level) const { return base_width * multipliers.at(static_cast<std::size_t>(level)); }

    std::string describe() const {
        return "unet:" + name + ";in=" + std::to_string(in_channels) + ";out=" + std::to_string(out_channels) +
               ";base=" + std::to_string(base_width) + ";mult=" + std::to_string(multipliers[0]) + "," +
               std::to_string(multipliers[1]) + "," + std::to_string(multipliers[2]) +
               ";time=" + std::to_string(time_dim) +
               ";gn=" + std::to_string(channels_per_group) + ";act=silu;up=nearest2x;size=" +
               std::to_string(image_size);
    }

    std::string arch_hash() const { return hex64(fnv1a64(describe())); }
};

// Parameter layout in path order.
inline std::map<std::string, Shape> unet_layout(const UNetSpec& s) {
    std::map<std::string, Shape> L;
    auto conv = [&](const std::string& p, std::size_t cout, std::size_t cin) {
        L[p + ".weight"] = {cout, cin, 3, 3};
        L[p + ".bias"] = {cout};
    };
    auto norm = [&](const std::string& p, std::size_t c) {
        L[p + ".gamma"] = {c};
        L[p + ".beta"] = {c};
    };
    auto block = [&](const std::string& p, std::size_t cout, std::size_t cin) {
        conv(p + ".conv", cout, cin);
        norm(p + ".norm", cout);
        if (s.time_dim) {
            L[p + ".time.weight"] = {cout, s.time_dim};
            L[p + ".time.bias"] = {cout};
        }
    };
    const std::size_t w0 = s.width(0), w1 = s.width(1), w2 = s.width(2);
    if (s.time_dim) {
        L["temb.fc1.weight"] = {s.time_dim, s.time_dim};
        L["temb.fc1.bias"] = {s.time_dim};
        L["temb.fc2.weight"] = {s.time_dim, s.time_dim};
        L["temb.fc2.bias"] = {s.time_dim};
    }
    conv("stem", w0, s.in_channels);
    block("enc0", w0, w0);
    conv("down1.conv", w1, w0);
    norm("down1.norm", w1);
    block("enc1", w1, w1);
    conv("down2.conv", w2, w1);
    norm("down2.norm", w2);
    block("mid", w2, w2);
    block("dec1", w1, w2 + w1);
    block("dec0", w0, w1 + w0);
    conv("head", s.out_channels, w0);
    return L;
}

// Kaiming-uniform (fan-in) for weights, zeros for biases, unit gamma.
inline ParamTree<float> unet_init(const UNetSpec& s, RngStream stream) {
    ParamTree<float> p;
    std::uint64_t idx = 0;
    for (const auto& [path, shape] : unet_layout(s)) {
        Tensor<float> t(shape);
        const bool is_weight = path.ends_with(".weight");
        if (path.ends_with(".gamma")) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else if (is_weight) {
            const std::size_t fan_in = t.numel() / shape[0];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            RngStream r = stream.substream(idx);
            for (float& v : t.data) v = static_cast<float>(r.uniform(-bound, bound));
        }
        ++idx;
        p.emplace(path, std::move(t));
    }
    return p;
}

// [N, dim] sinusoidal embedding of integer timesteps.
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& steps, std::size_t dim) {
    Tensor<T> out({steps.size(), dim});
    const std::size_t half = dim / 2;
    for (std::size_t n = 0; n < steps.size(); ++n) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = steps[n] * freq;
            out[n * dim + i] = static_cast<T>(std::sin(a));
            out[n * dim + half + i] = static_cast<T>(std::cos(a));
        }
    }
    return out;
}

// Returns raw output-channel values (logits or predicted noise).
template <class T>
Var<T> unet_forward(const UNetSpec& s, ParamBinder<T>& P, Var<T> x, const std::vector<int>* steps = nullptr) {
    Tape<T>& tape = P.tape();
    if (x.shape().size() != 4 || x.dim(1) != s.in_channels) {
        throw ShapeError("unet \"" + s.name + "\": expected input [N," + std::to_string(s.in_channels) +
                         ",H,W], got " + to_string(x.shape()));
    }
    if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0) {
        throw ShapeError("unet \"" + s.name + "\": spatial size must be divisible by 4, got " + to_string(x.shape()));
    }
    std::optional<Var<T>> temb;
    if (s.time_dim) {
        if (!steps || steps->size() != x.dim(0)) throw Error("unet \"" + s.name + "\": one timestep per sample required");
        Var<T> e = tape.constant(timestep_embedding<T>(*steps, s.time_dim));
        e = silu(linear(e, P("temb.fc1.weight"), P("temb.fc1.bias")));
        e = linear(e, P("temb.fc2.weight"), P("temb.fc2.bias"));
        temb = silu(e);
    }
    auto conv = [&](const std::string& p, Var<T> in, std::size_t stride) {
        return conv2d(in, P(p + ".weight"), P(p + ".bias"), stride, 1);
    };
    auto norm = [&](const std::string& p, Var<T> in) {
        return group_norm(in, P(p + ".gamma"), P(p + ".beta"), s.channels_per_group);
    };
    auto block = [&](const std::string& p, Var<T> in) {
        Var<T> h = norm(p + ".norm", conv(p + ".conv", in, 1));
        if (temb) h = add_channel_bias(h, linear(*temb, P(p + ".time.weight"), P(p + ".time.bias")));
        return silu(h);
    };
    Var<T> h0 = block("enc0", conv("stem", x, 1));
    Var<T> h1 = block("enc1", silu(norm("down1.norm", conv("down1.conv", h0, 2))));
    Var<T> h2 = block("mid", silu(norm("down2.norm", conv("down2.conv", h1, 2))));
    Var<T> u1 = block("dec1", concat_channels(upsample_nearest2x(h2), h1));
    Var<T> u0 = block("dec0", concat_channels(upsample_nearest2x(u1), h0));
    return conv("head", u0, 1);
}

} // namespace fdm::nn
