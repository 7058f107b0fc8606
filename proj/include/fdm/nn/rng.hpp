#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "fdm/nn/tensor.hpp"

namespace fdm::nn {

// Philox4x32-10 block: counter-based, so any (key, counter) pair can be
// evaluated independently and reproducibly.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
        const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
        ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
               static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

// A reproducible random stream identified by (seed, stream id). Each block
// yields 128 bits; `counter` counts consumed blocks.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
        : seed_(seed), stream_(stream_id), counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    // Derives an independent child stream; used to give every patient, mask
    // or worker its own stream from one plan seed.
    RngStream substream(std::uint64_t id) const {
        return RngStream(seed_, stream_ * 0x9E3779B97F4A7C15ull + id + 1);
    }

    std::array<std::uint32_t, 4> next_block() {
        const std::array<std::uint32_t, 4> ctr{
            static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
            static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
        const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed_),
                                               static_cast<std::uint32_t>(seed_ >> 32)};
        ++counter_;
        return philox4x32(ctr, key);
    }

    std::uint64_t next_u64() {
        auto b = next_block();
        return (std::uint64_t{b[0]} << 32) | b[1];
    }

    // Uniform in [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // One block gives two 53-bit uniforms, i.e. one Box-Muller pair.
    std::array<double, 2> gaussian_pair() {
        auto b = next_block();
        const std::uint64_t a = (std::uint64_t{b[0]} << 32) | b[1];
        const std::uint64_t c = (std::uint64_t{b[2]} << 32) | b[3];
        const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53; // (0, 1]
        const double u2 = static_cast<double>(c >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(th), r * std::sin(th)};
    }

    double gaussian() { return gaussian_pair()[0]; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_;
};

template <class T = float>
Tensor<T> rng_gaussian(RngStream& stream, const Shape& shape) {
    Tensor<T> out(shape);
    std::size_t i = 0;
    while (i < out.numel()) {
        const auto pair = stream.gaussian_pair();
        out[i++] = static_cast<T>(pair[0]);
        if (i < out.numel()) out[i++] = static_cast<T>(pair[1]);
    }
    return out;
}

} // namespace fdm::nn
