#pragma once

#include <string>

#include "fdm/bytes.hpp"
#include "fdm/nn/tensor.hpp"

// Weight stream: "FDMW", u8 version, u32 entry count, then per entry
// u16 path length + path, u8 rank, u32 dims, f32 payload; trailing CRC32.
namespace fdm::nn {

inline constexpr char kWeightMagic[] = "FDMW";
inline constexpr std::uint8_t kWeightVersion = 1;

inline Bytes encode_weights(const ParamTree<float>& params) {
    ByteWriter w;
    w.magic(kWeightMagic);
    w.u8(kWeightVersion);
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [path, t] : params) {
        if (path.size() > UINT16_MAX) throw Error("weight path too long: " + path.substr(0, 64) + "...");
        if (t.rank() > UINT8_MAX) throw Error("tensor rank too large for \"" + path + "\"");
        w.u16(static_cast<std::uint16_t>(path.size()));
        w.raw(path.data(), path.size());
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape) w.u32(static_cast<std::uint32_t>(d));
        w.floats(t.data);
    }
    w.crc();
    return w.take();
}

// Size of the encoded stream for a given layout, without encoding it.
inline std::size_t encoded_weights_size(const std::map<std::string, Shape>& layout) {
    std::size_t n = 4 + 1 + 4 + 4;
    for (const auto& [path, shape] : layout) n += 2 + path.size() + 1 + 4 * shape.size() + 4 * numel(shape);
    return n;
}

inline ParamTree<float> decode_weights(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.verify_trailing_crc();
    r.expect_magic(kWeightMagic);
    const std::size_t version_at = r.offset();
    if (const auto v = r.u8(); v != kWeightVersion) {
        throw FormatError("unsupported weight stream version " + std::to_string(v), version_at);
    }
    const std::uint32_t count = r.u32();
    ParamTree<float> out;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::size_t entry_at = r.offset();
        const std::uint16_t len = r.u16();
        std::string path = r.string(len);
        if (!out.empty() && !(out.rbegin()->first < path)) {
            throw FormatError("weight paths not strictly ascending at \"" + path + "\"", entry_at);
        }
        const std::uint8_t rank = r.u8();
        Shape shape(rank);
        for (auto& d : shape) {
            const std::size_t dim_at = r.offset();
            d = r.u32();
            if (d == 0) throw FormatError("zero dimension in \"" + path + "\"", dim_at);
        }
        Tensor<float> t(shape);
        r.floats(t.data);
        out.emplace(std::move(path), std::move(t));
    }
    if (r.remaining() != 4) {
        throw FormatError("trailing bytes after " + std::to_string(count) + " entries", r.offset());
    }
    return out;
}

} // namespace fdm::nn
