#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "fdm/error.hpp"

namespace fdm {

using Bytes = std::vector<std::uint8_t>;

static_assert(std::endian::native == std::endian::little,
              "wire formats are little-endian and written with memcpy");

inline std::uint32_t crc32(std::span<const std::uint8_t> data) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large buffers.
    std::size_t pos = 0;
    while (pos < data.size()) {
        const std::size_t n = std::min<std::size_t>(data.size() - pos, 1u << 30);
        crc = ::crc32(crc, data.data() + pos, static_cast<uInt>(n));
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { raw(&v, sizeof v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void magic(std::string_view m) { raw(m.data(), m.size()); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void floats(std::span<const float> f) { raw(f.data(), f.size_bytes()); }

    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }

    // Appends CRC32 over everything written so far.
    void crc() { u32(fdm::crc32(buf_)); }

    std::size_t size() const { return buf_.size(); }
    Bytes& buffer() { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    Bytes buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }

    void expect_magic(std::string_view m) {
        need(m.size(), "magic");
        if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
            throw FormatError("bad magic, expected \"" + std::string(m) + "\"", pos_);
        }
        pos_ += m.size();
    }

    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n, "byte block");
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    void floats(std::span<float> out) {
        need(out.size_bytes(), "float payload");
        std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }

    std::string string(std::size_t n) {
        auto b = bytes(n);
        return {reinterpret_cast<const char*>(b.data()), b.size()};
    }

    // Verifies a trailing CRC32 that covers every byte before it. The CRC must
    // be the last four bytes of the buffer.
    void verify_trailing_crc() {
        if (data_.size() < 4) throw FormatError("stream too short for checksum", data_.size());
        const std::size_t body = data_.size() - 4;
        std::uint32_t stored;
        std::memcpy(&stored, data_.data() + body, 4);
        if (stored != fdm::crc32(data_.first(body))) {
            throw ChecksumError("CRC32 mismatch", body);
        }
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    template <class V>
    V get() {
        need(sizeof(V), "integer field");
        V v;
        std::memcpy(&v, data_.data() + pos_, sizeof v);
        pos_ += sizeof v;
        return v;
    }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated stream reading ") + what, pos_);
        }
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// FNV-1a, used for architecture and config digests.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

} // namespace fdm
