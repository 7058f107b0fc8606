#pragma once

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "fdm/data/phantom.hpp"
#include "fdm/federation/artifact.hpp"

namespace fdm::federation {

struct Finding {
    int rule = 0;
    std::size_t offset = 0;
    std::string description;
};

struct AuditReport {
    std::vector<Finding> findings;
    bool pass() const { return findings.empty(); }
};

inline constexpr std::size_t kLeakWindow = 64;

namespace detail {

// Polynomial rolling hash over a fixed window, mod 2^64.
class RollingHash {
public:
    static constexpr std::uint64_t kBase = 0x100000001b3ull;

    RollingHash() {
        top_ = 1;
        for (std::size_t i = 1; i < kLeakWindow; ++i) top_ *= kBase;
    }

    std::uint64_t init(const std::uint8_t* p) const {
        std::uint64_t h = 0;
        for (std::size_t i = 0; i < kLeakWindow; ++i) h = h * kBase + p[i];
        return h;
    }

    std::uint64_t roll(std::uint64_t h, std::uint8_t out, std::uint8_t in) const { return (h - out * top_) * kBase + in; }

private:
    std::uint64_t top_;
};

struct WindowRef {
    std::uint64_t hash;
    std::uint32_t image;
    std::uint32_t offset;
    bool operator<(const WindowRef& o) const { return hash < o.hash; }
};

} // namespace detail

// Start offsets (within `payload`) of maximal runs of 64-byte windows that
// also occur in some raw f32 image. Candidates are confirmed with memcmp.
inline std::vector<std::pair<std::size_t, std::size_t>> find_leak_runs(std::span<const std::uint8_t> payload,
                                                                       const std::vector<data::Sample>& images) {
    std::vector<std::pair<std::size_t, std::size_t>> runs; // (start, length in windows)
    if (payload.size() < kLeakWindow) return runs;
    detail::RollingHash rh;
    std::vector<detail::WindowRef> index;
    for (std::size_t k = 0; k < images.size(); ++k) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(images[k].image.data());
        const std::size_t n = images[k].image.size() * sizeof(float);
        if (n < kLeakWindow) continue;
        std::uint64_t h = rh.init(p);
        for (std::size_t off = 0;; ++off) {
            index.push_back({h, static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(off)});
            if (off + kLeakWindow >= n) break;
            h = rh.roll(h, p[off], p[off + kLeakWindow]);
        }
    }
    std::sort(index.begin(), index.end());
    auto matches = [&](std::size_t pos, std::uint64_t h) {
        auto [lo, hi] = std::equal_range(index.begin(), index.end(), detail::WindowRef{h, 0, 0});
        for (auto it = lo; it != hi; ++it) {
            const auto* img = reinterpret_cast<const std::uint8_t*>(images[it->image].image.data());
            if (std::memcmp(img + it->offset, payload.data() + pos, kLeakWindow) == 0) return true;
        }
        return false;
    };
    std::uint64_t h = rh.init(payload.data());
    bool in_run = false;
    for (std::size_t pos = 0;; ++pos) {
        const bool hit = matches(pos, h);
        if (hit && !in_run) runs.push_back({pos, 0});
        if (hit) ++runs.back().second;
        in_run = hit;
        if (pos + kLeakWindow >= payload.size()) break;
        h = rh.roll(h, payload[pos], payload[pos + kLeakWindow]);
    }
    return runs;
}

// Rules: 1 schema whitelist, 2 metadata cap, 3 verbatim image leak,
// 4 payload length vs declared architecture. Unparseable input throws.
inline AuditReport privacy_audit(std::span<const std::uint8_t> bytes, const std::vector<data::Sample>& dataset,
                                 const std::map<std::string, nn::UNetSpec>& architectures = known_architectures()) {
    ArtifactView v = parse_artifact(bytes);
    AuditReport rep;
    auto add = [&](int rule, std::size_t off, std::string d) { rep.findings.push_back({rule, off, std::move(d)}); };

    if (v.kind != 1 && v.kind != 2) add(1, 5, "unknown artifact kind " + std::to_string(v.kind));
    if (v.trailing) add(1, v.payload_offset + v.payload.size(), "undeclared section after payload");
    std::optional<ArtifactMetadata> meta;
    try {
        for (const auto& e : text::parse_lines(v.metadata, false)) {
            if (!metadata_keys().count(e.key)) add(1, v.metadata_offset, "metadata key \"" + e.key + "\" not in schema");
        }
        meta = parse_metadata(v.metadata);
    } catch (const Error& e) {
        add(1, v.metadata_offset, std::string("metadata does not parse: ") + e.what());
    }
    std::optional<nn::ParamTree<float>> weights;
    try {
        weights = nn::decode_weights(v.payload);
    } catch (const FormatError& e) {
        add(1, v.payload_offset + e.offset(), std::string("payload is not a weight stream: ") + e.what());
    }

    if (v.metadata.size() > kMetadataCap) {
        add(2, v.metadata_offset, "metadata is " + std::to_string(v.metadata.size()) + " bytes, cap is " +
                                      std::to_string(kMetadataCap));
    }

    for (auto [start, windows] : find_leak_runs(v.payload, dataset)) {
        add(3, v.payload_offset + start,
            "payload reproduces raw image bytes (" + std::to_string(windows + kLeakWindow - 1) + " bytes)");
    }

    if (meta) {
        auto it = architectures.find(meta->arch_hash);
        if (it == architectures.end()) {
            add(4, v.metadata_offset, "unknown architecture hash " + meta->arch_hash);
        } else {
            const std::size_t expected = nn::encoded_weights_size(nn::unet_layout(it->second));
            if (v.payload.size() != expected) {
                add(4, v.payload_offset - 4, "payload is " + std::to_string(v.payload.size()) + " bytes, architecture " +
                                                 meta->arch_hash + " implies " + std::to_string(expected));
            }
        }
    }
    return rep;
}

inline std::string format_report(const AuditReport& r) {
    std::string out = r.pass() ? "PASS\n" : "FAIL\n";
    for (const auto& f : r.findings) {
        out += "rule " + std::to_string(f.rule) + " at byte " + std::to_string(f.offset) + ": " + f.description + "\n";
    }
    return out;
}

} // namespace fdm::federation
