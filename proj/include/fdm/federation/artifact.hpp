#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fdm/bytes.hpp"
#include "fdm/diffusion/ddpm.hpp"
#include "fdm/nn/codec.hpp"
#include "fdm/nn/unet.hpp"
#include "fdm/seg/segmentation.hpp"
#include "fdm/text/kv.hpp"

// Model artifact: "FDMA", u8 version, u8 kind, u32 metadata length +
// key=value text, u32 payload length + weight stream, CRC32 over the rest.
namespace fdm::federation {

inline constexpr char kArtifactMagic[] = "FDMA";
inline constexpr std::uint8_t kArtifactVersion = 1;
inline constexpr std::size_t kMetadataCap = 16 * 1024;
inline constexpr std::size_t kArtifactHeaderSize = 4 + 1 + 1 + 4; // through the metadata length
inline constexpr const char* kArtifactExtension = ".fdma";

enum class ArtifactKind : std::uint8_t { diffusion = 1, segmentation = 2 };

inline const char* kind_name(ArtifactKind k) { return k == ArtifactKind::diffusion ? "diffusion" : "segmentation"; }

inline ArtifactKind parse_kind(const std::string& s) {
    if (s == "diffusion") return ArtifactKind::diffusion;
    if (s == "segmentation") return ArtifactKind::segmentation;
    throw Error("unknown artifact kind \"" + s + "\"");
}

class CorruptArtifactError : public ChecksumError {
public:
    using ChecksumError::ChecksumError;
};

class IncompatibleArchitectureError : public Error {
public:
    IncompatibleArchitectureError(const std::string& expected, const std::string& found)
        : Error("incompatible architecture: expected " + expected + ", artifact declares " + found) {}
};

struct ArtifactMetadata {
    std::string name;
    ArtifactKind kind = ArtifactKind::diffusion;
    std::string origin_site;
    std::string arch_hash;
    std::optional<int> T;
    std::optional<double> beta_min, beta_max;
    std::string train_config_digest;
    std::uint64_t created = 0;

    friend bool operator==(const ArtifactMetadata&, const ArtifactMetadata&) = default;
};

inline const std::set<std::string>& metadata_keys() {
    static const std::set<std::string> keys{"name",     "kind",     "origin_site",         "arch_hash", "T",
                                            "beta_min", "beta_max", "train_config_digest", "created"};
    return keys;
}

inline void check_complete(const ArtifactMetadata& m) {
    if (m.name.empty() || m.origin_site.empty() || m.arch_hash.empty() || m.train_config_digest.empty()) {
        throw Error("artifact metadata incomplete: name, origin_site, arch_hash and train_config_digest are required");
    }
    for (const std::string* v : {&m.name, &m.origin_site, &m.arch_hash, &m.train_config_digest}) {
        if (v->find('\n') != std::string::npos || v->find('=') != std::string::npos) {
            throw Error("artifact metadata values may not contain '=' or newlines");
        }
    }
    const bool sched = m.T && m.beta_min && m.beta_max;
    if (m.kind == ArtifactKind::diffusion && !sched) throw Error("diffusion artifact metadata needs T, beta_min, beta_max");
    if (m.kind == ArtifactKind::segmentation && (m.T || m.beta_min || m.beta_max)) {
        throw Error("segmentation artifact metadata carries no schedule");
    }
}

// Keys in sorted order, one per line.
inline std::string metadata_text(const ArtifactMetadata& m) {
    std::map<std::string, std::string> kv{{"name", m.name},
                                          {"kind", kind_name(m.kind)},
                                          {"origin_site", m.origin_site},
                                          {"arch_hash", m.arch_hash},
                                          {"train_config_digest", m.train_config_digest},
                                          {"created", std::to_string(m.created)}};
    if (m.T) kv["T"] = std::to_string(*m.T);
    if (m.beta_min) kv["beta_min"] = text::format_double(*m.beta_min);
    if (m.beta_max) kv["beta_max"] = text::format_double(*m.beta_max);
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline ArtifactMetadata parse_metadata(const std::string& textv) {
    ArtifactMetadata m;
    std::set<std::string> seen;
    for (const auto& e : text::parse_lines(textv, false)) {
        if (!metadata_keys().count(e.key)) throw Error("unknown metadata key \"" + e.key + "\"");
        if (!seen.insert(e.key).second) throw Error("duplicate metadata key \"" + e.key + "\"");
        if (e.key == "name") m.name = e.value;
        else if (e.key == "kind") m.kind = parse_kind(e.value);
        else if (e.key == "origin_site") m.origin_site = e.value;
        else if (e.key == "arch_hash") m.arch_hash = e.value;
        else if (e.key == "T") m.T = text::parse_number<int>(e.value, "T");
        else if (e.key == "beta_min") m.beta_min = text::parse_number<double>(e.value, "beta_min");
        else if (e.key == "beta_max") m.beta_max = text::parse_number<double>(e.value, "beta_max");
        else if (e.key == "train_config_digest") m.train_config_digest = e.value;
        else if (e.key == "created") m.created = text::parse_number<std::uint64_t>(e.value, "created");
    }
    return m;
}

// Frames pre-built sections without any policy checks.
inline Bytes frame_artifact(std::uint8_t kind, std::string_view metadata, std::span<const std::uint8_t> payload) {
    ByteWriter w;
    w.magic(kArtifactMagic);
    w.u8(kArtifactVersion);
    w.u8(kind);
    w.u32(static_cast<std::uint32_t>(metadata.size()));
    w.raw(metadata.data(), metadata.size());
    w.u32(static_cast<std::uint32_t>(payload.size()));
    w.bytes(payload);
    w.crc();
    return w.take();
}

inline Bytes export_artifact(const nn::ParamTree<float>& params, const ArtifactMetadata& meta) {
    check_complete(meta);
    const std::string md = metadata_text(meta);
    if (md.size() > kMetadataCap) {
        throw Error("artifact metadata is " + std::to_string(md.size()) + " bytes, cap is " + std::to_string(kMetadataCap));
    }
    return frame_artifact(static_cast<std::uint8_t>(meta.kind), md, nn::encode_weights(params));
}

// Section boundaries of a framed artifact. Offsets are absolute.
struct ArtifactView {
    std::uint8_t version = 0;
    std::uint8_t kind = 0;
    std::size_t metadata_offset = 0;
    std::string metadata;
    std::size_t payload_offset = 0;
    std::span<const std::uint8_t> payload;
    std::size_t trailing = 0; // bytes between payload end and checksum
};

// Checks magic, framing and checksum. Content policy is left to callers.
inline ArtifactView parse_artifact(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    try {
        r.verify_trailing_crc();
    } catch (const ChecksumError& e) {
        throw CorruptArtifactError("corrupt artifact: checksum mismatch", e.offset());
    }
    r.expect_magic(kArtifactMagic);
    ArtifactView v;
    v.version = r.u8();
    if (v.version != kArtifactVersion) throw FormatError("unsupported artifact version " + std::to_string(v.version), 4);
    v.kind = r.u8();
    const std::uint32_t mlen = r.u32();
    v.metadata_offset = r.offset();
    v.metadata = r.string(mlen);
    const std::uint32_t plen = r.u32();
    v.payload_offset = r.offset();
    v.payload = r.bytes(plen);
    if (r.remaining() < 4) throw FormatError("artifact truncated before checksum", r.offset());
    v.trailing = r.remaining() - 4;
    return v;
}

// Artifact byte length for a layout and metadata size.
inline std::size_t artifact_size(std::size_t metadata_len, std::size_t payload_len) {
    return kArtifactHeaderSize + metadata_len + 4 + payload_len + 4;
}

struct ImportedArtifact {
    nn::ParamTree<float> params;
    ArtifactMetadata metadata;
};

inline ImportedArtifact import_artifact(std::span<const std::uint8_t> bytes, const nn::UNetSpec& expected) {
    ArtifactView v = parse_artifact(bytes);
    if (v.trailing) throw FormatError("unexpected bytes after artifact payload", v.payload_offset + v.payload.size());
    if (v.kind != 1 && v.kind != 2) throw FormatError("unknown artifact kind " + std::to_string(v.kind), 5);
    ImportedArtifact out;
    out.metadata = parse_metadata(v.metadata);
    if (static_cast<std::uint8_t>(out.metadata.kind) != v.kind) throw FormatError("artifact kind byte disagrees with metadata", 5);
    check_complete(out.metadata);
    if (out.metadata.arch_hash != expected.arch_hash()) {
        throw IncompatibleArchitectureError(expected.arch_hash(), out.metadata.arch_hash);
    }
    out.params = nn::decode_weights(v.payload);
    const auto layout = nn::unet_layout(expected);
    bool same = layout.size() == out.params.size();
    for (auto it = layout.begin(); same && it != layout.end(); ++it) {
        auto p = out.params.find(it->first);
        same = p != out.params.end() && p->second.shape == it->second;
    }
    if (!same) throw IncompatibleArchitectureError(expected.arch_hash(), out.metadata.arch_hash + " (payload layout differs)");
    return out;
}

inline ArtifactMetadata diffusion_metadata(const std::string& name, const std::string& site,
                                           const diffusion::DiffusionTrainConfig& cfg, const nn::UNetSpec& spec,
                                           std::uint64_t created) {
    ArtifactMetadata m;
    m.name = name;
    m.kind = ArtifactKind::diffusion;
    m.origin_site = site;
    m.arch_hash = spec.arch_hash();
    m.T = cfg.T;
    m.beta_min = cfg.beta_min;
    m.beta_max = cfg.beta_max;
    m.train_config_digest = hex64(fnv1a64(cfg.digest_text()));
    m.created = created;
    return m;
}

inline ArtifactMetadata segmentation_metadata(const std::string& name, const std::string& site,
                                              const seg::SegTrainConfig& cfg, const nn::UNetSpec& spec,
                                              std::uint64_t created) {
    ArtifactMetadata m;
    m.name = name;
    m.kind = ArtifactKind::segmentation;
    m.origin_site = site;
    m.arch_hash = spec.arch_hash();
    m.train_config_digest = hex64(fnv1a64(cfg.digest_text()));
    m.created = created;
    return m;
}

// Architectures this build knows, by digest.
inline std::map<std::string, nn::UNetSpec> known_architectures() {
    std::map<std::string, nn::UNetSpec> out;
    for (const auto& s : {diffusion::eps_net_spec(), seg::seg_net_spec()}) out.emplace(s.arch_hash(), s);
    return out;
}

// Only type the exchange channels accept: bytes that frame and checksum as
// an artifact. There is deliberately no conversion from samples or datasets.
class ArtifactBytes {
public:
    explicit ArtifactBytes(Bytes b) : bytes_(std::move(b)) { parse_artifact(bytes_); }

    const Bytes& bytes() const { return bytes_; }
    std::size_t size() const { return bytes_.size(); }
    std::uint32_t checksum() const {
        std::uint32_t c;
        std::memcpy(&c, bytes_.data() + bytes_.size() - 4, 4);
        return c;
    }

    friend bool operator==(const ArtifactBytes&, const ArtifactBytes&) = default;

private:
    Bytes bytes_;
};

} // namespace fdm::federation
