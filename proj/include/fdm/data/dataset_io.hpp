#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fdm/bytes.hpp"
#include "fdm/data/phantom.hpp"

// On-disk dataset: one ".fds" file per sample plus manifest.tsv.
namespace fdm::data {

namespace fs = std::filesystem;

inline constexpr char kSampleMagic[] = "FDS1";

inline Bytes encode_sample(const Sample& s) {
    if (s.height > UINT16_MAX || s.width > UINT16_MAX) throw Error("sample too large to encode");
    ByteWriter w;
    w.magic(kSampleMagic);
    w.u16(static_cast<std::uint16_t>(s.height));
    w.u16(static_cast<std::uint16_t>(s.width));
    w.floats(s.image);
    w.bytes(s.mask);
    w.u8(s.provenance.encode());
    w.u32(s.patient_id);
    w.u32(s.slice_index);
    w.crc();
    return w.take();
}

inline Sample decode_sample(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.verify_trailing_crc();
    r.expect_magic(kSampleMagic);
    Sample s;
    s.height = r.u16();
    s.width = r.u16();
    s.image.resize(s.pixels());
    r.floats(s.image);
    auto m = r.bytes(s.pixels());
    s.mask.assign(m.begin(), m.end());
    s.provenance = Provenance::decode(r.u8());
    s.patient_id = r.u32();
    s.slice_index = r.u32();
    if (r.remaining() != 4) throw FormatError("trailing bytes in sample", r.offset());
    return s;
}

inline std::string sample_file_name(const Sample& s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%04u_s%02u.fds", s.patient_id, s.slice_index);
    return buf;
}

inline Bytes read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot open " + p.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Writes via a temporary name and renames, so readers never see half a file.
inline void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, p);
}

inline void write_text(const fs::path& p, const std::string& text) {
    write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const fs::path& p) {
    Bytes b = read_file(p);
    return {b.begin(), b.end()};
}

inline void save_dataset(const SiteDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << "# site=" << ds.site_id << "\n";
    manifest << "file\tpatient\tsplit\tprovenance\n";
    for (const Sample& s : ds.samples) {
        const std::string name = sample_file_name(s);
        write_file(dir / name, encode_sample(s));
        manifest << name << '\t' << s.patient_id << '\t' << split_name(ds.split_of(s.patient_id)) << '\t'
                 << s.provenance.label() << '\n';
    }
    write_text(dir / "manifest.tsv", manifest.str());
}

inline SiteDataset load_dataset(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.tsv";
    if (!fs::exists(mpath)) throw Error("no manifest.tsv in " + dir.string());
    std::istringstream in(read_text(mpath));
    SiteDataset ds;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.starts_with("# site=")) {
            ds.site_id = line.substr(7);
            continue;
        }
        if (!header) {
            header = true;
            continue;
        }
        std::istringstream row(line);
        std::string file, patient, split, prov;
        if (!(std::getline(row, file, '\t') && std::getline(row, patient, '\t') && std::getline(row, split, '\t') &&
              std::getline(row, prov))) {
            throw Error("malformed manifest row: " + line);
        }
        Sample s = decode_sample(read_file(dir / file));
        if (std::to_string(s.patient_id) != patient || s.provenance.label() != prov) {
            throw Error("manifest row disagrees with " + file);
        }
        if (Split sp = parse_split(split); sp != Split::none) ds.splits[s.patient_id] = sp;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace fdm::data
