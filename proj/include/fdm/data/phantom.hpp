#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fdm/error.hpp"
#include "fdm/nn/rng.hpp"

// Two-site cardiac phantoms: a bright blood pool inside an annular
// myocardium on a dark background, with site-specific intensity, noise and
// shading.
namespace fdm::data {

struct SiteProfile {
    std::string site_id;
    double myo_mean = 0.55;
    double blood_mean = 0.95;
    double background_mean = 0.20;
    double noise_sigma = 0.03;
    std::array<double, 2> ring_outer_radius_range{0.20, 0.28};
    std::array<double, 2> ring_thickness_range{0.07, 0.11};
    double bias_field_strength = 0.0;

    void validate(std::size_t image_size = 32) const;
};

// Per-patient center offset and per-slice jitter, in pixels.
inline constexpr double kCenterOffset = 3.0;
inline constexpr double kCenterJitter = 2.0;
inline constexpr double kRadiusJitter = 1.0;

inline void SiteProfile::validate(std::size_t image_size) const {
    auto fail = [&](const std::string& why) { throw Error("site profile \"" + site_id + "\": " + why); };
    if (site_id.size() != 1 || static_cast<unsigned char>(site_id[0]) < 0x21 ||
        static_cast<unsigned char>(site_id[0]) > 0x7e) {
        fail("site id must be a single printable ASCII character");
    }
    for (double m : {myo_mean, blood_mean, background_mean}) {
        if (!(m >= 0.0 && m <= 1.0)) fail("intensity means must lie in [0,1]");
    }
    if (std::abs(myo_mean - blood_mean) < 0.05 || std::abs(myo_mean - background_mean) < 0.05 ||
        std::abs(blood_mean - background_mean) < 0.05) {
        fail("intensity means must differ pairwise by at least 0.05");
    }
    if (!(noise_sigma >= 0.0)) fail("noise sigma must be non-negative");
    if (!(bias_field_strength >= 0.0 && bias_field_strength <= 0.5)) fail("bias field strength must lie in [0,0.5]");
    const auto& ro = ring_outer_radius_range;
    const auto& th = ring_thickness_range;
    if (!(ro[0] > 0 && ro[0] <= ro[1]) || !(th[0] > 0 && th[0] <= th[1])) fail("radius ranges must be ordered and positive");
    const double W = static_cast<double>(image_size);
    if (th[1] * W + kRadiusJitter >= ro[0] * W - kRadiusJitter) fail("ring thickness leaves no blood pool");
    const double reach = ro[1] * W + kRadiusJitter + kCenterOffset + kCenterJitter;
    if (reach >= W / 2) fail("annulus can leave the image");
}

// Fixed defaults for the two hospitals.
inline std::pair<SiteProfile, SiteProfile> default_profiles() {
    SiteProfile a;
    a.site_id = "A";
    a.myo_mean = 0.55;
    a.noise_sigma = 0.03;
    a.bias_field_strength = 0.0;
    SiteProfile b = a;
    b.site_id = "B";
    b.myo_mean = 0.75;
    b.noise_sigma = 0.06;
    b.bias_field_strength = 0.2;
    return {a, b};
}

// Packed into one byte on disk: bit 7 = synthetic, low 7 bits = site char.
struct Provenance {
    bool synthetic = false;
    char site = 'A';

    std::uint8_t encode() const { return static_cast<std::uint8_t>((synthetic ? 0x80 : 0) | (site & 0x7f)); }
    static Provenance decode(std::uint8_t b) { return {(b & 0x80) != 0, static_cast<char>(b & 0x7f)}; }

    std::string label() const { return (synthetic ? "synthetic:" : "real:") + std::string(1, site); }

    static Provenance parse(const std::string& s) {
        if (s.size() == 6 && s.starts_with("real:")) return {false, s[5]};
        if (s.size() == 11 && s.starts_with("synthetic:")) return {true, s[10]};
        throw Error("bad provenance label \"" + s + "\"");
    }

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Sample {
    std::size_t height = 32, width = 32;
    std::vector<float> image;
    std::vector<std::uint8_t> mask;
    std::uint32_t patient_id = 0;
    std::uint32_t slice_index = 0;
    Provenance provenance;

    std::size_t pixels() const { return height * width; }
    std::size_t foreground() const {
        return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    }
    friend bool operator==(const Sample&, const Sample&) = default;
};

// Throws if a sample breaks the image/mask contract.
inline void check_sample(const Sample& s) {
    const std::string who = "sample p" + std::to_string(s.patient_id) + " s" + std::to_string(s.slice_index);
    if (s.image.size() != s.pixels() || s.mask.size() != s.pixels()) throw ShapeError(who + ": image/mask size mismatch");
    for (float v : s.image) {
        if (!(v >= 0.0f && v <= 1.0f)) throw Error(who + ": image value outside [0,1]");
    }
    for (auto m : s.mask) {
        if (m > 1) throw Error(who + ": mask is not binary");
    }
    const double frac = static_cast<double>(s.foreground()) / static_cast<double>(s.pixels());
    if (frac < 0.02 || frac > 0.30) throw Error(who + ": mask foreground fraction out of [0.02,0.30]");
}

enum class Split : std::uint8_t { none, train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "none";
    }
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "none") return Split::none;
    throw Error("unknown split \"" + s + "\"");
}

struct SiteDataset {
    std::string site_id;
    std::optional<SiteProfile> profile;
    std::vector<Sample> samples;
    std::map<std::uint32_t, Split> splits; // patient -> split

    std::set<std::uint32_t> patients() const {
        std::set<std::uint32_t> out;
        for (const auto& s : samples) out.insert(s.patient_id);
        return out;
    }

    Split split_of(std::uint32_t patient) const {
        auto it = splits.find(patient);
        return it == splits.end() ? Split::none : it->second;
    }

    std::vector<Sample> in_split(Split which) const {
        std::vector<Sample> out;
        for (const auto& s : samples) {
            if (split_of(s.patient_id) == which) out.push_back(s);
        }
        return out;
    }

    friend bool operator==(const SiteDataset& a, const SiteDataset& b) {
        return a.site_id == b.site_id && a.samples == b.samples && a.splits == b.splits;
    }
};

// Renders one slice. Pixel centers are at (x + 0.5, y + 0.5).
inline Sample render_slice(const SiteProfile& p, std::size_t size, double cx, double cy, double r_outer, double r_inner,
                           double bias_angle, nn::RngStream& noise) {
    Sample s;
    s.height = s.width = size;
    s.image.resize(size * size);
    s.mask.resize(size * size);
    const double half = static_cast<double>(size) / 2;
    const double ca = std::cos(bias_angle), sa = std::sin(bias_angle);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            const double r = std::hypot(px - cx, py - cy);
            const bool myo = r >= r_inner && r < r_outer;
            double v = r < r_inner ? p.blood_mean : myo ? p.myo_mean : p.background_mean;
            const double u = ((px - half) * ca + (py - half) * sa) / half;
            v *= 1.0 + p.bias_field_strength * u;
            v += p.noise_sigma * noise.gaussian();
            s.image[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            s.mask[y * size + x] = myo ? 1 : 0;
        }
    }
    return s;
}

inline SiteDataset generate_site_dataset(const SiteProfile& profile, std::size_t n_patients,
                                         std::size_t slices_per_patient, std::uint64_t seed, std::size_t size = 32) {
    profile.validate(size);
    if (n_patients < 5) throw Error("generate_site_dataset: need at least 5 patients");
    if (slices_per_patient < 1) throw Error("generate_site_dataset: need at least one slice per patient");
    SiteDataset ds;
    ds.site_id = profile.site_id;
    ds.profile = profile;
    const double W = static_cast<double>(size);
    const nn::RngStream root(seed, static_cast<std::uint64_t>(profile.site_id[0]));
    for (std::size_t pi = 0; pi < n_patients; ++pi) {
        nn::RngStream anat = root.substream(2 * pi);
        nn::RngStream noise = root.substream(2 * pi + 1);
        const double pcx = W / 2 + anat.uniform(-kCenterOffset, kCenterOffset);
        const double pcy = W / 2 + anat.uniform(-kCenterOffset, kCenterOffset);
        const double ro = W * anat.uniform(profile.ring_outer_radius_range[0], profile.ring_outer_radius_range[1]);
        const double th = W * anat.uniform(profile.ring_thickness_range[0], profile.ring_thickness_range[1]);
        const double angle = anat.uniform(0.0, 2 * std::numbers::pi);
        for (std::size_t si = 0; si < slices_per_patient; ++si) {
            const double cx = pcx + anat.uniform(-kCenterJitter, kCenterJitter);
            const double cy = pcy + anat.uniform(-kCenterJitter, kCenterJitter);
            const double r_outer = ro + anat.uniform(-kRadiusJitter, kRadiusJitter);
            Sample s = render_slice(profile, size, cx, cy, r_outer, r_outer - th, angle, noise);
            s.patient_id = static_cast<std::uint32_t>(pi);
            s.slice_index = static_cast<std::uint32_t>(si);
            s.provenance = {false, profile.site_id[0]};
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

struct SplitRatios {
    double train = 0.6, val = 0.2, test = 0.2;
};

// Seeded shuffle of patient ids, then contiguous assignment with rounded
// counts (test takes the remainder).
inline SiteDataset split_dataset(SiteDataset ds, SplitRatios ratios, std::uint64_t seed) {
    const double total = ratios.train + ratios.val + ratios.test;
    if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0)) throw Error("split_dataset: ratios must be positive");
    auto ids = ds.patients();
    std::vector<std::uint32_t> order(ids.begin(), ids.end());
    const std::size_t n = order.size();
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train / total));
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val / total));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
        throw Error("split_dataset: " + std::to_string(n) + " patients are too few for three non-empty splits");
    }
    nn::RngStream r(seed, 0x5b11u);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[r.index(i)]);
    ds.splits.clear();
    for (std::size_t i = 0; i < n; ++i) {
        ds.splits[order[i]] = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
    }
    return ds;
}

} // namespace fdm::data
