#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fdm/data/phantom.hpp"
#include "fdm/diffusion/ddpm.hpp"
#include "fdm/seg/segmentation.hpp"
#include "fdm/text/kv.hpp"

namespace fdm::experiments {

namespace fs = std::filesystem;

// "A" or "A+syn.B": a site's real train split, optionally joined with images
// synthesized on its own masks by another site's generator.
struct TrainSource {
    std::string site;
    std::string synthetic_from; // empty for real data only

    std::string key() const { return synthetic_from.empty() ? site : site + "+syn." + synthetic_from; }
    std::string label() const {
        return synthetic_from.empty() ? seg::hospital_label(site) : seg::hospital_label(site) + " + syn." + synthetic_from;
    }
    friend auto operator<=>(const TrainSource&, const TrainSource&) = default;
};

inline TrainSource parse_train_source(const std::string& s) {
    const auto plus = s.find("+syn.");
    TrainSource t;
    t.site = plus == std::string::npos ? s : s.substr(0, plus);
    if (plus != std::string::npos) t.synthetic_from = s.substr(plus + 5);
    if (t.site.size() != 1 || (plus != std::string::npos && t.synthetic_from.size() != 1)) {
        throw Error("train source must look like \"A\" or \"A+syn.B\", got \"" + s + "\"");
    }
    if (t.site == t.synthetic_from) throw Error("train source \"" + s + "\" augments a site with its own generator");
    return t;
}

struct RowSpec {
    TrainSource train;
    std::string test_site;
    bool supplementary = false;
};

struct SitePlan {
    data::SiteProfile profile;
    std::size_t patients = 0;
    std::size_t slices = 0;
    std::uint64_t data_seed = 0;
    std::uint64_t split_seed = 0;
    data::SplitRatios ratios;
};

struct ExperimentPlan {
    std::string name;
    fs::path out;
    std::string registry; // host:port, empty for a file drop
    std::size_t bins = 64;
    std::uint64_t timestamp = 0;
    std::size_t image_size = 32;
    std::map<std::string, SitePlan> sites;
    diffusion::DiffusionTrainConfig diffusion;
    std::map<std::string, std::uint64_t> diffusion_seed; // by generator site
    std::size_t synthesis_batch = 16;
    std::map<std::string, std::uint64_t> synthesis_seed; // by train source key
    seg::SegTrainConfig segmentation;
    std::map<std::string, std::uint64_t> segmentation_seed; // by train source key
    std::vector<RowSpec> rows;

    std::vector<RowSpec> main_rows() const;
    std::vector<RowSpec> supplementary_rows() const;
    std::set<TrainSource> train_sources() const;
    std::set<std::string> generator_sites() const;
    void validate() const;
};

inline std::vector<RowSpec> ExperimentPlan::main_rows() const {
    std::vector<RowSpec> out;
    for (const auto& r : rows) {
        if (!r.supplementary) out.push_back(r);
    }
    return out;
}

inline std::vector<RowSpec> ExperimentPlan::supplementary_rows() const {
    std::vector<RowSpec> out;
    for (const auto& r : rows) {
        if (r.supplementary) out.push_back(r);
    }
    return out;
}

inline std::set<TrainSource> ExperimentPlan::train_sources() const {
    std::set<TrainSource> out;
    for (const auto& r : rows) out.insert(r.train);
    return out;
}

inline std::set<std::string> ExperimentPlan::generator_sites() const {
    std::set<std::string> out;
    for (const auto& r : rows) {
        if (!r.train.synthetic_from.empty()) out.insert(r.train.synthetic_from);
    }
    return out;
}

inline void ExperimentPlan::validate() const {
    auto fail = [&](const std::string& why) { throw Error("plan \"" + name + "\": " + why); };
    if (name.empty()) fail("missing name");
    if (out.empty()) fail("missing output directory");
    if (bins == 0) fail("bins must be positive");
    if (sites.empty()) fail("no sites defined");
    if (rows.empty()) fail("no result rows");
    for (const auto& [id, s] : sites) {
        if (s.profile.site_id != id) fail("site " + id + " has mismatched profile id");
        s.profile.validate(image_size);
        if (s.patients < 5 || s.slices == 0) fail("site " + id + " needs at least 5 patients and 1 slice");
    }
    diffusion.validate();
    segmentation.validate();
    if (synthesis_batch == 0) fail("synthesis batch size must be positive");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : rows) {
        for (const std::string& s : {r.train.site, r.test_site}) {
            if (!sites.count(s)) fail("row references undefined site " + s);
        }
        if (!r.train.synthetic_from.empty() && !sites.count(r.train.synthetic_from)) {
            fail("row references undefined site " + r.train.synthetic_from);
        }
        if (!seen.insert({r.train.label(), r.test_site}).second) {
            fail("duplicate row " + r.train.key() + " -> " + r.test_site);
        }
    }
    for (const auto& t : train_sources()) {
        if (!segmentation_seed.count(t.key())) fail("missing segmentation seed." + t.key());
        if (!t.synthetic_from.empty() && !synthesis_seed.count(t.key())) fail("missing synthesis seed." + t.key());
    }
    for (const auto& g : generator_sites()) {
        if (!diffusion_seed.count(g)) fail("missing diffusion seed." + g);
    }
}

namespace detail {

// Collects one section's keys and reports unknown or missing ones.
class Section {
public:
    Section(std::string name, std::vector<text::Entry> entries) : name_(std::move(name)), entries_(std::move(entries)) {
        for (const auto& e : entries_) {
            if (e.key != "row" && e.key != "supplementary" && !values_.emplace(e.key, e).second) {
                throw text::ParseError("duplicate key \"" + e.key + "\" in [" + name_ + "]", e.line);
            }
        }
    }

    const text::Entry& entry(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end()) throw Error("plan: [" + name_ + "] is missing \"" + key + "\"");
        used_.insert(key);
        return it->second;
    }

    std::string str(const std::string& key) { return entry(key).value; }

    template <class T>
    T num(const std::string& key) {
        const auto& e = entry(key);
        try {
            return text::parse_number<T>(e.value, key);
        } catch (const Error& ex) {
            throw text::ParseError(ex.what(), e.line);
        }
    }

    // Keys of the form "<prefix>.<suffix>" as suffix -> value.
    std::map<std::string, std::uint64_t> seeds(const std::string& prefix) {
        std::map<std::string, std::uint64_t> out;
        for (const auto& [k, e] : values_) {
            if (k.rfind(prefix + ".", 0) != 0) continue;
            out[k.substr(prefix.size() + 1)] = num<std::uint64_t>(k);
        }
        return out;
    }

    const std::vector<text::Entry>& entries() const { return entries_; }

    void finish() const {
        for (const auto& [k, e] : values_) {
            if (!used_.count(k)) throw text::ParseError("unknown key \"" + k + "\" in [" + name_ + "]", e.line);
        }
    }

private:
    std::string name_;
    std::vector<text::Entry> entries_;
    std::map<std::string, text::Entry> values_;
    std::set<std::string> used_;
};

inline RowSpec parse_row(const text::Entry& e) {
    const auto arrow = e.value.find("->");
    if (arrow == std::string::npos) throw text::ParseError("row must look like \"A+syn.B -> B\"", e.line);
    RowSpec r;
    try {
        r.train = parse_train_source(std::string(text::trim(std::string_view(e.value).substr(0, arrow))));
    } catch (const Error& ex) {
        throw text::ParseError(ex.what(), e.line);
    }
    r.test_site = std::string(text::trim(std::string_view(e.value).substr(arrow + 2)));
    r.supplementary = e.key == "supplementary";
    return r;
}

} // namespace detail

inline ExperimentPlan parse_plan(std::string_view textv) {
    std::map<std::string, std::vector<text::Entry>> by_section;
    std::vector<std::string> order;
    for (auto& e : text::parse_lines(textv, true)) {
        if (e.section.empty()) throw text::ParseError("entry outside any section", e.line);
        if (!by_section.count(e.section)) order.push_back(e.section);
        by_section[e.section].push_back(std::move(e));
    }
    auto take = [&](const std::string& name) {
        auto it = by_section.find(name);
        if (it == by_section.end()) throw Error("plan: missing section [" + name + "]");
        detail::Section s(name, std::move(it->second));
        by_section.erase(it);
        return s;
    };

    ExperimentPlan p;
    {
        auto s = take("plan");
        p.name = s.str("name");
        p.out = s.str("out");
        p.registry = s.str("registry");
        p.bins = s.num<std::size_t>("bins");
        p.timestamp = s.num<std::uint64_t>("timestamp");
        p.image_size = s.num<std::size_t>("image_size");
        s.finish();
    }
    for (const auto& sec : order) {
        if (sec.rfind("site ", 0) != 0 || !by_section.count(sec)) continue;
        auto s = take(sec);
        SitePlan sp;
        sp.profile.site_id = sec.substr(5);
        sp.profile.myo_mean = s.num<double>("myo_mean");
        sp.profile.blood_mean = s.num<double>("blood_mean");
        sp.profile.background_mean = s.num<double>("background_mean");
        sp.profile.noise_sigma = s.num<double>("noise_sigma");
        sp.profile.bias_field_strength = s.num<double>("bias_field_strength");
        sp.profile.ring_outer_radius_range = {s.num<double>("outer_radius_min"), s.num<double>("outer_radius_max")};
        sp.profile.ring_thickness_range = {s.num<double>("thickness_min"), s.num<double>("thickness_max")};
        sp.patients = s.num<std::size_t>("patients");
        sp.slices = s.num<std::size_t>("slices");
        sp.data_seed = s.num<std::uint64_t>("data_seed");
        sp.split_seed = s.num<std::uint64_t>("split_seed");
        sp.ratios = {s.num<double>("train_ratio"), s.num<double>("val_ratio"), s.num<double>("test_ratio")};
        s.finish();
        p.sites[sp.profile.site_id] = sp;
    }
    {
        auto s = take("diffusion");
        p.diffusion.epochs = s.num<std::size_t>("epochs");
        p.diffusion.batch_size = s.num<std::size_t>("batch_size");
        p.diffusion.lr = s.num<double>("lr");
        p.diffusion.T = s.num<int>("T");
        p.diffusion.beta_min = s.num<double>("beta_min");
        p.diffusion.beta_max = s.num<double>("beta_max");
        p.diffusion_seed = s.seeds("seed");
        s.finish();
    }
    {
        auto s = take("synthesis");
        p.synthesis_batch = s.num<std::size_t>("batch_size");
        p.synthesis_seed = s.seeds("seed");
        s.finish();
    }
    {
        auto s = take("segmentation");
        p.segmentation.epochs = s.num<std::size_t>("epochs");
        p.segmentation.batch_size = s.num<std::size_t>("batch_size");
        p.segmentation.lr = s.num<double>("lr");
        p.segmentation.patience = s.num<std::size_t>("patience");
        p.segmentation.threshold = s.num<double>("threshold");
        p.segmentation_seed = s.seeds("seed");
        s.finish();
    }
    {
        auto s = take("rows");
        for (const auto& e : s.entries()) {
            if (e.key != "row" && e.key != "supplementary") {
                throw text::ParseError("only \"row\" and \"supplementary\" entries belong in [rows]", e.line);
            }
            p.rows.push_back(detail::parse_row(e));
        }
    }
    if (!by_section.empty()) throw Error("plan: unknown section [" + by_section.begin()->first + "]");
    p.validate();
    return p;
}

inline ExperimentPlan load_plan(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open plan " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_plan(ss.str());
    } catch (const text::ParseError& e) {
        throw text::ParseError(path.string() + ": " + e.what(), e.line());
    }
}

// Inverse of parse_plan.
inline std::string format_plan(const ExperimentPlan& p) {
    std::ostringstream o;
    auto d = [](double v) { return text::format_double(v); };
    o << "[plan]\nname = " << p.name << "\nout = " << p.out.string() << "\nregistry = " << p.registry
      << "\nbins = " << p.bins << "\ntimestamp = " << p.timestamp << "\nimage_size = " << p.image_size << "\n";
    for (const auto& [id, s] : p.sites) {
        const auto& f = s.profile;
        o << "\n[site " << id << "]\nmyo_mean = " << d(f.myo_mean) << "\nblood_mean = " << d(f.blood_mean)
          << "\nbackground_mean = " << d(f.background_mean) << "\nnoise_sigma = " << d(f.noise_sigma)
          << "\nbias_field_strength = " << d(f.bias_field_strength)
          << "\nouter_radius_min = " << d(f.ring_outer_radius_range[0])
          << "\nouter_radius_max = " << d(f.ring_outer_radius_range[1])
          << "\nthickness_min = " << d(f.ring_thickness_range[0]) << "\nthickness_max = " << d(f.ring_thickness_range[1])
          << "\npatients = " << s.patients << "\nslices = " << s.slices << "\ndata_seed = " << s.data_seed
          << "\nsplit_seed = " << s.split_seed << "\ntrain_ratio = " << d(s.ratios.train)
          << "\nval_ratio = " << d(s.ratios.val) << "\ntest_ratio = " << d(s.ratios.test) << "\n";
    }
    o << "\n[diffusion]\nepochs = " << p.diffusion.epochs << "\nbatch_size = " << p.diffusion.batch_size
      << "\nlr = " << d(p.diffusion.lr) << "\nT = " << p.diffusion.T << "\nbeta_min = " << d(p.diffusion.beta_min)
      << "\nbeta_max = " << d(p.diffusion.beta_max) << "\n";
    for (const auto& [k, v] : p.diffusion_seed) o << "seed." << k << " = " << v << "\n";
    o << "\n[synthesis]\nbatch_size = " << p.synthesis_batch << "\n";
    for (const auto& [k, v] : p.synthesis_seed) o << "seed." << k << " = " << v << "\n";
    o << "\n[segmentation]\nepochs = " << p.segmentation.epochs << "\nbatch_size = " << p.segmentation.batch_size
      << "\nlr = " << d(p.segmentation.lr) << "\npatience = " << p.segmentation.patience
      << "\nthreshold = " << d(p.segmentation.threshold) << "\n";
    for (const auto& [k, v] : p.segmentation_seed) o << "seed." << k << " = " << v << "\n";
    o << "\n[rows]\n";
    for (const auto& r : p.rows) o << (r.supplementary ? "supplementary" : "row") << " = " << r.train.key() << " -> " << r.test_site << "\n";
    return o.str();
}

} // namespace fdm::experiments
