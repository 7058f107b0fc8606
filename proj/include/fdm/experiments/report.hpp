#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fdm/data/dataset_io.hpp"
#include "fdm/data/phantom.hpp"
#include "fdm/seg/segmentation.hpp"
#include "fdm/text/kv.hpp"

namespace fdm::experiments {

namespace fs = std::filesystem;

enum class Region { whole, myocardium };

inline const char* region_name(Region r) { return r == Region::whole ? "whole" : "myocardium"; }

struct HistogramReport {
    std::size_t bins = 64;
    std::vector<std::string> names;
    std::map<std::pair<std::string, Region>, std::vector<double>> histograms;
    std::map<Region, std::vector<std::vector<double>>> l1; // indexed like `names`

    const std::vector<double>& at(const std::string& name, Region r) const { return histograms.at({name, r}); }

    double distance(const std::string& a, const std::string& b, Region r) const {
        const auto ia = index_of(a), ib = index_of(b);
        return l1.at(r)[ia][ib];
    }

    std::size_t index_of(const std::string& n) const {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == n) return i;
        }
        throw NotFoundError("no histogram named \"" + n + "\"");
    }
};

inline std::size_t histogram_bin(float v, std::size_t bins) {
    const double x = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return std::min(bins - 1, static_cast<std::size_t>(x * static_cast<double>(bins)));
}

// Pooled, normalized pixel histograms over [0,1] for each named dataset, for
// the whole image and for pixels under the paired mask.
inline HistogramReport compute_histograms(const std::vector<std::pair<std::string, const std::vector<data::Sample>*>>& sets,
                                          std::size_t bins = 64) {
    if (bins == 0) throw Error("compute_histograms: bins must be positive");
    HistogramReport rep;
    rep.bins = bins;
    for (const auto& [name, samples] : sets) {
        if (samples->empty()) throw Error("compute_histograms: dataset \"" + name + "\" is empty");
        for (Region r : {Region::whole, Region::myocardium}) {
            std::vector<double> h(bins, 0.0);
            std::size_t n = 0;
            for (const auto& s : *samples) {
                for (std::size_t i = 0; i < s.pixels(); ++i) {
                    if (r == Region::myocardium && !s.mask[i]) continue;
                    h[histogram_bin(s.image[i], bins)] += 1.0;
                    ++n;
                }
            }
            if (n == 0) {
                throw Error("compute_histograms: dataset \"" + name + "\" has an empty " + region_name(r) + " region");
            }
            for (auto& v : h) v /= static_cast<double>(n);
            rep.histograms[{name, r}] = std::move(h);
        }
        rep.names.push_back(name);
    }
    for (Region r : {Region::whole, Region::myocardium}) {
        auto& m = rep.l1[r];
        m.assign(rep.names.size(), std::vector<double>(rep.names.size(), 0.0));
        for (std::size_t i = 0; i < rep.names.size(); ++i) {
            for (std::size_t j = i + 1; j < rep.names.size(); ++j) {
                const auto& a = rep.at(rep.names[i], r);
                const auto& b = rep.at(rep.names[j], r);
                double d = 0;
                for (std::size_t k = 0; k < bins; ++k) d += std::abs(a[k] - b[k]);
                m[i][j] = m[j][i] = d;
            }
        }
    }
    return rep;
}

struct ResultTable {
    std::vector<seg::MetricRow> rows;
};

inline std::string format_dice(double d) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.3f", d);
    return buf;
}

inline std::string markdown_table(const ResultTable& t) {
    if (t.rows.empty()) throw Error("report: result table is empty");
    std::string out = "| Train Data Source | Test Data Source | DICE |\n|---|---|---|\n";
    for (const auto& r : t.rows) out += "| " + r.train_source + " | " + r.test_source + " | " + format_dice(r.dice) + " |\n";
    return out;
}

inline std::string results_tsv(const ResultTable& t) {
    if (t.rows.empty()) throw Error("report: result table is empty");
    std::string out = "train_source\ttest_source\tdice\tslices\n";
    for (const auto& r : t.rows) {
        out += r.train_source + "\t" + r.test_source + "\t" + text::format_double(r.dice) + "\t" +
               std::to_string(r.per_slice.size()) + "\n";
    }
    return out;
}

inline std::string per_slice_tsv(const ResultTable& t) {
    std::string out = "train_source\ttest_source\tslice\tdice\n";
    for (const auto& r : t.rows) {
        for (std::size_t i = 0; i < r.per_slice.size(); ++i) {
            out += r.train_source + "\t" + r.test_source + "\t" + std::to_string(i) + "\t" +
                   text::format_double(r.per_slice[i]) + "\n";
        }
    }
    return out;
}

// Rows of a results TSV; per-slice detail is not carried.
inline ResultTable parse_results_tsv(const std::string& tsv) {
    ResultTable t;
    std::istringstream in(tsv);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        if (++lineno == 1 || line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
            f.push_back(line.substr(start, tab - start));
        }
        f.push_back(line.substr(start));
        if (f.size() != 4) throw text::ParseError("expected 4 tab-separated fields", lineno);
        t.rows.push_back({f[0], f[1], text::parse_number<double>(f[2], "dice"), {}});
    }
    return t;
}

inline std::string histograms_tsv(const HistogramReport& h) {
    std::string out = "dataset\tregion\tbin\tlo\thi\tdensity\n";
    for (const auto& name : h.names) {
        for (Region r : {Region::whole, Region::myocardium}) {
            const auto& v = h.at(name, r);
            for (std::size_t k = 0; k < h.bins; ++k) {
                out += name + "\t" + region_name(r) + "\t" + std::to_string(k) + "\t" +
                       text::format_double(static_cast<double>(k) / static_cast<double>(h.bins)) + "\t" +
                       text::format_double(static_cast<double>(k + 1) / static_cast<double>(h.bins)) + "\t" +
                       text::format_double(v[k]) + "\n";
            }
        }
    }
    return out;
}

inline std::string distances_tsv(const HistogramReport& h) {
    std::string out = "region\ta\tb\tl1\n";
    for (Region r : {Region::whole, Region::myocardium}) {
        for (std::size_t i = 0; i < h.names.size(); ++i) {
            for (std::size_t j = 0; j < h.names.size(); ++j) {
                out += std::string(region_name(r)) + "\t" + h.names[i] + "\t" + h.names[j] + "\t" +
                       text::format_double(h.l1.at(r)[i][j]) + "\n";
            }
        }
    }
    return out;
}

inline std::string distances_markdown(const HistogramReport& h, Region r) {
    std::string out = std::string("| L1 (") + region_name(r) + ") |";
    for (const auto& n : h.names) out += " " + n + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < h.names.size(); ++i) out += "---|";
    out += "\n";
    for (std::size_t i = 0; i < h.names.size(); ++i) {
        out += "| " + h.names[i] + " |";
        for (std::size_t j = 0; j < h.names.size(); ++j) out += " " + format_dice(h.l1.at(r)[i][j]) + " |";
        out += "\n";
    }
    return out;
}

enum class ReportFormat { tsv, markdown };

inline ReportFormat parse_format(const std::string& s) {
    if (s == "tsv") return ReportFormat::tsv;
    if (s == "markdown") return ReportFormat::markdown;
    throw Error("unknown report format \"" + s + "\" (tsv, markdown)");
}

// Writes the table and, when given, the histogram report into `dir`.
// Returns the paths written.
inline std::vector<fs::path> emit_report(const ResultTable& table, const HistogramReport* hist, ReportFormat format,
                                         const fs::path& dir, const std::string& stem = "results") {
    if (table.rows.empty()) throw Error("report: result table is empty");
    fs::create_directories(dir);
    std::vector<fs::path> written;
    auto put = [&](const std::string& name, const std::string& body) {
        data::write_text(dir / name, body);
        written.push_back(dir / name);
    };
    if (format == ReportFormat::markdown) {
        put(stem + ".md", markdown_table(table));
        if (hist) {
            put("histograms.md", distances_markdown(*hist, Region::whole) + "\n" + distances_markdown(*hist, Region::myocardium));
        }
    } else {
        put(stem + ".tsv", results_tsv(table));
        put(stem + "_per_slice.tsv", per_slice_tsv(table));
        if (hist) {
            put("histograms.tsv", histograms_tsv(*hist));
            put("histogram_l1.tsv", distances_tsv(*hist));
        }
    }
    return written;
}

} // namespace fdm::experiments
