#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <variant>

#include "fdm/data/dataset_io.hpp"
#include "fdm/diffusion/ddpm.hpp"
#include "fdm/experiments/plan.hpp"
#include "fdm/experiments/report.hpp"
#include "fdm/federation/audit.hpp"
#include "fdm/federation/registry.hpp"
#include "fdm/nn/training.hpp"
#include "fdm/seg/segmentation.hpp"

namespace fdm::experiments {

// A stage of the full run failed; the partial logs stay on disk.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage " + stage + " failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

class AuditFailure : public Error {
public:
    AuditFailure(const std::string& artifact, federation::AuditReport rep)
        : Error("privacy audit failed for " + artifact + "\n" + federation::format_report(rep)), report_(std::move(rep)) {}
    const federation::AuditReport& report() const { return report_; }

private:
    federation::AuditReport report_;
};

// The only way anything crosses between sites.
class ExchangeChannel {
public:
    explicit ExchangeChannel(federation::FileDrop d) : impl_(std::move(d)) {}
    explicit ExchangeChannel(federation::RegistryChannel r) : impl_(std::move(r)) {}

    void push(const std::string& name, const federation::ArtifactBytes& art) const {
        std::visit([&](const auto& c) { c.push(name, art); }, impl_);
    }
    federation::ArtifactBytes pull(const std::string& name) const {
        return std::visit([&](const auto& c) { return c.pull(name); }, impl_);
    }
    std::string describe() const {
        if (auto* r = std::get_if<federation::RegistryChannel>(&impl_)) return "registry at " + r->address();
        return "file drop in " + std::get<federation::FileDrop>(impl_).dir().string();
    }

private:
    std::variant<federation::FileDrop, federation::RegistryChannel> impl_;
};

// Appends to logs/pipeline.log and forwards to an optional sink (stderr in the CLI).
class RunLog {
public:
    RunLog(const fs::path& file, std::function<void(const std::string&)> sink)
        : out_(file, std::ios::app), sink_(std::move(sink)), start_(std::chrono::steady_clock::now()) {
        if (!out_) throw Error("cannot open log " + file.string());
    }

    void operator()(const std::string& msg) {
        std::lock_guard lk(mu_);
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        char stamp[32];
        std::snprintf(stamp, sizeof stamp, "[%8.1fs] ", t);
        out_ << stamp << msg << "\n";
        out_.flush();
        if (sink_) sink_(stamp + msg);
    }

private:
    std::mutex mu_;
    std::ofstream out_;
    std::function<void(const std::string&)> sink_;
    std::chrono::steady_clock::time_point start_;
};

inline std::string diffusion_artifact_name(const std::string& site) { return "diffusion-" + site; }
inline std::string seg_artifact_name(const TrainSource& t) { return "seg-" + t.key(); }
inline std::string real_name(const std::string& site) { return "real " + site; }
inline std::string synthetic_name(const std::string& generator) { return "syn." + generator; }

// Everything one hospital holds. Its samples never leave this object except
// through files under its own dataset directories.
class SiteContext {
public:
    SiteContext(const ExperimentPlan& plan, const std::string& id, const fs::path& out, RunLog& log)
        : plan_(plan), site_(plan.sites.at(id)), id_(id), out_(out), log_(log) {}

    const std::string& id() const { return id_; }

    void prepare_data() {
        auto ds = data::generate_site_dataset(site_.profile, site_.patients, site_.slices, site_.data_seed, plan_.image_size);
        data_ = data::split_dataset(std::move(ds), site_.ratios, site_.split_seed);
        data::save_dataset(data_, out_ / "datasets" / id_);
        log_("site " + id_ + ": " + std::to_string(data_.samples.size()) + " samples, train/val/test patients " +
             split_counts());
    }

    federation::ArtifactBytes train_diffusion() {
        auto cfg = plan_.diffusion;
        cfg.seed = plan_.diffusion_seed.at(id_);
        cfg.progress = [&](const std::string& m) { log_("site " + id_ + " " + m); };
        const auto spec = diffusion::eps_net_spec();
        auto [params, tlog] = diffusion::train_diffusion(data_.in_split(data::Split::train), cfg, spec);
        std::string tsv = "epoch\tloss\n";
        for (std::size_t e = 0; e < tlog.epoch_loss.size(); ++e) {
            tsv += std::to_string(e + 1) + "\t" + text::format_double(tlog.epoch_loss[e]) + "\n";
        }
        data::write_text(out_ / "logs" / (diffusion_artifact_name(id_) + ".tsv"), tsv);
        const std::string name = diffusion_artifact_name(id_);
        return publishable(name, federation::export_artifact(
                                     params, federation::diffusion_metadata(name, id_, cfg, spec, plan_.timestamp)));
    }

    // Imports a remote generator, audits it against local data, and
    // synthesizes one image per local train mask.
    void receive_generator(const std::string& generator_site, const federation::ArtifactBytes& art) {
        const auto spec = diffusion::eps_net_spec();
        audit(diffusion_artifact_name(generator_site), art);
        auto imported = federation::import_artifact(art.bytes(), spec);
        const auto& m = imported.metadata;
        const auto sched = diffusion::build_schedule(*m.T, *m.beta_min, *m.beta_max);
        diffusion::SynthesisConfig cfg;
        cfg.seed = plan_.synthesis_seed.at(TrainSource{id_, generator_site}.key());
        cfg.batch_size = plan_.synthesis_batch;
        cfg.threads = nn::worker_threads();
        cfg.progress = [&](const std::string& msg) { log_("site " + id_ + " syn." + generator_site + " " + msg); };
        auto syn = diffusion::synthesize_dataset(spec, imported.params, generator_site.at(0), data_, sched, cfg);
        data::save_dataset(syn, out_ / "datasets" / (id_ + "+" + synthetic_name(generator_site)));
        log_("site " + id_ + ": synthesized " + std::to_string(syn.samples.size()) + " images with the generator from " +
             generator_site);
        synthetic_[generator_site] = std::move(syn);
    }

    federation::ArtifactBytes train_segmentation(const TrainSource& source) {
        if (source.site != id_) throw Error("site " + id_ + " cannot train " + source.key());
        auto train = data_.in_split(data::Split::train);
        if (!source.synthetic_from.empty()) {
            const auto& syn = synthetic_.at(source.synthetic_from).samples;
            train.insert(train.end(), syn.begin(), syn.end());
        }
        auto cfg = plan_.segmentation;
        cfg.seed = plan_.segmentation_seed.at(source.key());
        cfg.progress = [&](const std::string& m) { log_("site " + id_ + " [" + source.key() + "] " + m); };
        const auto spec = seg::seg_net_spec();
        auto [params, tlog] = seg::train_segmentation(train, data_.in_split(data::Split::val), cfg, spec);
        std::string tsv = "epoch\tloss\tval_dice\n";
        for (std::size_t e = 0; e < tlog.epoch_loss.size(); ++e) {
            tsv += std::to_string(e + 1) + "\t" + text::format_double(tlog.epoch_loss[e]) + "\t" +
                   text::format_double(tlog.val_dice[e]) + "\n";
        }
        tsv += "# best epoch " + std::to_string(tlog.best_epoch) + " val dice " + text::format_double(tlog.best_val_dice) + "\n";
        const std::string name = seg_artifact_name(source);
        data::write_text(out_ / "logs" / (name + ".tsv"), tsv);
        log_("site " + id_ + " [" + source.key() + "] trained on " + std::to_string(train.size()) + " slices, best epoch " +
             std::to_string(tlog.best_epoch));
        return publishable(name, federation::export_artifact(
                                     params, federation::segmentation_metadata(name, id_, cfg, spec, plan_.timestamp)));
    }

    // Scores a (possibly remote) segmentation model on this site's test split.
    seg::MetricRow evaluate(const std::string& name, const federation::ArtifactBytes& art, const std::string& label) {
        const auto spec = seg::seg_net_spec();
        audit(name, art);
        auto imported = federation::import_artifact(art.bytes(), spec);
        return seg::evaluate(spec, imported.params, data_, data::Split::test, plan_.segmentation.threshold, label);
    }

private:
    federation::ArtifactBytes publishable(const std::string& name, Bytes bytes) {
        federation::ArtifactBytes art(std::move(bytes));
        audit(name, art);
        return art;
    }

    void audit(const std::string& name, const federation::ArtifactBytes& art) {
        auto rep = federation::privacy_audit(art.bytes(), data_.samples);
        data::write_text(out_ / "logs" / ("audit-" + name + "-at-" + id_ + ".txt"), federation::format_report(rep));
        if (!rep.pass()) throw AuditFailure(name, rep);
    }

    std::string split_counts() const {
        std::size_t c[3] = {0, 0, 0};
        for (const auto& [p, s] : data_.splits) {
            if (s != data::Split::none) ++c[static_cast<int>(s) - 1];
        }
        return std::to_string(c[0]) + "/" + std::to_string(c[1]) + "/" + std::to_string(c[2]);
    }

    const ExperimentPlan& plan_;
    const SitePlan& site_;
    std::string id_;
    fs::path out_;
    RunLog& log_;
    data::SiteDataset data_;
    std::map<std::string, data::SiteDataset> synthetic_;
};

struct RunOptions {
    std::optional<fs::path> out;         // overrides the plan's output directory
    std::optional<std::string> registry; // overrides the plan's registry address
    std::function<void(const std::string&)> progress;
};

struct RunResult {
    fs::path out;
    ResultTable table;
    ResultTable supplementary;
    HistogramReport histograms;
    std::map<std::string, std::uint32_t> artifact_checksums;
};

inline void run_stage(const std::string& stage, RunLog& log, const std::function<void()>& body) {
    log("stage " + stage + ": start");
    try {
        body();
    } catch (const AuditFailure& e) {
        log("stage " + stage + ": " + e.what());
        throw;
    } catch (const std::exception& e) {
        log("stage " + stage + ": FAILED: " + e.what());
        throw StageError(stage, e.what());
    }
    log("stage " + stage + ": done");
}

inline RunResult run_full_matrix(const ExperimentPlan& plan, const RunOptions& opt = {}) {
    plan.validate();
    RunResult res;
    res.out = opt.out.value_or(plan.out);
    for (const char* d : {"datasets", "artifacts", "reports", "logs"}) fs::create_directories(res.out / d);
    data::write_text(res.out / "plan.txt", format_plan(plan));
    RunLog log(res.out / "logs" / "pipeline.log", opt.progress);
    const std::string registry = opt.registry.value_or(plan.registry);
    const ExchangeChannel channel = registry.empty()
                                        ? ExchangeChannel(federation::FileDrop(res.out / "artifacts"))
                                        : ExchangeChannel(federation::RegistryChannel(registry));
    log("plan " + plan.name + ", exchange via " + channel.describe());

    std::map<std::string, std::unique_ptr<SiteContext>> sites;
    for (const auto& [id, sp] : plan.sites) sites[id] = std::make_unique<SiteContext>(plan, id, res.out, log);

    auto exchange = [&](const std::string& name, const federation::ArtifactBytes& art) {
        channel.push(name, art);
        res.artifact_checksums[name] = art.checksum();
        if (!registry.empty()) data::write_file(res.out / "artifacts" / (name + federation::kArtifactExtension), art.bytes());
        log("published " + name + " (" + std::to_string(art.size()) + " bytes, crc " + hex64(art.checksum()).substr(8) + ")");
    };

    run_stage("data", log, [&] {
        for (auto& [id, s] : sites) s->prepare_data();
    });
    run_stage("diffusion", log, [&] {
        for (const auto& g : plan.generator_sites()) exchange(diffusion_artifact_name(g), sites.at(g)->train_diffusion());
    });
    run_stage("synthesis", log, [&] {
        for (const auto& t : plan.train_sources()) {
            if (t.synthetic_from.empty()) continue;
            sites.at(t.site)->receive_generator(t.synthetic_from, channel.pull(diffusion_artifact_name(t.synthetic_from)));
        }
    });
    run_stage("segmentation", log, [&] {
        for (const auto& t : plan.train_sources()) exchange(seg_artifact_name(t), sites.at(t.site)->train_segmentation(t));
    });
    run_stage("evaluation", log, [&] {
        for (const auto& r : plan.rows) {
            const std::string name = seg_artifact_name(r.train);
            auto row = sites.at(r.test_site)->evaluate(name, channel.pull(name), r.train.label());
            log(row.train_source + " -> " + row.test_source + ": dice " + text::format_double(row.dice));
            (r.supplementary ? res.supplementary : res.table).rows.push_back(std::move(row));
        }
    });
    run_stage("histograms", log, [&] {
        std::vector<std::pair<std::string, data::SiteDataset>> owned;
        for (const auto& [id, sp] : plan.sites) owned.emplace_back(real_name(id), data::load_dataset(res.out / "datasets" / id));
        std::map<std::string, int> uses;
        for (const auto& t : plan.train_sources()) {
            if (!t.synthetic_from.empty()) ++uses[t.synthetic_from];
        }
        for (const auto& t : plan.train_sources()) {
            if (t.synthetic_from.empty()) continue;
            const std::string n = synthetic_name(t.synthetic_from);
            owned.emplace_back(uses[t.synthetic_from] > 1 ? n + " on " + t.site : n,
                               data::load_dataset(res.out / "datasets" / (t.site + "+" + synthetic_name(t.synthetic_from))));
        }
        std::vector<std::pair<std::string, const std::vector<data::Sample>*>> sets;
        for (const auto& [n, ds] : owned) sets.emplace_back(n, &ds.samples);
        res.histograms = compute_histograms(sets, plan.bins);
    });
    run_stage("reports", log, [&] {
        const fs::path dir = res.out / "reports";
        if (!res.table.rows.empty()) {
            emit_report(res.table, &res.histograms, ReportFormat::markdown, dir, "results");
            emit_report(res.table, &res.histograms, ReportFormat::tsv, dir, "results");
        }
        if (!res.supplementary.rows.empty()) {
            emit_report(res.supplementary, nullptr, ReportFormat::markdown, dir, "supplementary");
            emit_report(res.supplementary, nullptr, ReportFormat::tsv, dir, "supplementary");
        }
        std::string sums;
        for (const auto& [n, c] : res.artifact_checksums) sums += n + "\t" + hex64(c).substr(8) + "\n";
        data::write_text(dir / "artifact_checksums.tsv", sums);
    });
    return res;
}

} // namespace fdm::experiments
