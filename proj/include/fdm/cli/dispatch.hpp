#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>

#include "fdm/data/dataset_io.hpp"
#include "fdm/diffusion/ddpm.hpp"
#include "fdm/experiments/pipeline.hpp"
#include "fdm/federation/audit.hpp"
#include "fdm/federation/registry.hpp"
#include "fdm/seg/segmentation.hpp"

// Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 audit or
// verification failure.
namespace fdm::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitVerification = 3;

class UsageError : public Error {
public:
    using Error::Error;
};

class VerificationFailure : public Error {
public:
    using Error::Error;
};

namespace detail {

inline data::SiteDataset load(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw UsageError("dataset directory " + dir.string() + " does not exist");
    return data::load_dataset(dir);
}

inline std::vector<data::Sample> require_split(const data::SiteDataset& ds, data::Split s, const fs::path& dir) {
    auto out = ds.in_split(s);
    if (out.empty()) {
        throw UsageError("dataset " + dir.string() + " has no " + data::split_name(s) + " split; run `fdm split` first");
    }
    return out;
}

inline federation::ArtifactBytes read_artifact(const fs::path& p) {
    if (!fs::exists(p)) throw UsageError("artifact " + p.string() + " does not exist");
    return federation::ArtifactBytes(data::read_file(p));
}

inline void audit_or_fail(const federation::ArtifactBytes& art, const data::SiteDataset& ds, std::ostream& err) {
    auto rep = federation::privacy_audit(art.bytes(), ds.samples);
    if (!rep.pass()) {
        err << federation::format_report(rep);
        throw VerificationFailure("privacy audit failed");
    }
}

// Grayscale grid of images, `cols` per row.
inline std::string pgm_grid(const std::vector<std::vector<float>>& imgs, std::size_t H, std::size_t W, std::size_t cols) {
    const std::size_t rows = (imgs.size() + cols - 1) / cols;
    std::string out = "P5\n" + std::to_string(cols * W) + " " + std::to_string(rows * H) + "\n255\n";
    std::string px(rows * H * cols * W, '\0');
    for (std::size_t k = 0; k < imgs.size(); ++k) {
        const std::size_t r0 = (k / cols) * H, c0 = (k % cols) * W;
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                const double v = std::clamp(static_cast<double>(imgs[k][y * W + x]), 0.0, 1.0);
                px[(r0 + y) * cols * W + c0 + x] = static_cast<char>(std::lround(v * 255.0));
            }
        }
    }
    return out + px;
}

inline std::uint64_t now_seconds() {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count());
}

} // namespace detail

// Parses and runs one command line. Results go to `out`, progress and
// diagnostics to `err`.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Federated data model: phantom sites, diffusion generators, artifact exchange, segmentation", "fdm"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    auto progress = [&err](const std::string& m) { err << m << "\n" << std::flush; };
    std::function<int()> action;

    // gen-data
    std::string site;
    fs::path out_path, dataset, artifact, plan_path, weights, store;
    std::uint64_t seed = 0;
    std::size_t patients = 0, slices = 0;
    {
        auto* c = app.add_subcommand("gen-data", "Render a phantom dataset for one site (unsplit)");
        c->add_option("--site", site, "Site id (A or B, or any site in --plan)")->required();
        c->add_option("--out", out_path, "Output dataset directory")->required();
        c->add_option("--seed", seed, "Generation seed")->required();
        c->add_option("--patients", patients, "Patient count (default: 40 for A, 50 for B, or the plan's)");
        c->add_option("--slices", slices, "Slices per patient (default: 4 for A, 6 for B, or the plan's)");
        c->add_option("--plan", plan_path, "Take the site profile and counts from this plan")->check(CLI::ExistingFile);
        c->callback([&] {
            action = [&] {
                data::SiteProfile prof;
                std::size_t np = 0, ns = 0, size = 32;
                if (!plan_path.empty()) {
                    auto plan = experiments::load_plan(plan_path);
                    auto it = plan.sites.find(site);
                    if (it == plan.sites.end()) throw UsageError("plan has no site " + site);
                    prof = it->second.profile;
                    np = it->second.patients;
                    ns = it->second.slices;
                    size = plan.image_size;
                } else if (site == "A" || site == "B") {
                    auto [a, b] = data::default_profiles();
                    prof = site == "A" ? a : b;
                    np = site == "A" ? 40 : 50;
                    ns = site == "A" ? 4 : 6;
                } else {
                    throw UsageError("site " + site + " has no default profile; pass --plan");
                }
                if (patients) np = patients;
                if (slices) ns = slices;
                auto ds = data::generate_site_dataset(prof, np, ns, seed, size);
                data::save_dataset(ds, out_path);
                err << "wrote " << ds.samples.size() << " samples for site " << site << " to " << out_path.string() << "\n";
                return kExitOk;
            };
        });
    }

    // split
    double r_train = 0.6, r_val = 0.2, r_test = 0.2;
    {
        auto* c = app.add_subcommand("split", "Assign patients to train/val/test");
        c->add_option("--dataset", dataset, "Input dataset directory")->required();
        c->add_option("--out", out_path, "Output dataset directory (may equal --dataset)")->required();
        c->add_option("--seed", seed, "Shuffle seed")->required();
        c->add_option("--train", r_train, "Train ratio")->capture_default_str();
        c->add_option("--val", r_val, "Validation ratio")->capture_default_str();
        c->add_option("--test", r_test, "Test ratio")->capture_default_str();
        c->callback([&] {
            action = [&] {
                auto ds = data::split_dataset(detail::load(dataset), {r_train, r_val, r_test}, seed);
                data::save_dataset(ds, out_path);
                std::size_t n[4] = {0, 0, 0, 0};
                for (const auto& [p, s] : ds.splits) ++n[static_cast<int>(s)];
                err << "patients train/val/test: " << n[1] << "/" << n[2] << "/" << n[3] << "\n";
                return kExitOk;
            };
        });
    }

    // train-diffusion
    diffusion::DiffusionTrainConfig dcfg;
    std::size_t epochs = 0;
    std::optional<std::uint64_t> timestamp;
    std::string name;
    {
        auto* c = app.add_subcommand("train-diffusion", "Train the conditional diffusion model on a train split");
        c->add_option("--dataset", dataset, "Split dataset directory")->required();
        c->add_option("--out", out_path, "Output artifact (.fdma)")->required();
        c->add_option("--seed", seed, "Training seed")->required();
        c->add_option("--epochs", epochs, "Epochs")->required();
        c->add_option("--batch", dcfg.batch_size, "Batch size")->capture_default_str();
        c->add_option("--lr", dcfg.lr, "Adam learning rate")->capture_default_str();
        c->add_option("--T", dcfg.T, "Diffusion steps")->capture_default_str();
        c->add_option("--beta-min", dcfg.beta_min, "First beta")->capture_default_str();
        c->add_option("--beta-max", dcfg.beta_max, "Last beta")->capture_default_str();
        c->add_option("--name", name, "Artifact name (default diffusion-<site>)");
        c->add_option("--timestamp", timestamp, "Creation time recorded in metadata (default now)");
        c->callback([&] {
            action = [&] {
                auto ds = detail::load(dataset);
                auto train = detail::require_split(ds, data::Split::train, dataset);
                dcfg.seed = seed;
                dcfg.epochs = epochs;
                dcfg.progress = progress;
                const auto spec = diffusion::eps_net_spec();
                auto [params, log] = diffusion::train_diffusion(train, dcfg, spec);
                const std::string n = name.empty() ? "diffusion-" + ds.site_id : name;
                Bytes art = federation::export_artifact(
                    params, federation::diffusion_metadata(n, ds.site_id, dcfg, spec, timestamp.value_or(detail::now_seconds())));
                detail::audit_or_fail(federation::ArtifactBytes(art), ds, err);
                data::write_file(out_path, art);
                err << "final loss " << log.epoch_loss.back() << ", wrote " << out_path.string() << "\n";
                return kExitOk;
            };
        });
    }

    // sample
    std::size_t count = 8, steps = 0, batch = 16;
    {
        auto* c = app.add_subcommand("sample", "Draw images from a diffusion artifact for the first train masks");
        c->add_option("--artifact", artifact, "Diffusion artifact")->required();
        c->add_option("--dataset", dataset, "Dataset whose train masks condition the samples")->required();
        c->add_option("--out", out_path, "Output directory")->required();
        c->add_option("--seed", seed, "Sampling seed")->required();
        c->add_option("--count", count, "Number of masks to sample for")->capture_default_str();
        c->add_option("--steps", steps, "Also write a snapshot grid every this many reverse steps (0: none)")
            ->capture_default_str();
        c->callback([&] {
            action = [&] {
                auto art = detail::read_artifact(artifact);
                const auto spec = diffusion::eps_net_spec();
                auto imp = federation::import_artifact(art.bytes(), spec);
                if (imp.metadata.kind != federation::ArtifactKind::diffusion) throw UsageError("not a diffusion artifact");
                auto ds = detail::load(dataset);
                auto masks = detail::require_split(ds, data::Split::train, dataset);
                masks.resize(std::min(count, masks.size()));
                const auto sched = diffusion::build_schedule(*imp.metadata.T, *imp.metadata.beta_min, *imp.metadata.beta_max);
                std::vector<const std::vector<std::uint8_t>*> mp;
                std::vector<nn::RngStream> streams;
                for (const auto& m : masks) {
                    mp.push_back(&m.mask);
                    streams.push_back(diffusion::mask_stream(seed, m.patient_id, m.slice_index));
                }
                const std::size_t H = masks[0].height, W = masks[0].width;
                fs::create_directories(out_path);
                diffusion::StepObserver snap;
                if (steps > 0) {
                    snap = [&](int t, const std::vector<std::vector<double>>& xs) {
                        if (t % static_cast<int>(steps) != 0 && t != 0) return;
                        std::vector<std::vector<float>> imgs;
                        for (const auto& x : xs) imgs.push_back(diffusion::finalize_sample(x));
                        char fn[32];
                        std::snprintf(fn, sizeof fn, "step_%04d.pgm", t);
                        data::write_text(out_path / fn, detail::pgm_grid(imgs, H, W, 8));
                        err << "reverse step t=" << t << "\n";
                    };
                }
                auto xs = diffusion::ancestral_chain(diffusion::unet_evaluator(spec, imp.params), mp, H, W, sched, streams, snap);
                data::SiteDataset outds;
                outds.site_id = ds.site_id;
                std::vector<std::vector<float>> imgs, mask_imgs;
                for (std::size_t i = 0; i < masks.size(); ++i) {
                    data::Sample s = masks[i];
                    s.image = diffusion::finalize_sample(xs[i]);
                    s.provenance = {true, imp.metadata.origin_site.at(0)};
                    imgs.push_back(s.image);
                    mask_imgs.emplace_back(s.mask.begin(), s.mask.end());
                    outds.splits[s.patient_id] = data::Split::train;
                    outds.samples.push_back(std::move(s));
                }
                data::save_dataset(outds, out_path / "samples");
                data::write_text(out_path / "samples.pgm", detail::pgm_grid(imgs, H, W, 8));
                data::write_text(out_path / "masks.pgm", detail::pgm_grid(mask_imgs, H, W, 8));
                err << "wrote " << imgs.size() << " samples to " << out_path.string() << "\n";
                return kExitOk;
            };
        });
    }

    // synthesize
    {
        auto* c = app.add_subcommand("synthesize", "Audit a remote diffusion artifact, then synthesize one image per local train mask");
        c->add_option("--artifact", artifact, "Remote diffusion artifact")->required();
        c->add_option("--dataset", dataset, "Local split dataset")->required();
        c->add_option("--out", out_path, "Output dataset directory for the synthetic set")->required();
        c->add_option("--seed", seed, "Synthesis seed")->required();
        c->add_option("--batch", batch, "Masks per sampling batch")->capture_default_str();
        c->callback([&] {
            action = [&] {
                auto art = detail::read_artifact(artifact);
                auto ds = detail::load(dataset);
                detail::audit_or_fail(art, ds, err);
                const auto spec = diffusion::eps_net_spec();
                auto imp = federation::import_artifact(art.bytes(), spec);
                if (imp.metadata.kind != federation::ArtifactKind::diffusion) throw UsageError("not a diffusion artifact");
                const auto sched = diffusion::build_schedule(*imp.metadata.T, *imp.metadata.beta_min, *imp.metadata.beta_max);
                diffusion::SynthesisConfig cfg;
                cfg.seed = seed;
                cfg.batch_size = batch;
                cfg.threads = nn::worker_threads();
                cfg.progress = progress;
                auto syn = diffusion::synthesize_dataset(spec, imp.params, imp.metadata.origin_site.at(0), ds, sched, cfg);
                data::save_dataset(syn, out_path);
                err << "wrote " << syn.samples.size() << " synthetic samples to " << out_path.string() << "\n";
                return kExitOk;
            };
        });
    }

    // train-seg
    seg::SegTrainConfig scfg;
    std::vector<fs::path> extra;
    {
        auto* c = app.add_subcommand("train-seg", "Train the segmentation net on a train split plus optional synthetic sets");
        c->add_option("--dataset", dataset, "Split dataset directory (train and val splits)")->required();
        c->add_option("--extra", extra, "Additional training dataset (repeatable), e.g. a synthetic set");
        c->add_option("--out", out_path, "Output artifact (.fdma)")->required();
        c->add_option("--seed", seed, "Training seed")->required();
        c->add_option("--epochs", epochs, "Maximum epochs")->required();
        c->add_option("--batch", scfg.batch_size, "Batch size")->capture_default_str();
        c->add_option("--lr", scfg.lr, "Adam learning rate")->capture_default_str();
        c->add_option("--patience", scfg.patience, "Early-stop patience in epochs")->capture_default_str();
        c->add_option("--threshold", scfg.threshold, "Binarization threshold")->capture_default_str();
        c->add_option("--name", name, "Artifact name (default seg-<site>)");
        c->add_option("--timestamp", timestamp, "Creation time recorded in metadata (default now)");
        c->callback([&] {
            action = [&] {
                auto ds = detail::load(dataset);
                auto train = detail::require_split(ds, data::Split::train, dataset);
                auto val = detail::require_split(ds, data::Split::val, dataset);
                std::string n = name.empty() ? "seg-" + ds.site_id : name;
                for (const auto& e : extra) {
                    auto more = detail::load(e);
                    for (auto& s : more.samples) {
                        if (more.split_of(s.patient_id) == data::Split::train) train.push_back(std::move(s));
                    }
                }
                scfg.seed = seed;
                scfg.epochs = epochs;
                scfg.progress = progress;
                const auto spec = seg::seg_net_spec();
                auto [params, log] = seg::train_segmentation(train, val, scfg, spec);
                Bytes art = federation::export_artifact(
                    params, federation::segmentation_metadata(n, ds.site_id, scfg, spec, timestamp.value_or(detail::now_seconds())));
                detail::audit_or_fail(federation::ArtifactBytes(art), ds, err);
                data::write_file(out_path, art);
                err << "best epoch " << log.best_epoch << " val dice " << log.best_val_dice << ", wrote " << out_path.string()
                    << "\n";
                return kExitOk;
            };
        });
    }

    // evaluate
    std::string split_name = "test", label, format = "markdown";
    {
        auto* c = app.add_subcommand("evaluate", "Dice of a segmentation artifact on a real split");
        c->add_option("--artifact", artifact, "Segmentation artifact")->required();
        c->add_option("--dataset", dataset, "Split dataset directory")->required();
        c->add_option("--split", split_name, "Split to score (val or test)")->capture_default_str();
        c->add_option("--label", label, "Train source label (default Hospital <origin site>)");
        c->add_option("--format", format, "Output format")->check(CLI::IsMember({"tsv", "markdown"}))->capture_default_str();
        c->add_option("--out", out_path, "Also write report files to this directory");
        c->callback([&] {
            action = [&] {
                auto art = detail::read_artifact(artifact);
                auto ds = detail::load(dataset);
                detail::audit_or_fail(art, ds, err);
                const auto spec = seg::seg_net_spec();
                auto imp = federation::import_artifact(art.bytes(), spec);
                if (imp.metadata.kind != federation::ArtifactKind::segmentation) throw UsageError("not a segmentation artifact");
                const data::Split which = data::parse_split(split_name);
                if (which != data::Split::val && which != data::Split::test) throw UsageError("--split must be val or test");
                experiments::ResultTable t;
                t.rows.push_back(seg::evaluate(spec, imp.params, ds, which, scfg.threshold,
                                               label.empty() ? seg::hospital_label(imp.metadata.origin_site) : label));
                const auto fmt = experiments::parse_format(format);
                out << (fmt == experiments::ReportFormat::markdown ? experiments::markdown_table(t)
                                                                   : experiments::results_tsv(t));
                if (!out_path.empty()) experiments::emit_report(t, nullptr, fmt, out_path, "evaluation");
                return kExitOk;
            };
        });
    }

    // export
    std::string kind;
    std::string digest;
    {
        auto* c = app.add_subcommand("export", "Wrap a weight stream (.fdmw) into a model artifact");
        c->add_option("--weights", weights, "Weight stream file")->required();
        c->add_option("--kind", kind, "Artifact kind")->check(CLI::IsMember({"diffusion", "segmentation"}))->required();
        c->add_option("--name", name, "Artifact name")->required();
        c->add_option("--site", site, "Origin site id")->required();
        c->add_option("--digest", digest, "Training-config digest")->required();
        c->add_option("--out", out_path, "Output artifact (.fdma)")->required();
        c->add_option("--T", dcfg.T, "Diffusion steps (diffusion only)")->capture_default_str();
        c->add_option("--beta-min", dcfg.beta_min, "First beta (diffusion only)")->capture_default_str();
        c->add_option("--beta-max", dcfg.beta_max, "Last beta (diffusion only)")->capture_default_str();
        c->add_option("--timestamp", timestamp, "Creation time recorded in metadata (default now)");
        c->callback([&] {
            action = [&] {
                auto params = nn::decode_weights(data::read_file(weights));
                federation::ArtifactMetadata m;
                m.name = name;
                m.kind = federation::parse_kind(kind);
                m.origin_site = site;
                const auto spec = m.kind == federation::ArtifactKind::diffusion ? diffusion::eps_net_spec() : seg::seg_net_spec();
                m.arch_hash = spec.arch_hash();
                if (m.kind == federation::ArtifactKind::diffusion) {
                    m.T = dcfg.T;
                    m.beta_min = dcfg.beta_min;
                    m.beta_max = dcfg.beta_max;
                }
                m.train_config_digest = digest;
                m.created = timestamp.value_or(detail::now_seconds());
                Bytes art = federation::export_artifact(params, m);
                federation::import_artifact(art, spec);
                data::write_file(out_path, art);
                err << "wrote " << art.size() << " bytes to " << out_path.string() << "\n";
                return kExitOk;
            };
        });
    }

    // import
    {
        auto* c = app.add_subcommand("import", "Verify an artifact against the local architecture and extract its weights");
        c->add_option("--artifact", artifact, "Artifact file")->required();
        c->add_option("--kind", kind, "Expected kind")->check(CLI::IsMember({"diffusion", "segmentation"}))->required();
        c->add_option("--out", out_path, "Output weight stream (.fdmw)")->required();
        c->callback([&] {
            action = [&] {
                auto art = detail::read_artifact(artifact);
                const auto k = federation::parse_kind(kind);
                const auto spec = k == federation::ArtifactKind::diffusion ? diffusion::eps_net_spec() : seg::seg_net_spec();
                auto imp = federation::import_artifact(art.bytes(), spec);
                if (imp.metadata.kind != k) throw VerificationFailure("artifact is a " + std::string(federation::kind_name(imp.metadata.kind)) + " model");
                data::write_file(out_path, nn::encode_weights(imp.params));
                out << federation::metadata_text(imp.metadata);
                return kExitOk;
            };
        });
    }

    // audit
    {
        auto* c = app.add_subcommand("audit", "Privacy audit of an artifact against a local dataset");
        c->add_option("--artifact", artifact, "Artifact file")->required();
        c->add_option("--dataset", dataset, "Dataset whose raw images the payload must not contain")->required();
        c->callback([&] {
            action = [&] {
                Bytes bytes = data::read_file(artifact);
                auto rep = federation::privacy_audit(bytes, detail::load(dataset).samples);
                out << federation::format_report(rep);
                return rep.pass() ? kExitOk : kExitVerification;
            };
        });
    }

    // serve
    std::string addr = "127.0.0.1:7878";
    {
        auto* c = app.add_subcommand("serve", "Run the artifact registry until interrupted");
        c->add_option("--addr", addr, "Listen address host:port (port 0 picks one)")->capture_default_str();
        c->add_option("--store", store, "Store directory")->required();
        c->callback([&] {
            action = [&] {
                sigset_t set;
                sigemptyset(&set);
                sigaddset(&set, SIGINT);
                sigaddset(&set, SIGTERM);
                sigset_t previous;
                pthread_sigmask(SIG_BLOCK, &set, &previous);
                struct Restore {
                    sigset_t mask;
                    ~Restore() { pthread_sigmask(SIG_SETMASK, &mask, nullptr); }
                } restore{previous};
                federation::RegistryServer srv(store, addr);
                out << "listening on " << srv.address() << std::endl;
                err << srv.index().entries.size() << " artifacts in " << store.string() << "\n";
                int sig = 0;
                sigwait(&set, &sig);
                srv.stop();
                err << "stopped\n";
                return kExitOk;
            };
        });
    }

    // push / pull / list
    {
        auto* c = app.add_subcommand("push", "Upload an artifact to a registry");
        c->add_option("--addr", addr, "Registry address host:port")->required();
        c->add_option("--artifact", artifact, "Artifact file")->required();
        c->add_option("--name", name, "Name in the registry (default: file stem)");
        c->callback([&] {
            action = [&] {
                auto art = detail::read_artifact(artifact);
                federation::push_artifact(addr, name.empty() ? artifact.stem().string() : name, art);
                return kExitOk;
            };
        });
    }
    {
        auto* c = app.add_subcommand("pull", "Download an artifact from a registry");
        c->add_option("--addr", addr, "Registry address host:port")->required();
        c->add_option("--name", name, "Artifact name")->required();
        c->add_option("--out", out_path, "Output file")->required();
        c->callback([&] {
            action = [&] {
                auto art = federation::pull_artifact(addr, name);
                data::write_file(out_path, art.bytes());
                err << "pulled " << art.size() << " bytes\n";
                return kExitOk;
            };
        });
    }
    {
        auto* c = app.add_subcommand("list", "List a registry's artifacts (name, length, crc32, version)");
        c->add_option("--addr", addr, "Registry address host:port")->required();
        c->callback([&] {
            action = [&] {
                for (const auto& e : federation::list_artifacts(addr)) {
                    char crc[9];
                    std::snprintf(crc, sizeof crc, "%08x", e.checksum);
                    out << e.name << "\t" << e.length << "\t" << crc << "\t" << e.version << "\n";
                }
                return kExitOk;
            };
        });
    }

    // histograms
    std::vector<std::string> named;
    std::size_t bins = 64;
    {
        auto* c = app.add_subcommand("histograms", "Pixel histograms (whole image and myocardium) and their L1 distances");
        c->add_option("--dataset", named, "name=directory (repeatable)")->required();
        c->add_option("--out", out_path, "Output directory")->required();
        c->add_option("--format", format, "Output format")->check(CLI::IsMember({"tsv", "markdown"}))->capture_default_str();
        c->add_option("--bins", bins, "Bins over [0,1]")->capture_default_str();
        c->callback([&] {
            action = [&] {
                std::vector<std::pair<std::string, data::SiteDataset>> owned;
                for (const auto& nd : named) {
                    const auto eq = nd.find('=');
                    if (eq == std::string::npos || eq == 0) throw UsageError("--dataset expects name=directory, got " + nd);
                    owned.emplace_back(nd.substr(0, eq), detail::load(nd.substr(eq + 1)));
                }
                std::vector<std::pair<std::string, const std::vector<data::Sample>*>> sets;
                for (const auto& [n, ds] : owned) sets.emplace_back(n, &ds.samples);
                auto rep = experiments::compute_histograms(sets, bins);
                fs::create_directories(out_path);
                if (experiments::parse_format(format) == experiments::ReportFormat::markdown) {
                    data::write_text(out_path / "histograms.md", experiments::distances_markdown(rep, experiments::Region::whole) + "\n" +
                                                                 experiments::distances_markdown(rep, experiments::Region::myocardium));
                } else {
                    data::write_text(out_path / "histograms.tsv", experiments::histograms_tsv(rep));
                    data::write_text(out_path / "histogram_l1.tsv", experiments::distances_tsv(rep));
                }
                out << experiments::distances_markdown(rep, experiments::Region::myocardium);
                return kExitOk;
            };
        });
    }

    // run
    {
        auto* c = app.add_subcommand("run", "Run a full experiment plan and print the main result table");
        c->add_option("--plan", plan_path, "Plan file")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out_path, "Output directory (default: the plan's)");
        c->add_option("--addr", addr, "Exchange through the registry at host:port (default: the plan's)");
        c->add_option("--format", format, "Format of the table printed to stdout")
            ->check(CLI::IsMember({"tsv", "markdown"}))
            ->capture_default_str();
        c->callback([&, c] {
            action = [&, c] {
                auto plan = experiments::load_plan(plan_path);
                experiments::RunOptions opt;
                if (!out_path.empty()) opt.out = out_path;
                if (c->count("--addr")) opt.registry = addr;
                opt.progress = progress;
                auto res = experiments::run_full_matrix(plan, opt);
                const auto fmt = experiments::parse_format(format);
                out << (fmt == experiments::ReportFormat::markdown ? experiments::markdown_table(res.table)
                                                                   : experiments::results_tsv(res.table));
                err << "outputs in " << res.out.string() << "\n";
                return kExitOk;
            };
        });
    }

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\nrun `fdm --help` or `fdm <subcommand> --help` for usage\n";
        return kExitUsage;
    }

    try {
        return action();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const experiments::AuditFailure& e) {
        err << "error: " << e.what();
        return kExitVerification;
    } catch (const VerificationFailure& e) {
        err << "error: " << e.what() << "\n";
        return kExitVerification;
    } catch (const federation::IncompatibleArchitectureError& e) {
        err << "error: " << e.what() << "\n";
        return kExitVerification;
    } catch (const ChecksumError& e) {
        err << "error: " << e.what() << "\n";
        return kExitVerification;
    } catch (const federation::TransferError& e) {
        const std::string what = e.what();
        err << "error: " << what << "\n";
        return what.find("verification") != std::string::npos ? kExitVerification : kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

inline int dispatch(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

} // namespace fdm::cli
