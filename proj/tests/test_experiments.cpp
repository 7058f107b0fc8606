#include <gtest/gtest.h>

#include <cstring>

#include "fdm/experiments/pipeline.hpp"
#include "tmpdir.hpp"

using namespace fdm;
using namespace fdm::experiments;

namespace {

const fs::path kPlans = FDM_SOURCE_DIR "/plans";

ExperimentPlan smoke_plan() { return load_plan(kPlans / "smoke.plan"); }

std::string read(const fs::path& p) { return data::read_text(p); }

std::vector<data::Sample> constant_set(std::size_t n, float v) {
    std::vector<data::Sample> out(n);
    for (auto& s : out) {
        s.height = s.width = 4;
        s.image.assign(16, v);
        s.mask.assign(16, 0);
        s.mask[5] = 1;
    }
    return out;
}

} // namespace

TEST(Plan, DefaultPlanParsesWithMainRows) {
    auto p = load_plan(kPlans / "default.plan");
    EXPECT_EQ(p.sites.size(), 2u);
    EXPECT_EQ(p.sites.at("A").patients * p.sites.at("A").slices, 160u);
    EXPECT_EQ(p.sites.at("B").patients * p.sites.at("B").slices, 300u);
    auto rows = p.main_rows();
    ASSERT_EQ(rows.size(), 4u);
    const std::vector<std::pair<std::string, std::string>> expected{{"Hospital A", "A"},
                                                                    {"Hospital A", "B"},
                                                                    {"Hospital A + syn.B", "B"},
                                                                    {"Hospital A + syn.B", "A"}};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(rows[i].train.label(), expected[i].first);
        EXPECT_EQ(rows[i].test_site, expected[i].second);
    }
    EXPECT_EQ(p.supplementary_rows().size(), 4u);
    EXPECT_EQ(p.generator_sites(), (std::set<std::string>{"A", "B"}));
    EXPECT_EQ(p.bins, 64u);
}

TEST(Plan, FormatParseRoundTrip) {
    auto p = load_plan(kPlans / "default.plan");
    auto q = parse_plan(format_plan(p));
    EXPECT_EQ(format_plan(q), format_plan(p));
    EXPECT_EQ(q.diffusion.digest_text(), p.diffusion.digest_text());
    EXPECT_EQ(q.segmentation_seed, p.segmentation_seed);
}

TEST(Plan, RejectsMalformedPlans) {
    const std::string good = format_plan(smoke_plan());
    auto with = [&](const std::string& from, const std::string& to) {
        std::string s = good;
        const auto at = s.find(from);
        EXPECT_NE(at, std::string::npos) << from;
        return s.replace(at, from.size(), to);
    };
    EXPECT_NO_THROW(parse_plan(good));
    EXPECT_THROW(parse_plan(with("bins = 64", "bins = 64\ncolour = red")), text::ParseError);
    EXPECT_THROW(parse_plan(with("seed.A+syn.B = 23\n", "")), Error);
    EXPECT_THROW(parse_plan(with("row = A -> B", "row = A -> C")), Error);
    EXPECT_THROW(parse_plan(with("row = A -> B", "row = A -> A")), Error);
    EXPECT_THROW(parse_plan(with("row = A -> B", "row = A to B")), text::ParseError);
    EXPECT_THROW(parse_plan(with("row = A -> B", "row = A+syn.A -> B")), Error);
    EXPECT_THROW(parse_plan(with("[segmentation]", "[segmentaton]")), Error);
    EXPECT_THROW(parse_plan(with("epochs = 1", "epochs = one")), text::ParseError);
    EXPECT_THROW(parse_plan(with("image_size = 32\n", "")), Error);
    try {
        parse_plan(with("bins = 64", "bins = 64\ncolour = red"));
    } catch (const text::ParseError& e) {
        EXPECT_EQ(e.line(), 6u);
    }
}

TEST(Histograms, ConstantImagesFillOneBin) {
    auto c = constant_set(3, 0.5f);
    auto rep = compute_histograms({{"half", &c}}, 64);
    for (Region r : {Region::whole, Region::myocardium}) {
        const auto& h = rep.at("half", r);
        EXPECT_EQ(h[32], 1.0);
        double sum = 0;
        for (double v : h) sum += v;
        EXPECT_EQ(sum, 1.0);
    }
    auto edge = constant_set(1, 1.0f);
    EXPECT_EQ(compute_histograms({{"one", &edge}}, 64).at("one", Region::whole)[63], 1.0);
}

TEST(Histograms, DistanceMatrixProperties) {
    auto [pa, pb] = data::default_profiles();
    auto a = data::generate_site_dataset(pa, 6, 2, 1).samples;
    auto b = data::generate_site_dataset(pb, 6, 2, 2).samples;
    auto a2 = a;
    auto rep = compute_histograms({{"a", &a}, {"b", &b}, {"a again", &a2}}, 64);
    for (Region r : {Region::whole, Region::myocardium}) {
        for (const auto& n : rep.names) {
            double sum = 0;
            for (double v : rep.at(n, r)) sum += v;
            EXPECT_NEAR(sum, 1.0, 1e-6);
            EXPECT_EQ(rep.distance(n, n, r), 0.0);
        }
        EXPECT_EQ(rep.distance("a", "a again", r), 0.0);
        EXPECT_EQ(rep.distance("a", "b", r), rep.distance("b", "a", r));
        EXPECT_GT(rep.distance("a", "b", r), 0.0);
        EXPECT_LE(rep.distance("a", "b", r), 2.0);
        // Direct L1 oracle.
        double d = 0;
        for (std::size_t k = 0; k < 64; ++k) d += std::abs(rep.at("a", r)[k] - rep.at("b", r)[k]);
        EXPECT_DOUBLE_EQ(rep.distance("a", "b", r), d);
    }
}

TEST(Histograms, EmptyRegionNamesTheDataset) {
    auto c = constant_set(2, 0.3f);
    for (auto& s : c) s.mask.assign(16, 0);
    try {
        compute_histograms({{"blank masks", &c}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("blank masks"), std::string::npos);
    }
    std::vector<data::Sample> none;
    EXPECT_THROW(compute_histograms({{"none", &none}}), Error);
}

TEST(Report, MarkdownAndTsv) {
    ResultTable t;
    t.rows.push_back({"Hospital A", "Hospital A", 0.8891234567, {0.8, 0.9782469134}});
    t.rows.push_back({"Hospital A + syn.B", "Hospital B", 1.0 / 3.0, {1.0 / 3.0}});
    const std::string md = markdown_table(t);
    EXPECT_EQ(md.substr(0, md.find('\n')), "| Train Data Source | Test Data Source | DICE |");
    EXPECT_NE(md.find("| Hospital A + syn.B | Hospital B | 0.333 |"), std::string::npos);
    const std::string tsv = results_tsv(t);
    EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 3);
    auto back = parse_results_tsv(tsv);
    ASSERT_EQ(back.rows.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.rows[i].train_source, t.rows[i].train_source);
        EXPECT_EQ(back.rows[i].test_source, t.rows[i].test_source);
        EXPECT_NEAR(back.rows[i].dice, t.rows[i].dice, 1e-6);
    }
    const std::string slices = per_slice_tsv(t);
    EXPECT_EQ(std::count(slices.begin(), slices.end(), '\n'), 4);
    EXPECT_THROW(markdown_table(ResultTable{}), Error);
    EXPECT_EQ(parse_format("markdown"), ReportFormat::markdown);
    EXPECT_THROW(parse_format("html"), Error);
}

TEST(Pipeline, SmokePlanRunsEveryStageDeterministically) {
    test::TempDir d1, d2;
    auto plan = smoke_plan();
    auto r1 = run_full_matrix(plan, {d1.path(), std::nullopt, {}});
    auto r2 = run_full_matrix(plan, {d2.path(), std::nullopt, {}});

    ASSERT_EQ(r1.table.rows.size(), 4u);
    EXPECT_EQ(r1.table.rows[0].train_source, "Hospital A");
    EXPECT_EQ(r1.table.rows[0].test_source, "Hospital A");
    EXPECT_EQ(r1.table.rows[1].test_source, "Hospital B");
    EXPECT_EQ(r1.table.rows[2].train_source, "Hospital A + syn.B");
    EXPECT_EQ(r1.table.rows[2].test_source, "Hospital B");
    EXPECT_EQ(r1.table.rows[3].test_source, "Hospital A");
    EXPECT_EQ(r1.supplementary.rows.size(), 4u);
    // A->A and A->B use one checkpoint: one seg artifact per train source.
    EXPECT_EQ(r1.artifact_checksums.size(), 6u);

    EXPECT_EQ(read(d1.path() / "reports" / "results.tsv"), read(d2.path() / "reports" / "results.tsv"));
    EXPECT_EQ(read(d1.path() / "reports" / "supplementary.tsv"), read(d2.path() / "reports" / "supplementary.tsv"));
    EXPECT_EQ(r1.artifact_checksums, r2.artifact_checksums);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r1.table.rows[i].dice, r2.table.rows[i].dice);

    for (const char* f : {"results.md", "results.tsv", "results_per_slice.tsv", "histograms.tsv", "histogram_l1.tsv",
                          "histograms.md", "supplementary.md", "artifact_checksums.tsv"}) {
        EXPECT_TRUE(fs::exists(d1.path() / "reports" / f)) << f;
    }
    const std::string md = read(d1.path() / "reports" / "results.md");
    EXPECT_EQ(std::count(md.begin(), md.end(), '\n'), 6);

    // Every exchanged artifact passes the audit against every site's data.
    for (const auto& [name, crc] : r1.artifact_checksums) {
        Bytes art = data::read_file(d1.path() / "artifacts" / (name + ".fdma"));
        EXPECT_EQ(federation::ArtifactBytes(art).checksum(), crc);
        for (const char* site : {"A", "B"}) {
            auto ds = data::load_dataset(d1.path() / "datasets" / site);
            EXPECT_TRUE(federation::privacy_audit(art, ds.samples).pass()) << name << " at " << site;
        }
    }
    // Synthetic data is train-only and tagged with its generator.
    auto syn = data::load_dataset(d1.path() / "datasets" / "A+syn.B");
    auto real_a = data::load_dataset(d1.path() / "datasets" / "A");
    EXPECT_EQ(syn.samples.size(), real_a.in_split(data::Split::train).size());
    for (const auto& s : syn.samples) {
        EXPECT_TRUE(s.provenance.synthetic);
        EXPECT_EQ(s.provenance.site, 'B');
        EXPECT_EQ(syn.split_of(s.patient_id), data::Split::train);
    }
    EXPECT_EQ(r1.histograms.names, (std::vector<std::string>{"real A", "real B", "syn.B", "syn.A"}));
}

TEST(Pipeline, RegistryExchangeGivesSameResults) {
    test::TempDir drop, reg, store;
    auto plan = smoke_plan();
    federation::RegistryServer srv(store.path(), "127.0.0.1:0");
    auto via_drop = run_full_matrix(plan, {drop.path(), std::nullopt, {}});
    auto via_reg = run_full_matrix(plan, {reg.path(), srv.address(), {}});
    EXPECT_EQ(via_drop.artifact_checksums, via_reg.artifact_checksums);
    EXPECT_EQ(read(drop.path() / "reports" / "results.tsv"), read(reg.path() / "reports" / "results.tsv"));
    EXPECT_EQ(srv.index().entries.size(), 6u);
    EXPECT_NE(read(reg.path() / "logs" / "pipeline.log").find("registry at"), std::string::npos);
}

TEST(Pipeline, LeakingGeneratorIsRejectedBeforeSynthesis) {
    test::TempDir out;
    auto plan = smoke_plan();
    fs::create_directories(out.path() / "logs");
    RunLog log(out.path() / "logs" / "pipeline.log", {});
    SiteContext b(plan, "B", out.path(), log);
    SiteContext a(plan, "A", out.path(), log);
    a.prepare_data();
    b.prepare_data();
    auto genuine = b.train_diffusion();

    auto ds_a = data::load_dataset(out.path() / "datasets" / "A");
    auto v = federation::parse_artifact(genuine.bytes());
    Bytes payload(v.payload.begin(), v.payload.end());
    std::memcpy(payload.data() + 4096, ds_a.samples[0].image.data(), 256);
    federation::ArtifactBytes leaky(federation::frame_artifact(v.kind, v.metadata, payload));

    try {
        a.receive_generator("B", leaky);
        FAIL() << "leaking artifact accepted";
    } catch (const AuditFailure& e) {
        bool rule3 = false;
        for (const auto& f : e.report().findings) rule3 |= f.rule == 3 && f.offset == v.payload_offset + 4096;
        EXPECT_TRUE(rule3) << e.what();
    }
    EXPECT_FALSE(fs::exists(out.path() / "datasets" / "A+syn.B"));
    EXPECT_TRUE(fs::exists(out.path() / "logs" / "audit-diffusion-B-at-A.txt"));
}

TEST(Pipeline, StageFailureNamesStageAndKeepsLog) {
    auto plan = smoke_plan();
    test::TempDir out2;
    try {
        run_full_matrix(plan, {out2.path(), std::string("127.0.0.1:1"), {}});
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "diffusion");
    }
    const std::string log = read(out2.path() / "logs" / "pipeline.log");
    EXPECT_NE(log.find("stage data: done"), std::string::npos);
    EXPECT_NE(log.find("stage diffusion: FAILED"), std::string::npos);
}
