#include <sys/wait.h>
#include <unistd.h>

#include <fstream>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stil/cli/commands.hpp"
#include "stil/cli/config.hpp"
#include "stil/cli/diagnose.hpp"
#include "test_util.hpp"

using namespace stil;
using namespace stil::cli;

namespace {

// Tiny model and a 40-sample synthetic dataset; two epochs train in seconds.
RunConfig tiny_config(const fs::path& data_dir) {
    RunConfig c;
    c.data_dir = data_dir.string();
    c.encoder.dim = 8;
    c.encoder.heads = 2;
    c.encoder.stage_channels = {4, 8};
    c.encoder.tabular_layers = 1;
    c.projection_dim = 16;
    c.hyper.batch_size = 4;
    c.hyper.mu = 2;
    c.hyper.max_epochs = 2;
    c.hyper.start_pl_epoch = 1;
    c.hyper.tau = 0.4;
    c.hyper.varnet_hidden = 8;
    c.synth.classes = 3;
    c.synth.image_size = 8;
    c.synth.n_train = 40;
    c.synth.n_val = 8;
    c.synth.n_test = 8;
    c.synth.label_fraction = 0.25;
    c.synth.seed = 2;
    return c;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// ---- config -----------------------------------------------------------------------

TEST(Config, DefaultRoundTrip) {
    const auto text = serialize(RunConfig{});
    EXPECT_EQ(serialize(parse_config(text)), text);
}

TEST(Config, EditedRoundTripIsExact) {
    RunConfig c;
    for (auto [k, v] : std::vector<std::pair<std::string, std::string>>{{"seed", "7"},
                                                                       {"tau", "0.95"},
                                                                       {"lr", "0.0003"},
                                                                       {"stage_channels", "8,16"},
                                                                       {"head_activation", "gelu"},
                                                                       {"image_token_projection", "shared"},
                                                                       {"metric", "auc"},
                                                                       {"enable_pgls", "false"},
                                                                       {"synth_w_sh", "0.1"},
                                                                       {"data_dir", "/tmp/x y"}}) {
        set_key(c, k, v);
    }
    const auto text = serialize(c);
    const auto back = parse_config(text);
    EXPECT_EQ(serialize(back), text);
    EXPECT_EQ(back.hyper.tau, 0.95);
    EXPECT_EQ(back.hyper.lr, 0.0003);
    EXPECT_EQ(back.encoder.stage_channels, (std::vector<int64_t>{8, 16}));
    EXPECT_EQ(back.hyper.metric, train::Metric::auc);
    EXPECT_FALSE(back.enable_pgls);
    EXPECT_EQ(back.data_dir, "/tmp/x y");
}

TEST(Config, EveryKeyIsDocumentedAndUnique) {
    std::set<std::string> seen;
    for (const auto& f : fields()) {
        EXPECT_FALSE(f.doc.empty()) << f.key;
        EXPECT_TRUE(seen.insert(f.key).second) << "duplicate key " << f.key;
    }
}

TEST(Config, UnknownKeyIsNamed) {
    try {
        parse_config("alpha = 0.1\n\n# comment\nbogus_key = 3\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("bogus_key"), std::string::npos) << msg;
        EXPECT_NE(msg.find(":4:"), std::string::npos) << msg;
    }
}

TEST(Config, MalformedValuesAreRejected) {
    EXPECT_THROW(parse_config("alpha = abc"), ConfigError);
    EXPECT_THROW(parse_config("batch_size = 3.5"), ConfigError);
    EXPECT_THROW(parse_config("enable_dcc = maybe"), ConfigError);
    EXPECT_THROW(parse_config("just words"), ConfigError);
    EXPECT_THROW(parse_config("metric = f1"), ConfigError);
}

TEST(Config, ReferenceDefaultsFile) {
    const auto c = load_config(fs::path(STIL_SOURCE_DIR) / "configs" / "dvm_defaults.txt");
    EXPECT_EQ(c.hyper.batch_size, 64);
    EXPECT_EQ(c.hyper.mu, 7);
    EXPECT_EQ(c.hyper.alpha, 0.2);
    EXPECT_EQ(c.hyper.beta, 3.0);
    EXPECT_EQ(c.hyper.gamma, 0.5);
    EXPECT_EQ(c.hyper.lambda_p, 1.0);
    EXPECT_EQ(c.hyper.lambda_u, 0.2);
    EXPECT_EQ(c.hyper.tau, 0.9);
    EXPECT_EQ(c.hyper.r, 0.9);
    EXPECT_EQ(c.hyper.m, 0.996);
    EXPECT_EQ(c.hyper.kappa, 0.1);
}

TEST(Config, DeskConfigParses) {
    EXPECT_NO_THROW(load_config(fs::path(STIL_SOURCE_DIR) / "configs" / "desk.txt"));
}

TEST(Config, AblationsForceWeightsAndReportThem) {
    RunConfig c;
    set_ablation(c, "cgpl");
    std::vector<std::string> notes;
    auto h = resolved_hyper(c, &notes);
    EXPECT_EQ(h.lambda_u, 0.0);
    ASSERT_EQ(notes.size(), 1u);
    EXPECT_NE(notes[0].find("lambda_u"), std::string::npos);
    EXPECT_EQ(c.hyper.lambda_u, 0.2);  // the config itself is untouched

    RunConfig d;
    set_ablation(d, "dcc");
    set_ablation(d, "pgls");
    h = resolved_hyper(d, &notes);
    EXPECT_EQ(h.beta, 0.0);
    EXPECT_EQ(h.gamma, 0.0);
    EXPECT_EQ(h.r, 1.0);
    EXPECT_EQ(h.lambda_p, 0.0);
    EXPECT_EQ(notes.size(), 4u);
    EXPECT_THROW(set_ablation(d, "everything"), ConfigError);
}

TEST(Config, SeedFlowsIntoHyper) {
    RunConfig c;
    c.seed = 42;
    EXPECT_EQ(resolved_hyper(c).seed, 42u);
}

TEST(Config, OutputRootAppliesToRelativePaths) {
    ::setenv(kOutputRootEnv, "/tmp/root", 1);
    EXPECT_EQ(resolve_output("runs/a"), fs::path("/tmp/root/runs/a"));
    EXPECT_EQ(resolve_output("/abs/b"), fs::path("/abs/b"));
    ::unsetenv(kOutputRootEnv);
    EXPECT_EQ(resolve_output("runs/a"), fs::path("runs/a"));
}

// ---- diagnose ------------------------------------------------------------------

TEST(Diagnose, EmptyLogWritesEmptyFigures) {
    test::TempDir dir("stil_diag");
    std::ofstream(dir / "metrics.jsonl").close();
    auto rep = write_diagnostics(read_metrics(dir / "metrics.jsonl"), dir / "fig");
    EXPECT_EQ(rep.rows, 0);
    EXPECT_EQ(rep.files.size(), 6u);
    for (const auto& f : rep.files) EXPECT_TRUE(fs::exists(f)) << f;
    EXPECT_NE(read_file(dir / "fig" / "loss.svg").find("<svg"), std::string::npos);
}

TEST(Diagnose, MalformedLinesAreSkippedAndCounted) {
    test::TempDir dir("stil_diag");
    {
        std::ofstream o(dir / "metrics.jsonl");
        o << R"({"epoch":0,"val_metric":0.5,"losses":{"total":2.0},"case_ratios":[0.25,0.25,0.25,0.25]})" << '\n';
        o << "not json\n";
        o << R"({"val_metric":0.6})" << '\n';  // no epoch
        o << R"({"epoch":1,"val_metric":"high"})" << '\n';
        o << R"({"epoch":2,"val_metric":0.7,"pl_accuracy":null,"val_metric_name":"auc"})" << '\n';
    }
    auto log = read_metrics(dir / "metrics.jsonl");
    EXPECT_EQ(log.rows.size(), 2u);
    EXPECT_EQ(log.skipped, 3);
    EXPECT_EQ(log.metric_name, "auc");
    EXPECT_TRUE(std::isnan(log.rows[1].pl_accuracy));
    auto rep = write_diagnostics(log, dir / "fig");
    std::ifstream csv(dir / "fig" / "diagnostics.csv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(csv, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[1], "0,0.5,2,,,,,,0.25,0.25,0.25,0.25");
    EXPECT_EQ(lines[2].substr(0, 6), "2,0.7,");
}

TEST(Diagnose, MissingLogIsDataError) { EXPECT_THROW(read_metrics("/nonexistent/metrics.jsonl"), DataError); }

// ---- commands ------------------------------------------------------------------

TEST(Commands, SynthRefusesNonEmptyDirectoryWithoutForce) {
    test::TempDir dir("stil_cmd");
    auto cfg = tiny_config(dir.path());
    auto summary = run_synth(cfg, dir.path(), false);
    EXPECT_EQ(summary["n_train"], 40);
    EXPECT_TRUE(fs::exists(dir / "synth.json"));
    const auto hash = file_hash(dir / "table.csv");
    EXPECT_THROW(run_synth(cfg, dir.path(), false), ConfigError);
    run_synth(cfg, dir.path(), true);
    EXPECT_EQ(file_hash(dir / "table.csv"), hash);
}

TEST(Commands, MissingDatasetIsDataError) {
    test::TempDir dir("stil_cmd");
    auto cfg = tiny_config(dir / "absent");
    EXPECT_THROW(load_data(cfg), DataError);
    cfg.data_dir.clear();
    EXPECT_THROW(load_data(cfg), ConfigError);
}

TEST(Commands, TrainEvalAndDiagnoseAgree) {
    test::TempDir dir("stil_cmd");
    auto cfg = tiny_config(dir / "data");
    run_synth(cfg, dir / "data", false);
    set_ablation(cfg, "cgpl");
    cfg.out_dir = (dir / "run").string();
    auto s = run_train(cfg, {});
    EXPECT_EQ(s.fit.history.size(), 2u);
    for (const char* f : {"metrics.jsonl", "best.ckpt", "last.ckpt", "config.txt", "result.json"}) {
        EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
    }
    EXPECT_FALSE(fs::exists(dir / "run" / kLockFile));
    auto result = json::parse(read_file(dir / "run" / "result.json"));
    EXPECT_EQ(result["overrides"].size(), 1u);

    // The metrics log records the forced override on every line.
    std::ifstream log(dir / "run" / "metrics.jsonl");
    std::string line;
    while (std::getline(log, line)) {
        EXPECT_NE(line.find("enable_cgpl=false"), std::string::npos);
    }

    auto ev = run_eval(cfg, dir / "run" / "best.ckpt", "test");
    for (const char* k : {"metric", "value", "n_samples", "checkpoint_hash"}) EXPECT_TRUE(ev.contains(k)) << k;
    EXPECT_EQ(ev["n_samples"], 8);
    EXPECT_NEAR(ev["value"].get<double>(), result["test"].get<double>(), 1e-12);
    EXPECT_THROW(run_eval(cfg, dir / "run" / "best.ckpt", "train"), ConfigError);

    cfg.hyper.metric = train::Metric::auc;
    auto auc = run_eval(cfg, dir / "run" / "best.ckpt", "test");
    EXPECT_EQ(auc["metric"], "auc");
    EXPECT_GE(auc["value"].get<double>(), 0.0);
    EXPECT_LE(auc["value"].get<double>(), 1.0);

    // The diagnose reader understands every field the trainer writes.
    auto ml = read_metrics(dir / "run" / "metrics.jsonl");
    EXPECT_EQ(ml.skipped, 0);
    ASSERT_EQ(ml.rows.size(), s.fit.history.size());
    for (size_t k = 0; k < ml.rows.size(); ++k) {
        const auto& rec = s.fit.history[k];
        EXPECT_EQ(ml.rows[k].epoch, rec.epoch);
        EXPECT_DOUBLE_EQ(ml.rows[k].val_metric, rec.val_metric);
        EXPECT_DOUBLE_EQ(ml.rows[k].confident_ratio, rec.diag.confident_ratio);
        double sum = 0.0;
        for (double c : ml.rows[k].case_ratios) sum += c;
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Commands, ExistingRunNeedsResumeOrForce) {
    test::TempDir dir("stil_cmd");
    auto cfg = tiny_config(dir / "data");
    run_synth(cfg, dir / "data", false);
    cfg.hyper.max_epochs = 1;
    cfg.out_dir = (dir / "run").string();
    run_train(cfg, {});
    EXPECT_THROW(run_train(cfg, {}), ConfigError);

    auto changed = cfg;
    changed.hyper.max_epochs = 2;
    TrainOptions resume;
    resume.resume = true;
    changed.hyper.lr = 0.5;
    EXPECT_THROW(run_train(changed, resume), ConfigError);

    TrainOptions force;
    force.force = true;
    EXPECT_EQ(run_train(cfg, force).fit.history.size(), 1u);
}

TEST(Commands, RunLockIsExclusiveAndReclaimsStaleLocks) {
    test::TempDir dir("stil_lock");
    {
        RunLock a(dir.path());
        EXPECT_THROW(RunLock b(dir.path()), ConfigError);
    }
    EXPECT_NO_THROW(RunLock c(dir.path()));

    // Lock file left behind by a process that has exited.
    const pid_t child = ::fork();
    if (child == 0) ::_exit(0);
    ::waitpid(child, nullptr, 0);
    std::ofstream(dir / kLockFile) << child << '\n';
    EXPECT_NO_THROW(RunLock d(dir.path()));
}
