#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stil/train/trainer.hpp"
#include "test_util.hpp"

using namespace stil;
using namespace stil::train;

namespace {

constexpr int64_t kClasses = 3;

model::ModelConfig tiny_model() {
    model::ModelConfig m;
    m.encoder.dim = 8;
    m.encoder.heads = 2;
    m.encoder.image_size = 8;
    m.encoder.image_channels = 1;
    m.encoder.stage_channels = {4, 8};
    m.encoder.tabular_layers = 1;
    m.classes = kClasses;
    m.projection_dim = 16;
    return m;
}

Hyper tiny_hyper() {
    Hyper h;
    h.batch_size = 4;
    h.mu = 2;
    h.varnet_hidden = 8;
    h.start_pl_epoch = 1;
    h.max_epochs = 4;
    h.tau = 0.4;
    h.m = 0.9;
    h.lr = 3e-3;
    h.eval_batch = 64;
    h.seed = 11;
    return h;
}

Hyper baseline(Hyper h) {
    h.beta = h.gamma = h.lambda_p = h.lambda_u = 0.0;
    return h;
}

struct Data {
    data::SampleSet labeled = test::random_set(12, kClasses, 1, true);
    data::SampleSet unlabeled = test::random_set(24, kClasses, 2, false);
    data::SampleSet val = test::random_set(12, kClasses, 3, true);
};

Batch batch_of(const Data& d, int64_t nl = 4, int64_t nu = 8) {
    Batch b;
    b.x_img = d.labeled.images().slice(0, 0, nl);
    b.x_tab = d.labeled.tabular().slice(0, 0, nl);
    b.y = d.labeled.labels().slice(0, 0, nl);
    b.u_img = d.unlabeled.images().slice(0, 0, nu);
    b.u_tab = d.unlabeled.tabular().slice(0, 0, nu);
    return b;
}

double max_param_diff(torch::nn::Module& a, torch::nn::Module& b) {
    auto pa = a.parameters(), pb = b.parameters();
    double worst = 0.0;
    for (size_t k = 0; k < pa.size(); ++k) worst = std::max(worst, (pa[k] - pb[k]).abs().max().item<double>());
    return worst;
}

void expect_same_history(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (size_t k = 0; k < a.size(); ++k) {
        EXPECT_NEAR(a[k].losses.total, b[k].losses.total, tol) << "epoch " << k;
        EXPECT_NEAR(a[k].losses.uce, b[k].losses.uce, tol) << "epoch " << k;
        EXPECT_NEAR(a[k].val_metric, b[k].val_metric, tol) << "epoch " << k;
        EXPECT_NEAR(a[k].diag.confident_ratio, b[k].diag.confident_ratio, tol) << "epoch " << k;
    }
}

}  // namespace

// ---- loss composition ---------------------------------------------------------

TEST(LabeledLoss, Examples) {
    auto y = torch::tensor({0, 2}, torch::kInt64);
    auto onehot = torch::tensor({{60.0, 0.0, 0.0, 0.0}, {0.0, 0.0, 60.0, 0.0}}, torch::kFloat64);
    EXPECT_NEAR(labeled_loss(onehot, onehot, onehot, y).item<double>(), 0.0, 1e-12);
    auto uniform = torch::zeros({2, 4}, torch::kFloat64);
    EXPECT_NEAR(labeled_loss(uniform, uniform, uniform, y).item<double>(), 3.0 * std::log(4.0), 1e-12);
}

TEST(OverallLoss, Examples) {
    auto s = [](double v) { return torch::tensor(v, torch::kFloat64); };
    EXPECT_NEAR(overall_loss(s(1), s(.5), s(2), s(3), 0.2, 1.0, 0.2).item<double>(), 0.2 + 0.5 + 2.0 + 0.6, 1e-12);
    EXPECT_EQ(overall_loss(s(1), s(0), s(2), s(3), 0.0, 0.0, 0.0).item<double>(), 0.0);
    EXPECT_THROW(overall_loss(s(1), s(0), s(2), s(3), -1.0, 0.0, 0.0), ConfigError);
}

// ---- EMA ------------------------------------------------------------------------

TEST(Ema, Examples) {
    torch::nn::Linear teacher(2, 2), student(2, 2);
    {
        torch::NoGradGuard g;
        for (auto& p : teacher->parameters()) p.fill_(1.0);
        for (auto& p : student->parameters()) p.zero_();
    }
    ema_update(*teacher, *student, 0.996);
    EXPECT_NEAR(teacher->weight[0][0].item<float>(), 0.996f, 1e-7);
    ema_update(*teacher, *student, 1.0);
    EXPECT_NEAR(teacher->weight[0][0].item<float>(), 0.996f, 1e-7);
    ema_update(*teacher, *student, 0.0);
    EXPECT_EQ(teacher->weight.abs().max().item<float>(), 0.0f);
}

TEST(Ema, MismatchedTreesAreContractViolation) {
    torch::nn::Linear a(2, 2), b(2, 3);
    EXPECT_THROW(ema_update(*a, *b, 0.5), ContractViolation);
}

TEST(Trainer, TeacherStartsAsStudentCopy) {
    Data d;
    Trainer t(tiny_model(), test::small_schema(), tiny_hyper());
    EXPECT_EQ(max_param_diff(*t.teacher(), *t.student()), 0.0);
}

TEST(Trainer, ZeroMomentumTeacherTracksStudent) {
    Data d;
    auto h = tiny_hyper();
    h.m = 0.0;
    Trainer t(tiny_model(), test::small_schema(), h);
    t.set_pool(data::TabularValuePool::from({&d.labeled, &d.unlabeled}));
    for (int k = 0; k < 3; ++k) t.train_step(batch_of(d));
    EXPECT_LT(max_param_diff(*t.teacher(), *t.student()), 1e-12);
}

TEST(Trainer, OptimizerNeverTouchesTeacher) {
    Data d;
    auto h = tiny_hyper();
    h.m = 1.0;
    Trainer t(tiny_model(), test::small_schema(), h);
    t.set_pool(data::TabularValuePool::from({&d.labeled, &d.unlabeled}));
    std::vector<torch::Tensor> before;
    for (const auto& p : t.teacher()->parameters()) before.push_back(p.clone());
    for (int k = 0; k < 3; ++k) t.train_step(batch_of(d));
    auto after = t.teacher()->parameters();
    for (size_t k = 0; k < before.size(); ++k) EXPECT_TRUE(torch::equal(before[k], after[k]));
    EXPECT_GT(max_param_diff(*t.teacher(), *t.student()), 0.0);
}

// ---- step semantics -------------------------------------------------------------

TEST(Trainer, BeforePseudoLabelingTotalIsSupervisedPlusDcc) {
    Data d;
    auto h = tiny_hyper();
    h.start_pl_epoch = 10;
    Trainer t(tiny_model(), test::small_schema(), h);
    ASSERT_FALSE(t.uses_teacher_targets());
    auto f = t.compute_losses(batch_of(d), nullptr);
    EXPECT_NEAR(f.losses.total, h.alpha * f.losses.ce + f.losses.dcc, 1e-6);
    EXPECT_NEAR(f.losses.dcc, h.beta * f.losses.cc + h.gamma * (f.losses.ds_i + f.losses.ds_t), 1e-5);
    EXPECT_EQ(f.losses.pt, 0.0);
    EXPECT_EQ(f.losses.uce, 0.0);
}

TEST(Trainer, BaselineGradientEqualsSupervisedGradient) {
    Data d;
    auto h = baseline(tiny_hyper());
    Trainer t(tiny_model(), test::small_schema(), h);
    auto b = batch_of(d);
    auto params = t.student()->parameters();
    auto f = t.compute_losses(b, nullptr);
    auto g_trainer = torch::autograd::grad({f.total}, params, {}, false, false, true);
    auto o = t.student()(b.x_img, b.x_tab);
    auto ref = h.alpha * labeled_loss(o.logits_m, o.logits_i, o.logits_t, b.y);
    auto g_ref = torch::autograd::grad({ref}, params, {}, false, false, true);
    for (size_t k = 0; k < params.size(); ++k) {
        ASSERT_EQ(g_trainer[k].defined(), g_ref[k].defined());
        if (g_ref[k].defined()) EXPECT_LT((g_trainer[k] - g_ref[k]).abs().max().item<double>(), 1e-9);
    }
}

TEST(Trainer, VarnetAndMainGradientsArePartitioned) {
    Data d;
    auto h = tiny_hyper();
    h.gamma = 0.5;
    Trainer t(tiny_model(), test::small_schema(), h);
    auto f = t.compute_losses(batch_of(d), nullptr);
    std::vector<torch::Tensor> theta = t.varnet_image()->parameters();
    for (auto& p : t.varnet_tabular()->parameters()) theta.push_back(p);
    auto student = t.student()->parameters();
    auto leak = [](const std::vector<torch::Tensor>& grads) {
        double worst = 0.0;
        for (const auto& g : grads) {
            if (g.defined()) worst = std::max(worst, g.abs().max().item<double>());
        }
        return worst;
    };
    EXPECT_LT(leak(torch::autograd::grad({f.total}, theta, {}, true, false, true)), 1e-12);
    EXPECT_LT(leak(torch::autograd::grad({f.varnet_loss}, student, {}, true, false, true)), 1e-12);
    EXPECT_GT(leak(torch::autograd::grad({f.varnet_loss}, theta, {}, true, false, true)), 0.0);
    EXPECT_GT(leak(torch::autograd::grad({f.total}, student, {}, false, false, true)), 0.0);
}

TEST(Trainer, ConfidenceGateDisabledAboveOne) {
    Data d;
    auto h = tiny_hyper();
    h.tau = 1.5;
    Trainer t(tiny_model(), test::small_schema(), h);
    auto targets = t.make_targets(batch_of(d));
    EXPECT_EQ(targets.confident.sum().item<int64_t>(), 0);
    auto f = t.compute_losses(batch_of(d), &targets);
    EXPECT_EQ(f.losses.uce, 0.0);
}

TEST(Trainer, RepeatedStepsDescendOnFixedBatch) {
    Data d;
    auto h = tiny_hyper();
    h.tabular_replace = 0.0;
    h.image_aug.strength = 0.0;
    h.lr = 1e-2;
    Trainer t(tiny_model(), test::small_schema(), h);
    t.set_pool(data::TabularValuePool::from({&d.labeled, &d.unlabeled}));
    auto b = batch_of(d, 8, 0);
    b.u_img = torch::Tensor();
    auto first = t.compute_losses(b, nullptr).losses.ce;
    auto hb = baseline(h);
    t.mutable_hyper() = hb;
    for (int k = 0; k < 30; ++k) t.train_step(b);
    EXPECT_LT(t.compute_losses(b, nullptr).losses.ce, 0.5 * first);
}

TEST(Trainer, NonFiniteLossRaisesNumericalError) {
    Data d;
    Trainer t(tiny_model(), test::small_schema(), tiny_hyper());
    {
        torch::NoGradGuard g;
        t.student()->f_m->linear->bias.fill_(std::numeric_limits<float>::quiet_NaN());
    }
    try {
        t.compute_losses(batch_of(d), nullptr);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("\"ce\""), std::string::npos);
    }
}

TEST(Trainer, ZeroHeadsPredictUniform) {
    Data d;
    Trainer t(tiny_model(), test::small_schema(), tiny_hyper());
    {
        torch::NoGradGuard g;
        t.student()->f_m->linear->weight.zero_();
        t.student()->f_m->linear->bias.zero_();
    }
    auto p = t.predict(d.val);
    EXPECT_LT((p - 1.0 / kClasses).abs().max().item<double>(), 1e-6);
}

// ---- fit ------------------------------------------------------------------------

TEST(Fit, PatienceZeroStopsAtFirstNonImprovingEpoch) {
    Data d;
    auto h = tiny_hyper();
    h.patience = 0;
    h.max_epochs = 40;
    Trainer t(tiny_model(), test::small_schema(), baseline(h));
    auto r = t.fit(d.labeled, d.unlabeled, d.val);
    ASSERT_TRUE(r.stopped_early);
    const auto& hist = r.history;
    ASSERT_GE(hist.size(), 2u);
    double best = -1.0;
    for (size_t k = 0; k + 1 < hist.size(); ++k) {
        EXPECT_GT(hist[k].val_metric, best) << "epoch " << k;
        best = hist[k].val_metric;
    }
    EXPECT_LE(hist.back().val_metric, best);
}

TEST(Fit, DeterministicAcrossRuns) {
    Data d;
    auto h = tiny_hyper();
    Trainer a(tiny_model(), test::small_schema(), h);
    Trainer b(tiny_model(), test::small_schema(), h);
    auto ra = a.fit(d.labeled, d.unlabeled, d.val);
    auto rb = b.fit(d.labeled, d.unlabeled, d.val);
    expect_same_history(ra.history, rb.history, 1e-6);
    EXPECT_LT(max_param_diff(*a.student(), *b.student()), 1e-6);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
    Data d;
    test::TempDir dir_full("stil_full"), dir_half("stil_half");
    auto h = tiny_hyper();
    Trainer full(tiny_model(), test::small_schema(), h);
    FitOptions of;
    of.out_dir = dir_full.path();
    auto r_full = full.fit(d.labeled, d.unlabeled, d.val, of);

    auto h2 = h;
    h2.max_epochs = 2;
    {
        Trainer half(tiny_model(), test::small_schema(), h2);
        FitOptions oh;
        oh.out_dir = dir_half.path();
        half.fit(d.labeled, d.unlabeled, d.val, oh);
    }
    Trainer resumed(tiny_model(), test::small_schema(), h);
    resumed.load_checkpoint(dir_half / "last.ckpt");
    EXPECT_EQ(resumed.epoch(), 2);
    FitOptions orr;
    orr.out_dir = dir_half.path();
    auto r_res = resumed.fit(d.labeled, d.unlabeled, d.val, orr);
    expect_same_history(r_full.history, r_res.history, 1e-6);
    EXPECT_LT(max_param_diff(*full.student(), *resumed.student()), 1e-6);
    EXPECT_LT(max_param_diff(*full.teacher(), *resumed.teacher()), 1e-6);

    std::ifstream log(dir_half / "metrics.jsonl");
    std::string line;
    int64_t lines = 0;
    while (std::getline(log, line)) ++lines;
    EXPECT_EQ(lines, h.max_epochs);
}

TEST(Fit, BestCheckpointHoldsBestValidationModel) {
    Data d;
    test::TempDir dir("stil_best");
    auto h = tiny_hyper();
    h.max_epochs = 6;
    Trainer t(tiny_model(), test::small_schema(), h);
    FitOptions o;
    o.out_dir = dir.path();
    auto r = t.fit(d.labeled, d.unlabeled, d.val, o);
    size_t arg = 0;
    for (size_t k = 1; k < r.history.size(); ++k) {
        if (r.history[k].val_metric > r.history[arg].val_metric) arg = k;
    }
    EXPECT_EQ(r.best_epoch, r.history[arg].epoch);
    EXPECT_EQ(r.best_val, r.history[arg].val_metric);
    Trainer::read_student(dir / "best.ckpt", t.student());
    EXPECT_NEAR(t.evaluate(d.val, Metric::accuracy), r.best_val, 1e-12);
}

TEST(Fit, RejectsEmptyLabeledSetAndBadLabels) {
    Data d;
    Trainer t(tiny_model(), test::small_schema(), tiny_hyper());
    EXPECT_THROW(t.fit(data::SampleSet{}, d.unlabeled, d.val), ConfigError);
    auto many = test::random_set(8, 5, 4, true);
    EXPECT_THROW(t.fit(many, d.unlabeled, d.val), DataError);
}

// ---- diagnostics ------------------------------------------------------------------

TEST(Diagnostics, CaseRatiosMatchTeacherReplay) {
    Data d;
    Trainer t(tiny_model(), test::small_schema(), tiny_hyper());
    auto unl = test::random_set(24, kClasses, 2, true);
    auto diag = t.diagnostics(unl);
    torch::NoGradGuard g;
    auto o = t.teacher()(unl.images(), unl.tabular());
    std::array<double, 4> counts{0, 0, 0, 0};
    for (int64_t b = 0; b < unl.size(); ++b) {
        auto c = method::determine_case(test::to_vec(o.prob_m()[b]), test::to_vec(o.prob_i()[b]),
                                        test::to_vec(o.prob_t()[b]));
        counts[static_cast<size_t>(c)] += 1.0;
    }
    double sum = 0.0;
    for (size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(diag.case_ratios[k], counts[k] / unl.size(), 1e-12);
        sum += diag.case_ratios[k];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_FALSE(diag.q_accuracy_all.has_value());  // no prototypes yet
}

TEST(Diagnostics, ThresholdAboveOneReportsAbsentAccuracy) {
    Data d;
    auto h = tiny_hyper();
    h.tau = 1.5;
    Trainer t(tiny_model(), test::small_schema(), h);
    auto diag = t.diagnostics(test::random_set(24, kClasses, 2, true));
    EXPECT_EQ(diag.confident_ratio, 0.0);
    EXPECT_FALSE(diag.pl_accuracy.has_value());
}

// ---- metrics ----------------------------------------------------------------------

TEST(Metrics, PerfectPredictor) {
    auto y = torch::tensor({0, 1, 2, 1, 0}, torch::kInt64);
    auto p = torch::one_hot(y, 3).to(torch::kFloat64);
    EXPECT_EQ(accuracy(p, y), 1.0);
    EXPECT_EQ(auc(p, y), 1.0);
}

TEST(Metrics, ConstantScoresGiveHalfAuc) {
    auto y = torch::tensor({0, 1, 0, 1, 1}, torch::kInt64);
    EXPECT_DOUBLE_EQ(auc(torch::full({5, 2}, 0.5, torch::kFloat64), y), 0.5);
}

TEST(Metrics, RandomScoresNearHalf) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> s(10000);
    std::vector<bool> pos(10000);
    for (size_t k = 0; k < s.size(); ++k) {
        s[k] = u(rng);
        pos[k] = k % 2 == 0;
    }
    const double a = binary_auc(s, pos);
    EXPECT_GE(a, 0.48);
    EXPECT_LE(a, 0.52);
}

TEST(Metrics, AucMatchesPairCountingOracle) {
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<int> level(0, 5);  // coarse scores force ties
    const int64_t n = 300, c = 3;
    auto probs = torch::empty({n, c}, torch::kFloat64);
    auto y = torch::empty({n}, torch::kInt64);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = 0; k < c; ++k) probs[i][k] = level(rng) / 5.0;
        y[i] = static_cast<int64_t>(rng() % c);
    }
    double macro = 0.0;
    for (int64_t k = 0; k < c; ++k) {
        double wins = 0.0, pairs = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            if (y[i].item<int64_t>() != k) continue;
            for (int64_t j = 0; j < n; ++j) {
                if (y[j].item<int64_t>() == k) continue;
                const double si = probs[i][k].item<double>(), sj = probs[j][k].item<double>();
                wins += si > sj ? 1.0 : si == sj ? 0.5 : 0.0;
                pairs += 1.0;
            }
        }
        macro += wins / pairs;
    }
    EXPECT_NEAR(auc(probs, y), macro / c, 1e-12);
}

TEST(Metrics, SingleClassAucIsError) {
    auto y = torch::zeros({4}, torch::kInt64);
    EXPECT_THROW(auc(torch::rand({4, 2}, torch::kFloat64), y), DataError);
    EXPECT_THROW(auc(torch::rand({4, 3}, torch::kFloat64), y), DataError);
}

TEST(Metrics, ParseNames) {
    EXPECT_EQ(parse_metric("auc"), Metric::auc);
    EXPECT_EQ(parse_metric("accuracy"), Metric::accuracy);
    EXPECT_THROW(parse_metric("f1"), ConfigError);
}
