#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "stil/data/augment.hpp"
#include "stil/data/batching.hpp"
#include "stil/data/sample.hpp"
#include "stil/data/schema.hpp"
#include "stil/errors.hpp"
#include "stil/method/cgpl.hpp"
#include "stil/method/pgls.hpp"
#include "stil/model/dcc.hpp"
#include "stil/model/model.hpp"
#include "stil/train/metrics.hpp"

namespace stil::train {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr int64_t kCheckpointVersion = 1;

struct Hyper {
    double alpha = 0.2;
    double beta = 3.0;
    double gamma = 0.5;
    double lambda_p = 1.0;
    double lambda_u = 0.2;
    double tau = 0.9;
    double r = 0.9;
    double m = 0.996;
    double kappa = 0.1;
    int64_t batch_size = 64;
    int64_t mu = 7;
    double lr = 1e-3;
    double varnet_lr = 1e-3;
    int64_t varnet_hidden = 64;
    double grad_clip = 0.0;  // max global norm; 0 disables
    int64_t start_pl_epoch = 5;
    int64_t max_epochs = 100;
    int64_t patience = 100;
    double tabular_replace = 0.3;
    data::ImageAugmentConfig image_aug;
    Metric metric = Metric::accuracy;
    uint64_t seed = 0;
    int64_t eval_batch = 512;

    void validate() const {
        auto nonneg = [](double v, const char* name) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a finite value >= 0");
        };
        nonneg(alpha, "alpha");
        nonneg(beta, "beta");
        nonneg(gamma, "gamma");
        nonneg(lambda_p, "lambda_p");
        nonneg(lambda_u, "lambda_u");
        nonneg(grad_clip, "grad_clip");
        if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("ema momentum m must lie in [0,1]");
        if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("r must lie in [0,1]");
        if (!(kappa > 0.0)) throw ConfigError("kappa must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (mu < 1) throw ConfigError("mu must be >= 1");
        if (!(lr > 0.0) || !(varnet_lr > 0.0)) throw ConfigError("learning rates must be > 0");
        if (varnet_hidden < 1) throw ConfigError("varnet_hidden must be >= 1");
        if (start_pl_epoch < 0) throw ConfigError("start_pl_epoch must be >= 0");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (patience < 0) throw ConfigError("patience must be >= 0");
        if (!(tabular_replace >= 0.0 && tabular_replace <= 1.0)) throw ConfigError("tabular_replace must lie in [0,1]");
        if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
    }
};

inline torch::Tensor labeled_loss(const torch::Tensor& logits_m, const torch::Tensor& logits_i,
                                  const torch::Tensor& logits_t, const torch::Tensor& y) {
    namespace F = torch::nn::functional;
    return F::cross_entropy(logits_m, y) + F::cross_entropy(logits_i, y) + F::cross_entropy(logits_t, y);
}

inline torch::Tensor overall_loss(const torch::Tensor& l_ce, const torch::Tensor& l_dcc, const torch::Tensor& l_pt,
                                  const torch::Tensor& l_uce, double alpha, double lambda_p, double lambda_u) {
    if (alpha < 0.0 || lambda_p < 0.0 || lambda_u < 0.0) throw ConfigError("loss weights must be non-negative");
    return alpha * l_ce + l_dcc + lambda_p * l_pt + lambda_u * l_uce;
}

/// teacher <- m * teacher + (1 - m) * student, parameter by parameter.
inline void ema_update(torch::nn::Module& teacher, const torch::nn::Module& student, double m) {
    torch::NoGradGuard guard;
    auto tp = teacher.named_parameters(true);
    auto sp = student.named_parameters(true);
    if (tp.size() != sp.size()) throw ContractViolation("ema_update: parameter trees differ");
    for (const auto& item : sp) {
        auto* t = tp.find(item.key());
        if (t == nullptr || t->sizes() != item.value().sizes()) {
            throw ContractViolation("ema_update: parameter '" + item.key() + "' missing or mis-shaped");
        }
        if (m == 0.0) {
            t->copy_(item.value());
        } else if (m != 1.0) {
            t->mul_(m).add_(item.value(), 1.0 - m);
        }
    }
}

inline void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) { ema_update(dst, src, 0.0); }

// Loss components of one step (scalars, already detached).
struct StepLosses {
    double total = 0, ce = 0, cc = 0, ds_i = 0, ds_t = 0, dcc = 0, pt = 0, uce = 0, varnet = 0;

    json to_json() const {
        return {{"total", total}, {"ce", ce}, {"cc", cc}, {"ds_i", ds_i}, {"ds_t", ds_t},
                {"dcc", dcc},     {"pt", pt}, {"uce", uce}, {"varnet", varnet}};
    }
    StepLosses& operator+=(const StepLosses& o) {
        total += o.total, ce += o.ce, cc += o.cc, ds_i += o.ds_i, ds_t += o.ds_t;
        dcc += o.dcc, pt += o.pt, uce += o.uce, varnet += o.varnet;
        return *this;
    }
    StepLosses scaled(double s) const {
        StepLosses o = *this;
        o.total *= s, o.ce *= s, o.cc *= s, o.ds_i *= s, o.ds_t *= s, o.dcc *= s, o.pt *= s, o.uce *= s, o.varnet *= s;
        return o;
    }
};

// Teacher-side targets for the unlabeled part of a batch.
struct Targets {
    torch::Tensor cases;       // [U] int64
    torch::Tensor p_bar;       // [U,C]
    torch::Tensor p_bar_m;     // [U,C]
    torch::Tensor q;           // [U,C] or undefined when smoothing is bypassed
    torch::Tensor confident;   // [U] bool
    torch::Tensor masks;       // [U,3]
    torch::Tensor pseudo;      // [U] argmax of p_bar_m
    torch::Tensor emb_l;       // teacher embeddings for prototype accumulation
    torch::Tensor emb_u;
};

struct Batch {
    torch::Tensor x_img, x_tab, y;  // labeled
    torch::Tensor u_img, u_tab;     // unlabeled
};

struct Diagnostics {
    std::optional<double> pl_accuracy;           // argmax(p_bar) accuracy on confident samples
    double confident_ratio = 0.0;
    std::optional<double> q_accuracy_confident;  // argmax(q) accuracy on confident samples
    std::optional<double> q_accuracy_all;
    std::array<double, 4> case_ratios{0, 0, 0, 0};
    double unlabeled_accuracy = 0.0;             // argmax(p_bar) accuracy on all unlabeled samples
};

struct EpochRecord {
    int64_t epoch = 0;
    bool pseudo_labeling = false;
    StepLosses losses;
    double val_metric = 0.0;
    Diagnostics diag;
    std::vector<double> prototype_counts;
    std::vector<double> prototype_norms;
    int64_t skipped_tabular = 0;
};

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const EpochRecord& r, Metric metric, const std::vector<std::string>& overrides) {
    return {{"schema_version", kMetricsSchemaVersion},
            {"epoch", r.epoch},
            {"pseudo_labeling", r.pseudo_labeling},
            {"losses", r.losses.to_json()},
            {"val_metric", r.val_metric},
            {"val_metric_name", to_string(metric)},
            {"pl_accuracy", optional_json(r.diag.pl_accuracy)},
            {"confident_ratio", r.diag.confident_ratio},
            {"q_accuracy_confident", optional_json(r.diag.q_accuracy_confident)},
            {"q_accuracy_all", optional_json(r.diag.q_accuracy_all)},
            {"case_ratios", r.diag.case_ratios},
            {"unlabeled_accuracy", r.diag.unlabeled_accuracy},
            {"prototype_counts", r.prototype_counts},
            {"prototype_norms", r.prototype_norms},
            {"skipped_tabular", r.skipped_tabular},
            {"overrides", overrides}};
}

struct FitResult {
    std::vector<EpochRecord> history;
    double best_val = -std::numeric_limits<double>::infinity();
    int64_t best_epoch = -1;
    bool stopped_early = false;
};

struct FitOptions {
    std::optional<fs::path> out_dir;          // metrics.jsonl, best.ckpt, last.ckpt
    std::vector<std::string> overrides;       // recorded in every metrics line
    bool verbose = false;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Student, EMA teacher, variational nets, optimizers, prototype store and RNG.
class Trainer {
public:
    Trainer(const model::ModelConfig& mcfg, const data::TabularSchema& schema, const Hyper& hyper)
        : mcfg_(mcfg), schema_(schema), hyper_(hyper), rng_(hyper.seed ^ 0x9e3779b97f4a7c15ULL) {
        hyper.validate();
        mcfg.encoder.validate();
        torch::manual_seed(static_cast<uint64_t>(hyper.seed));
        student_ = model::StilModel(mcfg, schema);
        teacher_ = model::StilModel(mcfg, schema);
        copy_parameters(*teacher_, *student_);
        for (auto& p : teacher_->parameters()) p.requires_grad_(false);
        const auto d = mcfg.encoder.dim;
        var_i_ = model::VariationalNet(d, hyper.varnet_hidden);
        var_t_ = model::VariationalNet(d, hyper.varnet_hidden);
        opt_ = std::make_unique<torch::optim::Adam>(student_->parameters(), torch::optim::AdamOptions(hyper.lr));
        std::vector<torch::Tensor> vparams = var_i_->parameters();
        for (auto& p : var_t_->parameters()) vparams.push_back(p);
        var_opt_ = std::make_unique<torch::optim::Adam>(vparams, torch::optim::AdamOptions(hyper.varnet_lr));
        protos_ = method::PrototypeStore(mcfg.classes, mcfg.projection_dim);
    }

    model::StilModel& student() { return student_; }
    model::StilModel& teacher() { return teacher_; }
    model::VariationalNet& varnet_image() { return var_i_; }
    model::VariationalNet& varnet_tabular() { return var_t_; }
    method::PrototypeStore& prototypes() { return protos_; }
    const Hyper& hyper() const { return hyper_; }
    Hyper& mutable_hyper() { return hyper_; }
    const model::ModelConfig& model_config() const { return mcfg_; }
    const data::TabularSchema& schema() const { return schema_; }
    int64_t epoch() const { return epoch_; }
    data::Rng& rng() { return rng_; }
    torch::optim::Adam& optimizer() { return *opt_; }

    bool pseudo_labeling_active() const { return epoch_ >= hyper_.start_pl_epoch; }
    bool uses_teacher_targets() const {
        return pseudo_labeling_active() && (hyper_.lambda_u > 0.0 || hyper_.lambda_p > 0.0);
    }
    bool uses_unlabeled_student() const {
        return hyper_.beta > 0.0 || hyper_.gamma > 0.0 || uses_teacher_targets();
    }

    /// Teacher forward on clean views: cases, pseudo-labels, smoothing, gate.
    Targets make_targets(const Batch& b) {
        torch::NoGradGuard guard;
        Targets t;
        const auto nl = b.x_img.size(0);
        auto out = teacher_(torch::cat({b.x_img, b.u_img}), torch::cat({b.x_tab, b.u_tab}));
        auto pm = out.prob_m().slice(0, nl);
        auto pi = out.prob_i().slice(0, nl);
        auto pt = out.prob_t().slice(0, nl);
        t.emb_l = out.embedding.slice(0, 0, nl);
        t.emb_u = out.embedding.slice(0, nl);
        t.cases = method::determine_cases(pm, pi, pt);
        auto p = method::make_pseudo_labels(t.cases, pm, pi, pt);
        if (hyper_.r < 1.0 && protos_.complete()) {
            t.q = method::prototype_similarity(t.emb_u, protos_.prototypes());
            auto s = method::smooth(p, pm, t.q, hyper_.r);
            t.p_bar = s.p_bar;
            t.p_bar_m = s.p_bar_m;
        } else {
            t.p_bar = p;
            t.p_bar_m = pm;
        }
        t.confident = std::get<0>(t.p_bar_m.max(1)).ge(hyper_.tau);
        t.pseudo = t.p_bar_m.argmax(1);
        t.masks = method::select_update_targets(t.cases, rng_, pm.scalar_type());
        return t;
    }

    struct Forward {
        torch::Tensor total, varnet_loss;
        StepLosses losses;
    };

    /// Student losses on already-augmented views. `targets` may be null before
    /// pseudo-labeling starts.
    Forward compute_losses(const Batch& b, const Targets* targets) {
        namespace F = torch::nn::functional;
        const auto nl = b.x_img.size(0);
        const bool with_u = uses_unlabeled_student() && b.u_img.defined() && b.u_img.size(0) > 0;
        auto img = with_u ? torch::cat({b.x_img, b.u_img}) : b.x_img;
        auto tab = with_u ? torch::cat({b.x_tab, b.u_tab}) : b.x_tab;
        auto o = student_(img, tab);
        auto zero = torch::zeros({}, o.logits_m.options());

        Forward f;
        auto l_ce = labeled_loss(o.logits_m.slice(0, 0, nl), o.logits_i.slice(0, 0, nl), o.logits_t.slice(0, 0, nl), b.y);
        auto l_cc = zero, ds_i = zero, ds_t = zero, l_pt = zero, l_uce = zero;
        f.varnet_loss = zero;
        if (hyper_.beta > 0.0) {
            l_cc = model::contrastive_consistency_loss(student_->g_i(o.z_i_s), student_->g_t(o.z_t_s), hyper_.kappa);
        }
        if (hyper_.gamma > 0.0) {
            auto ll_i = model::varnet_loglik(o.z_i_c, o.z_i_s, var_i_);
            auto ll_t = model::varnet_loglik(o.z_t_c, o.z_t_s, var_t_);
            // vCLUB reaches the representations only; the log-likelihood is a
            // constant here and trains theta through varnet_loss instead.
            ds_i = model::vclub_estimate(o.z_i_c, o.z_i_s, var_i_) - ll_i.detach();
            ds_t = model::vclub_estimate(o.z_t_c, o.z_t_s, var_t_) - ll_t.detach();
            f.varnet_loss = -(ll_i + ll_t);
        }
        auto l_dcc = model::dcc_loss(l_cc, ds_i, ds_t, hyper_.beta, hyper_.gamma);
        if (targets != nullptr && with_u) {
            auto lm = o.logits_m.slice(0, nl), li = o.logits_i.slice(0, nl), lt = o.logits_t.slice(0, nl);
            if (hyper_.lambda_u > 0.0) {
                l_uce = method::unlabeled_loss(lm, li, lt, targets->p_bar, targets->p_bar_m, targets->masks, hyper_.tau);
            }
            if (hyper_.lambda_p > 0.0 && protos_.complete()) {
                l_pt = method::prototypical_contrastive_loss(o.embedding.slice(0, 0, nl), b.y, o.embedding.slice(0, nl),
                                                             targets->pseudo, targets->confident, protos_.prototypes(),
                                                             hyper_.kappa);
            }
        }
        f.total = overall_loss(l_ce, l_dcc, l_pt, l_uce, hyper_.alpha, hyper_.lambda_p, hyper_.lambda_u);
        auto val = [](const torch::Tensor& t) { return t.item<double>(); };
        f.losses = StepLosses{val(f.total), val(l_ce), val(l_cc), val(ds_i), val(ds_t),
                              val(l_dcc),   val(l_pt), val(l_uce), val(f.varnet_loss)};
        if (!std::isfinite(f.losses.total) || !std::isfinite(f.losses.varnet)) {
            throw NumericalError("non-finite loss at epoch " + std::to_string(epoch_) + ": " + f.losses.to_json().dump());
        }
        return f;
    }

    /// Augments a clean batch in place using the trainer RNG.
    Batch augment(const Batch& clean, int64_t* skipped = nullptr) {
        Batch b;
        b.y = clean.y;
        b.x_img = data::augment_image_batch(clean.x_img, hyper_.image_aug, rng_);
        b.x_tab = data::augment_tabular_batch(clean.x_tab, schema_, hyper_.tabular_replace, pool_, rng_, skipped);
        if (clean.u_img.defined() && uses_unlabeled_student()) {
            b.u_img = data::augment_image_batch(clean.u_img, hyper_.image_aug, rng_);
            b.u_tab = data::augment_tabular_batch(clean.u_tab, schema_, hyper_.tabular_replace, pool_, rng_, skipped);
        }
        return b;
    }

    /// One optimisation step: targets, augmentation, losses, Adam, varnet
    /// update, EMA, prototype accumulation.
    StepLosses train_step(const Batch& clean, int64_t* skipped = nullptr) {
        std::optional<Targets> targets;
        if (uses_teacher_targets()) targets = make_targets(clean);
        auto batch = augment(clean, skipped);
        auto f = compute_losses(batch, targets ? &*targets : nullptr);

        opt_->zero_grad();
        var_opt_->zero_grad();
        (f.total + f.varnet_loss).backward();
        if (hyper_.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(student_->parameters(), hyper_.grad_clip);
        opt_->step();
        if (hyper_.gamma > 0.0) var_opt_->step();
        ema_update(*teacher_, *student_, hyper_.m);

        if (targets) {
            const auto nl = clean.y.size(0);
            protos_.accumulate(targets->emb_l, clean.y, torch::ones({nl}, torch::kFloat64));
            protos_.accumulate(targets->emb_u, targets->pseudo, targets->confident);
        }
        return f.losses;
    }

    void set_pool(const data::TabularValuePool& pool) { pool_ = pool; }

    /// Student f^m probabilities on clean inputs.
    torch::Tensor predict(const torch::Tensor& images, const torch::Tensor& tabular) {
        torch::NoGradGuard guard;
        std::vector<torch::Tensor> parts;
        const auto n = images.size(0);
        for (int64_t s = 0; s < n; s += hyper_.eval_batch) {
            const auto e = std::min(n, s + hyper_.eval_batch);
            parts.push_back(student_(images.slice(0, s, e), tabular.slice(0, s, e)).prob_m());
        }
        if (parts.empty()) return torch::zeros({0, mcfg_.classes});
        return torch::cat(parts);
    }

    torch::Tensor predict(const data::SampleSet& set) { return predict(set.images(), set.tabular()); }

    double evaluate(const data::SampleSet& set, Metric metric) {
        auto truth = set.truth();
        if ((truth < 0).any().item<bool>()) throw DataError("evaluate: dataset has samples without labels");
        return score(metric, predict(set), truth);
    }

    /// Teacher pass over an unlabeled set with known truth.
    Diagnostics diagnostics(const data::SampleSet& unlabeled) {
        torch::NoGradGuard guard;
        Diagnostics d;
        const auto n = unlabeled.size();
        if (n == 0) return d;
        std::vector<torch::Tensor> pm, pi, pt, emb;
        for (int64_t s = 0; s < n; s += hyper_.eval_batch) {
            const auto e = std::min(n, s + hyper_.eval_batch);
            auto o = teacher_(unlabeled.images().slice(0, s, e), unlabeled.tabular().slice(0, s, e));
            pm.push_back(o.prob_m());
            pi.push_back(o.prob_i());
            pt.push_back(o.prob_t());
            emb.push_back(o.embedding);
        }
        auto p_m = torch::cat(pm), p_i = torch::cat(pi), p_t = torch::cat(pt), v = torch::cat(emb);
        auto cases = method::determine_cases(p_m, p_i, p_t);
        auto p = method::make_pseudo_labels(cases, p_m, p_i, p_t);
        torch::Tensor q;
        auto p_bar = p, p_bar_m = p_m;
        if (protos_.complete()) {
            q = method::prototype_similarity(v, protos_.prototypes());
            if (hyper_.r < 1.0) {
                auto sm = method::smooth(p, p_m, q, hyper_.r);
                p_bar = sm.p_bar;
                p_bar_m = sm.p_bar_m;
            }
        }
        auto truth = unlabeled.truth();
        auto confident = std::get<0>(p_bar_m.max(1)).ge(hyper_.tau);
        const auto n_conf = confident.sum().item<int64_t>();
        auto correct = p_bar.argmax(1).eq(truth);
        d.confident_ratio = static_cast<double>(n_conf) / static_cast<double>(n);
        d.unlabeled_accuracy = correct.to(torch::kFloat64).mean().item<double>();
        if (n_conf > 0) {
            d.pl_accuracy = correct.logical_and(confident).sum().item<double>() / static_cast<double>(n_conf);
        }
        if (q.defined()) {
            auto q_correct = q.argmax(1).eq(truth);
            d.q_accuracy_all = q_correct.to(torch::kFloat64).mean().item<double>();
            if (n_conf > 0) {
                d.q_accuracy_confident = q_correct.logical_and(confident).sum().item<double>() / static_cast<double>(n_conf);
            }
        }
        for (int64_t c = 0; c < 4; ++c) {
            d.case_ratios[static_cast<size_t>(c)] = cases.eq(c).sum().item<double>() / static_cast<double>(n);
        }
        return d;
    }

    /// Epoch loop with validation, early stopping, best/last checkpoints.
    FitResult fit(const data::SampleSet& labeled, const data::SampleSet& unlabeled, const data::SampleSet& val,
                  const FitOptions& options = {}) {
        if (labeled.empty()) throw ConfigError("fit: labeled set is empty");
        if (labeled.tabular_width() != schema_.size()) throw DataError("fit: tabular width does not match schema");
        if ((labeled.labels() < 0).any().item<bool>()) throw DataError("fit: labeled set contains unlabeled samples");
        if (labeled.labels().max().item<int64_t>() >= mcfg_.classes) throw DataError("fit: label exceeds class count");
        pool_ = data::TabularValuePool::from({&labeled, &unlabeled});
        if (!iterator_) {
            iterator_ = std::make_unique<data::BatchIterator>(labeled, unlabeled, hyper_.batch_size, hyper_.mu,
                                                              hyper_.seed + 1);
            if (pending_iterator_) iterator_->restore(*pending_iterator_);
            pending_iterator_.reset();
        }
        const bool has_truth = !unlabeled.empty() && !(unlabeled.truth() < 0).any().item<bool>();
        FitResult result;
        result.history = history_;
        result.best_val = best_val_;
        result.best_epoch = best_epoch_;

        std::ofstream log;
        if (options.out_dir) {
            fs::create_directories(*options.out_dir);
            rewrite_log(*options.out_dir / "metrics.jsonl", options.overrides);
            log.open(*options.out_dir / "metrics.jsonl", std::ios::app);
        }

        while (epoch_ < hyper_.max_epochs) {
            EpochRecord rec;
            rec.epoch = epoch_;
            rec.pseudo_labeling = pseudo_labeling_active();
            StepLosses sum;
            int64_t steps = 0;
            for (const auto& [li, ui] : iterator_->epoch_indices()) {
                Batch b;
                auto lt = torch::tensor(li, torch::kInt64);
                b.x_img = labeled.images().index_select(0, lt);
                b.x_tab = labeled.tabular().index_select(0, lt);
                b.y = labeled.labels().index_select(0, lt);
                if (uses_unlabeled_student()) {
                    auto ut = torch::tensor(ui, torch::kInt64);
                    b.u_img = unlabeled.images().index_select(0, ut);
                    b.u_tab = unlabeled.tabular().index_select(0, ut);
                }
                sum += train_step(b, &rec.skipped_tabular);
                ++steps;
            }
            rec.losses = sum.scaled(steps > 0 ? 1.0 / static_cast<double>(steps) : 0.0);
            if (rec.pseudo_labeling) {
                protos_.finalize();
                const auto& lc = protos_.last_counts();
                rec.prototype_counts.assign(lc.data_ptr<double>(), lc.data_ptr<double>() + lc.numel());
                auto norms = protos_.prototypes().norm(2, 1).contiguous();
                rec.prototype_norms.assign(norms.data_ptr<double>(), norms.data_ptr<double>() + norms.numel());
            }
            rec.val_metric = val.empty() ? 0.0 : evaluate(val, hyper_.metric);
            if (has_truth) rec.diag = diagnostics(unlabeled);
            ++epoch_;

            const bool improved = rec.val_metric > best_val_;
            if (improved) {
                best_val_ = rec.val_metric;
                best_epoch_ = rec.epoch;
                since_best_ = 0;
            } else {
                ++since_best_;
            }
            history_.push_back(rec);
            result.history.push_back(rec);
            result.best_val = best_val_;
            result.best_epoch = best_epoch_;
            if (log.is_open()) {
                log << to_json(rec, hyper_.metric, options.overrides).dump() << '\n';
                log.flush();
            }
            if (options.out_dir) {
                if (improved) save_checkpoint(*options.out_dir / "best.ckpt");
                save_checkpoint(*options.out_dir / "last.ckpt");
            }
            if (options.verbose) {
                std::printf("epoch %3lld  loss %.4f  val %.4f  conf %.3f  case1 %.3f\n", static_cast<long long>(rec.epoch),
                            rec.losses.total, rec.val_metric, rec.diag.confident_ratio, rec.diag.case_ratios[0]);
                std::fflush(stdout);
            }
            if (options.on_epoch) options.on_epoch(rec);
            if (!improved && since_best_ > hyper_.patience) {
                result.stopped_early = true;
                break;
            }
        }
        return result;
    }

    const std::vector<EpochRecord>& history() const { return history_; }
    double best_val() const { return best_val_; }

    // ---- checkpoints -------------------------------------------------------

    void save_checkpoint(const fs::path& path) const {
        torch::serialize::OutputArchive ar;
        ar.write("version", torch::tensor(kCheckpointVersion));
        ar.write("epoch", torch::tensor(epoch_));
        ar.write("best_val", torch::tensor(best_val_, torch::kFloat64));
        ar.write("best_epoch", torch::tensor(best_epoch_));
        ar.write("since_best", torch::tensor(since_best_));
        write_module(ar, "student", *student_);
        write_module(ar, "teacher", *teacher_);
        write_module(ar, "varnet_image", *var_i_);
        write_module(ar, "varnet_tabular", *var_t_);
        torch::serialize::OutputArchive opt_ar, var_ar;
        opt_->save(opt_ar);
        var_opt_->save(var_ar);
        ar.write("optimizer", opt_ar);
        ar.write("varnet_optimizer", var_ar);
        auto ps = protos_.state();
        for (size_t k = 0; k < ps.size(); ++k) ar.write("prototypes/" + std::to_string(k), ps[k]);
        std::ostringstream rs;
        rs << rng_;
        ar.write("rng", string_tensor(rs.str()));
        if (iterator_) {
            auto st = iterator_->state();
            ar.write("iterator/rng", string_tensor(st.rng));
            ar.write("iterator/order", torch::tensor(st.labeled_order, torch::kInt64));
            ar.write("iterator/cursor", torch::tensor(st.labeled_cursor));
        }
        json hist = json::array();
        for (const auto& r : history_) hist.push_back(to_json(r, hyper_.metric, {}));
        ar.write("history", string_tensor(hist.dump()));
        const auto tmp = path.string() + ".tmp";
        ar.save_to(tmp);
        fs::rename(tmp, path);
    }

    void load_checkpoint(const fs::path& path) {
        if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
        torch::serialize::InputArchive ar;
        try {
            ar.load_from(path.string());
        } catch (const c10::Error& e) {
            throw DataError("cannot read checkpoint " + path.string());
        }
        // Each entry gets a fresh tensor: reading into a live one would resize its storage.
        auto get = [&ar](const std::string& key) {
            torch::Tensor v;
            ar.read(key, v);
            return v;
        };
        if (get("version").item<int64_t>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
        epoch_ = get("epoch").item<int64_t>();
        best_val_ = get("best_val").item<double>();
        best_epoch_ = get("best_epoch").item<int64_t>();
        since_best_ = get("since_best").item<int64_t>();
        read_module(ar, "student", *student_);
        read_module(ar, "teacher", *teacher_);
        read_module(ar, "varnet_image", *var_i_);
        read_module(ar, "varnet_tabular", *var_t_);
        torch::serialize::InputArchive opt_ar, var_ar;
        ar.read("optimizer", opt_ar);
        ar.read("varnet_optimizer", var_ar);
        opt_->load(opt_ar);
        var_opt_->load(var_ar);
        std::vector<torch::Tensor> ps;
        for (int k = 0; k < 6; ++k) ps.push_back(get("prototypes/" + std::to_string(k)));
        protos_.restore(ps);
        std::istringstream rs(tensor_string(get("rng")));
        rs >> rng_;
        torch::Tensor it_rng;
        if (ar.try_read("iterator/rng", it_rng)) {
            data::BatchIteratorState st;
            st.rng = tensor_string(it_rng);
            auto order = get("iterator/order").contiguous();
            st.labeled_order.assign(order.data_ptr<int64_t>(), order.data_ptr<int64_t>() + order.numel());
            st.labeled_cursor = get("iterator/cursor").item<int64_t>();
            if (iterator_) iterator_->restore(st);
            else pending_iterator_ = st;
        }
        auto t = get("history");
        history_.clear();
        for (const auto& j : json::parse(tensor_string(t))) history_.push_back(record_from_json(j));
    }

    /// Student-only weights (enough for predict/evaluate).
    static void read_student(const fs::path& path, model::StilModel& student) {
        torch::serialize::InputArchive ar;
        try {
            ar.load_from(path.string());
        } catch (const c10::Error&) {
            throw DataError("cannot read checkpoint " + path.string());
        }
        read_module(ar, "student", *student);
    }

    static EpochRecord record_from_json(const json& j) {
        EpochRecord r;
        r.epoch = j.at("epoch").get<int64_t>();
        r.pseudo_labeling = j.value("pseudo_labeling", false);
        const auto& l = j.at("losses");
        r.losses = StepLosses{l.at("total"), l.at("ce"), l.at("cc"),  l.at("ds_i"),  l.at("ds_t"),
                              l.at("dcc"),   l.at("pt"), l.at("uce"), l.at("varnet")};
        r.val_metric = j.at("val_metric").get<double>();
        auto opt = [&](const char* k) -> std::optional<double> {
            if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
            return j.at(k).get<double>();
        };
        r.diag.pl_accuracy = opt("pl_accuracy");
        r.diag.q_accuracy_confident = opt("q_accuracy_confident");
        r.diag.q_accuracy_all = opt("q_accuracy_all");
        r.diag.confident_ratio = j.value("confident_ratio", 0.0);
        r.diag.unlabeled_accuracy = j.value("unlabeled_accuracy", 0.0);
        if (j.contains("case_ratios")) r.diag.case_ratios = j.at("case_ratios").get<std::array<double, 4>>();
        r.prototype_counts = j.value("prototype_counts", std::vector<double>{});
        r.prototype_norms = j.value("prototype_norms", std::vector<double>{});
        r.skipped_tabular = j.value("skipped_tabular", int64_t{0});
        return r;
    }

private:
    static torch::Tensor string_tensor(const std::string& s) {
        auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
        std::copy(s.begin(), s.end(), t.data_ptr<uint8_t>());
        return t;
    }
    static std::string tensor_string(const torch::Tensor& t) {
        auto c = t.contiguous();
        const auto* p = c.data_ptr<uint8_t>();
        return std::string(p, p + c.numel());
    }
    static void write_module(torch::serialize::OutputArchive& ar, const std::string& prefix, const torch::nn::Module& m) {
        for (const auto& item : m.named_parameters(true)) ar.write(prefix + "/" + item.key(), item.value());
    }
    static void read_module(torch::serialize::InputArchive& ar, const std::string& prefix, torch::nn::Module& m) {
        torch::NoGradGuard guard;
        for (auto& item : m.named_parameters(true)) {
            torch::Tensor t;
            if (!ar.try_read(prefix + "/" + item.key(), t)) {
                throw DataError("checkpoint is missing parameter " + prefix + "/" + item.key());
            }
            if (t.sizes() != item.value().sizes()) {
                throw DataError("checkpoint parameter " + prefix + "/" + item.key() + " has a different shape");
            }
            item.value().copy_(t);
        }
    }

    // On resume, keep only the log lines up to the restored epoch.
    void rewrite_log(const fs::path& path, const std::vector<std::string>& overrides) const {
        std::ofstream out(path, std::ios::trunc);
        for (const auto& r : history_) out << to_json(r, hyper_.metric, overrides).dump() << '\n';
    }

    model::ModelConfig mcfg_;
    data::TabularSchema schema_;
    Hyper hyper_;
    data::Rng rng_;
    model::StilModel student_{nullptr}, teacher_{nullptr};
    model::VariationalNet var_i_{nullptr}, var_t_{nullptr};
    std::unique_ptr<torch::optim::Adam> opt_, var_opt_;
    method::PrototypeStore protos_;
    data::TabularValuePool pool_;
    std::unique_ptr<data::BatchIterator> iterator_;
    std::optional<data::BatchIteratorState> pending_iterator_;
    std::vector<EpochRecord> history_;
    double best_val_ = -std::numeric_limits<double>::infinity();
    int64_t best_epoch_ = -1;
    int64_t since_best_ = 0;
    int64_t epoch_ = 0;
};

}  // namespace stil::train
