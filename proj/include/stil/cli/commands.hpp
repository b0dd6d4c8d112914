#pragma once

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stil/cli/config.hpp"
#include "stil/data/dataset_io.hpp"
#include "stil/data/split.hpp"
#include "stil/errors.hpp"
#include "stil/synth/synthgen.hpp"
#include "stil/train/trainer.hpp"

namespace stil::cli {

using nlohmann::json;

inline constexpr const char* kConfigFile = "config.txt";
inline constexpr const char* kLockFile = ".lock";

/// Exclusive per-directory lock; a lock left by a dead process is reclaimed.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / kLockFile) {
        fs::create_directories(dir);
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const auto pid = std::to_string(::getpid()) + "\n";
                [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
                ::close(fd);
                held_ = true;
                return;
            }
            if (errno != EEXIST) throw ConfigError("cannot create lock " + path_.string());
            if (!stale()) break;
            fs::remove(path_);
        }
        throw ConfigError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;
    ~RunLock() {
        if (held_) {
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }

private:
    bool stale() const {
        std::ifstream in(path_);
        long pid = 0;
        if (!(in >> pid) || pid <= 0) return true;
        return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
    }

    fs::path path_;
    bool held_ = false;
};

inline data::DatasetSplits load_data(const RunConfig& cfg) {
    const auto p = data_paths(cfg);
    for (const auto& f : {p.table, p.schema, p.split}) {
        if (!fs::exists(f)) throw DataError("missing dataset file " + f.string());
    }
    if (!fs::is_directory(p.images)) throw DataError("missing image directory " + p.images.string());
    return data::load_dataset(p.table, p.images, data::load_schema(p.schema), data::SplitManifest::load(p.split.string()));
}

inline model::ModelConfig model_config_for(const RunConfig& cfg, const data::DatasetSplits& d) {
    const auto& ref = d.train_labeled.empty() ? d.train_unlabeled : d.train_labeled;
    if (ref.empty()) throw DataError("training split is empty");
    const auto img = ref.images();
    if (img.size(2) != img.size(3)) throw DataError("images must be square");
    return model_config(cfg, d.num_classes, img.size(1), img.size(2));
}

/// 64-bit FNV-1a of the file bytes, hex encoded.
inline std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    uint64_t h = 1469598103934665603ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

// ---- synth -------------------------------------------------------------------

inline json run_synth(const RunConfig& cfg, const fs::path& out_dir, bool force) {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
        if (!force) throw ConfigError(out_dir.string() + " is not empty; pass --force to overwrite");
        for (const char* f : {"images", "table.csv", "latents.csv", "schema.json", "split.json", "synth.json"}) {
            fs::remove_all(out_dir / f);
        }
    }
    const auto ds = synth::generate(cfg.synth);
    synth::write_dataset(ds, out_dir);
    json summary{{"out_dir", out_dir.string()},
                 {"n_train", ds.config.n_train},
                 {"n_labeled", ds.label_split.labeled_ids.size()},
                 {"n_val", ds.config.n_val},
                 {"n_test", ds.config.n_test},
                 {"classes", ds.config.classes},
                 {"reference_accuracy_test", synth::reference_accuracy(ds, "test")},
                 {"tabular_probe_accuracy_test", synth::tabular_probe_accuracy(ds, "test")}};
    std::ofstream(out_dir / "synth.json") << summary.dump(2) << '\n';
    return summary;
}

// ---- train -------------------------------------------------------------------

struct TrainOptions {
    bool force = false;
    bool resume = false;
    bool verbose = false;
};

struct TrainSummary {
    fs::path out_dir;
    train::FitResult fit;
    double test_metric = 0.0;
    json result;
};

/// Trains on in-memory splits and writes metrics.jsonl, checkpoints,
/// config.txt and result.json into `out_dir`.
inline TrainSummary train_on(const RunConfig& cfg, const data::DatasetSplits& data, const fs::path& out_dir,
                             const TrainOptions& opt) {
    std::vector<std::string> overrides;
    const auto hyper = resolved_hyper(cfg, &overrides);
    const auto mcfg = model_config_for(cfg, data);

    RunLock lock(out_dir);
    const auto cfg_text = serialize(cfg);
    const bool has_run = fs::exists(out_dir / "metrics.jsonl") || fs::exists(out_dir / "last.ckpt");
    if (has_run && !opt.force && !opt.resume) {
        throw ConfigError(out_dir.string() + " already contains a run; pass --resume to continue or --force to overwrite");
    }
    if (opt.force) {
        for (const char* f : {"metrics.jsonl", "best.ckpt", "last.ckpt", "result.json", kConfigFile}) {
            fs::remove(out_dir / f);
        }
    }
    train::Trainer trainer(mcfg, data.schema, hyper);
    if (opt.resume && fs::exists(out_dir / "last.ckpt")) {
        std::ifstream in(out_dir / kConfigFile);
        std::stringstream prev;
        prev << in.rdbuf();
        if (in && prev.str() != cfg_text) {
            throw ConfigError("--resume: configuration differs from the one stored in " + (out_dir / kConfigFile).string());
        }
        trainer.load_checkpoint(out_dir / "last.ckpt");
    }
    std::ofstream(out_dir / kConfigFile) << cfg_text;

    train::FitOptions fo;
    fo.out_dir = out_dir;
    fo.overrides = overrides;
    fo.verbose = opt.verbose;
    TrainSummary s;
    s.out_dir = out_dir;
    s.fit = trainer.fit(data.train_labeled, data.train_unlabeled, data.val, fo);

    if (fs::exists(out_dir / "best.ckpt")) train::Trainer::read_student(out_dir / "best.ckpt", trainer.student());
    if (!data.test.empty()) s.test_metric = trainer.evaluate(data.test, hyper.metric);
    s.result = {{"metric", train::to_string(hyper.metric)},
                {"best_epoch", s.fit.best_epoch},
                {"best_val", s.fit.best_val},
                {"test", s.test_metric},
                {"n_test", data.test.size()},
                {"epochs_run", static_cast<int64_t>(s.fit.history.size())},
                {"stopped_early", s.fit.stopped_early},
                {"overrides", overrides}};
    std::ofstream(out_dir / "result.json") << s.result.dump(2) << '\n';
    return s;
}

inline TrainSummary run_train(const RunConfig& cfg, const TrainOptions& opt) {
    const auto out_dir = resolve_output(cfg.out_dir);
    return train_on(cfg, load_data(cfg), out_dir, opt);
}

// ---- eval --------------------------------------------------------------------

inline json run_eval(const RunConfig& cfg, const fs::path& checkpoint, const std::string& split) {
    if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
    const auto data = load_data(cfg);
    const data::SampleSet* set = nullptr;
    if (split == "test") set = &data.test;
    else if (split == "val") set = &data.val;
    else throw ConfigError("unknown split '" + split + "' (expected test|val)");
    if (set->empty()) throw DataError("split '" + split + "' is empty");
    const auto hyper = resolved_hyper(cfg);
    const auto mcfg = model_config_for(cfg, data);
    torch::manual_seed(0);
    model::StilModel student(mcfg, data.schema);
    train::Trainer::read_student(checkpoint, student);
    student->eval();
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> parts;
    const auto n = set->size();
    for (int64_t s = 0; s < n; s += hyper.eval_batch) {
        const auto e = std::min(n, s + hyper.eval_batch);
        parts.push_back(student(set->images().slice(0, s, e), set->tabular().slice(0, s, e)).prob_m());
    }
    const double value = train::score(hyper.metric, torch::cat(parts), set->truth());
    return {{"metric", train::to_string(hyper.metric)},
            {"value", value},
            {"n_samples", n},
            {"checkpoint_hash", file_hash(checkpoint)}};
}

}  // namespace stil::cli
