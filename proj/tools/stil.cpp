#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "stil/cli/commands.hpp"
#include "stil/cli/config.hpp"
#include "stil/cli/diagnose.hpp"
#include "stil/errors.hpp"

namespace {

using stil::cli::RunConfig;

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::vector<std::string> ablate;
    std::string out;
    int64_t seed = -1;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("-c,--config", c.config_path, "key = value config file");
    app->add_option("--set", c.sets, "override one key: key=value (repeatable)");
    app->add_option("--ablate", c.ablate, "disable a component: dcc|cgpl|pgls (repeatable)");
    app->add_option("--seed", c.seed, "training seed");
    app->add_option("-o,--out", c.out, "output directory");
}

RunConfig build_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : stil::cli::load_config(c.config_path);
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw stil::ConfigError("--set expects key=value, got '" + kv + "'");
        stil::cli::set_key(cfg, stil::cli::detail::trim(kv.substr(0, eq)), stil::cli::detail::trim(kv.substr(eq + 1)));
    }
    for (const auto& a : c.ablate) stil::cli::set_ablation(cfg, a);
    if (c.seed >= 0) cfg.seed = static_cast<uint64_t>(c.seed);
    if (!c.out.empty()) cfg.out_dir = c.out;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"STiL: semi-supervised image-tabular classification"};
    app.require_subcommand(1);

    Common synth_c, train_c, eval_c;
    bool synth_force = false;
    auto* synth = app.add_subcommand("synth", "generate a synthetic image-tabular dataset");
    add_common(synth, synth_c);  // --seed selects the generator seed here
    synth->add_flag("--force", synth_force, "overwrite an existing dataset");

    stil::cli::TrainOptions topt;
    bool quiet = false;
    auto* train = app.add_subcommand("train", "train a model");
    add_common(train, train_c);
    train->add_flag("--force", topt.force, "discard an existing run in the output directory");
    train->add_flag("--resume", topt.resume, "continue from last.ckpt");
    train->add_flag("-q,--quiet", quiet, "no per-epoch output");

    std::string checkpoint, split = "test";
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, eval_c);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--split", split, "test|val");

    std::string run_dir, diag_out;
    auto* diagnose = app.add_subcommand("diagnose", "plot metrics.jsonl of a run");
    diagnose->add_option("--run", run_dir, "run directory (or metrics.jsonl)")->required();
    diagnose->add_option("-o,--out", diag_out, "figure directory (default <run>/figures)");

    auto* dump = app.add_subcommand("config", "print the resolved configuration");
    Common dump_c;
    add_common(dump, dump_c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) {
            auto cfg = build_config(synth_c);
            if (synth_c.seed >= 0) cfg.synth.seed = static_cast<uint64_t>(synth_c.seed);
            const auto dir = stil::cli::resolve_output(synth_c.out.empty() ? cfg.data_dir : synth_c.out);
            if (dir.empty()) throw stil::ConfigError("synth: pass --out or set data_dir");
            std::cout << stil::cli::run_synth(cfg, dir, synth_force).dump(2) << '\n';
        } else if (*train) {
            topt.verbose = !quiet;
            const auto s = stil::cli::run_train(build_config(train_c), topt);
            std::cout << s.result.dump(2) << '\n';
        } else if (*eval) {
            std::cout << stil::cli::run_eval(build_config(eval_c), checkpoint, split).dump(2) << '\n';
        } else if (*diagnose) {
            stil::cli::fs::path p(run_dir);
            const auto log_path = stil::cli::fs::is_directory(p) ? p / "metrics.jsonl" : p;
            const auto out = diag_out.empty() ? log_path.parent_path() / "figures" : stil::cli::fs::path(diag_out);
            const auto log = stil::cli::read_metrics(log_path);
            const auto rep = stil::cli::write_diagnostics(log, out);
            if (rep.skipped > 0) std::cerr << "warning: skipped " << rep.skipped << " malformed line(s) in " << log_path << '\n';
            for (const auto& f : rep.files) std::cout << f.string() << '\n';
        } else if (*dump) {
            std::cout << stil::cli::serialize(build_config(dump_c));
        }
    } catch (const stil::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const stil::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const stil::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 4;
    }
    return 0;
}
