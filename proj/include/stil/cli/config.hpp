#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stil/errors.hpp"
#include "stil/model/model.hpp"
#include "stil/synth/synthgen.hpp"
#include "stil/train/trainer.hpp"

namespace stil::cli {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "STIL_OUTPUT_ROOT";

// Everything a run needs, one flat key per field.
struct RunConfig {
    // paths
    std::string data_dir;
    std::string table_path, image_dir, schema_path, split_path;  // default: inside data_dir
    std::string out_dir = "runs/default";
    uint64_t seed = 0;

    train::Hyper hyper;
    model::EncoderConfig encoder;
    int64_t interaction_blocks = 1;
    int64_t projection_dim = model::kProjectionDim;
    model::Activation head_activation = model::Activation::relu;

    synth::SynthConfig synth;

    bool enable_dcc = true;
    bool enable_cgpl = true;
    bool enable_pgls = true;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
    }
}

inline int64_t parse_int(const std::string& key, const std::string& s) {
    try {
        size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + s + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("key '" + key + "': expected true|false, got '" + s + "'");
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct Field {
    std::string key;
    std::string doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline Field real(std::string key, std::string doc, std::function<double&(RunConfig&)> ref) {
    return {key, std::move(doc), [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
            [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

inline Field integer(std::string key, std::string doc, std::function<int64_t&(RunConfig&)> ref) {
    return {key, std::move(doc), [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
            [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_int(key, v); }};
}

inline Field unsigned_int(std::string key, std::string doc, std::function<uint64_t&(RunConfig&)> ref) {
    return {key, std::move(doc), [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
            [ref, key](RunConfig& c, const std::string& v) {
                const auto x = parse_int(key, v);
                if (x < 0) throw ConfigError("key '" + key + "' must be >= 0");
                ref(c) = static_cast<uint64_t>(x);
            }};
}

inline Field boolean(std::string key, std::string doc, std::function<bool&(RunConfig&)> ref) {
    return {key, std::move(doc), [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)) ? "true" : "false"; },
            [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); }};
}

inline Field text(std::string key, std::string doc, std::function<std::string&(RunConfig&)> ref) {
    return {key, std::move(doc), [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); },
            [ref](RunConfig& c, const std::string& v) { ref(c) = v; }};
}

}  // namespace detail

/// Every accepted key, in serialization order.
inline const std::vector<detail::Field>& fields() {
    using namespace detail;
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(text("data_dir", "dataset directory (table.csv, images/, schema.json, split.json)",
                         [](RunConfig& c) -> std::string& { return c.data_dir; }));
        f.push_back(text("table_path", "override for <data_dir>/table.csv",
                         [](RunConfig& c) -> std::string& { return c.table_path; }));
        f.push_back(text("image_dir", "override for <data_dir>/images",
                         [](RunConfig& c) -> std::string& { return c.image_dir; }));
        f.push_back(text("schema_path", "override for <data_dir>/schema.json",
                         [](RunConfig& c) -> std::string& { return c.schema_path; }));
        f.push_back(text("split_path", "override for <data_dir>/split.json",
                         [](RunConfig& c) -> std::string& { return c.split_path; }));
        f.push_back(text("out_dir", "output directory (relative paths resolve against $STIL_OUTPUT_ROOT)",
                         [](RunConfig& c) -> std::string& { return c.out_dir; }));
        f.push_back(unsigned_int("seed", "training seed", [](RunConfig& c) -> uint64_t& { return c.seed; }));

        f.push_back(integer("batch_size", "B, labeled batch size", [](RunConfig& c) -> int64_t& { return c.hyper.batch_size; }));
        f.push_back(integer("mu", "unlabeled/labeled batch ratio", [](RunConfig& c) -> int64_t& { return c.hyper.mu; }));
        f.push_back(real("alpha", "weight of L_ce", [](RunConfig& c) -> double& { return c.hyper.alpha; }));
        f.push_back(real("beta", "weight of L_cc", [](RunConfig& c) -> double& { return c.hyper.beta; }));
        f.push_back(real("gamma", "weight of L_ds", [](RunConfig& c) -> double& { return c.hyper.gamma; }));
        f.push_back(real("lambda_p", "weight of L_pt", [](RunConfig& c) -> double& { return c.hyper.lambda_p; }));
        f.push_back(real("lambda_u", "weight of L_uce", [](RunConfig& c) -> double& { return c.hyper.lambda_u; }));
        f.push_back(real("tau", "confidence threshold", [](RunConfig& c) -> double& { return c.hyper.tau; }));
        f.push_back(real("r", "smoothing balance (1 = no smoothing)", [](RunConfig& c) -> double& { return c.hyper.r; }));
        f.push_back(real("m", "EMA momentum of the teacher", [](RunConfig& c) -> double& { return c.hyper.m; }));
        f.push_back(real("kappa", "temperature of Psi", [](RunConfig& c) -> double& { return c.hyper.kappa; }));
        f.push_back(real("lr", "Adam learning rate", [](RunConfig& c) -> double& { return c.hyper.lr; }));
        f.push_back(real("varnet_lr", "learning rate of q_theta", [](RunConfig& c) -> double& { return c.hyper.varnet_lr; }));
        f.push_back(integer("varnet_hidden", "hidden width of q_theta",
                            [](RunConfig& c) -> int64_t& { return c.hyper.varnet_hidden; }));
        f.push_back(real("grad_clip", "max global grad norm, 0 = off", [](RunConfig& c) -> double& { return c.hyper.grad_clip; }));
        f.push_back(integer("start_pl_epoch", "first pseudo-labeling epoch",
                            [](RunConfig& c) -> int64_t& { return c.hyper.start_pl_epoch; }));
        f.push_back(integer("max_epochs", "epoch budget", [](RunConfig& c) -> int64_t& { return c.hyper.max_epochs; }));
        f.push_back(integer("patience", "early-stopping patience (epochs)",
                            [](RunConfig& c) -> int64_t& { return c.hyper.patience; }));
        f.push_back({"metric", "validation metric: accuracy|auc",
                     [](const RunConfig& c) { return train::to_string(c.hyper.metric); },
                     [](RunConfig& c, const std::string& v) { c.hyper.metric = train::parse_metric(v); }});
        f.push_back(real("tabular_replace", "fraction of tabular entries replaced",
                         [](RunConfig& c) -> double& { return c.hyper.tabular_replace; }));
        f.push_back(real("image_aug_strength", "0 disables image augmentation",
                         [](RunConfig& c) -> double& { return c.hyper.image_aug.strength; }));
        f.push_back(real("flip_prob", "horizontal flip probability",
                         [](RunConfig& c) -> double& { return c.hyper.image_aug.flip_prob; }));
        f.push_back(real("max_rotation_deg", "rotation range",
                         [](RunConfig& c) -> double& { return c.hyper.image_aug.max_rotation_deg; }));
        f.push_back(real("min_crop_area", "smallest crop area fraction",
                         [](RunConfig& c) -> double& { return c.hyper.image_aug.min_crop_area; }));
        f.push_back(real("noise_std", "Gaussian pixel noise",
                         [](RunConfig& c) -> double& { return c.hyper.image_aug.noise_std; }));
        f.push_back(integer("eval_batch", "inference batch size", [](RunConfig& c) -> int64_t& { return c.hyper.eval_batch; }));

        f.push_back(integer("dim", "token dimension D", [](RunConfig& c) -> int64_t& { return c.encoder.dim; }));
        f.push_back(integer("heads", "attention heads", [](RunConfig& c) -> int64_t& { return c.encoder.heads; }));
        f.push_back({"stage_channels", "image encoder channels per stage, comma separated",
                     [](const RunConfig& c) {
                         std::string s;
                         for (size_t k = 0; k < c.encoder.stage_channels.size(); ++k) {
                             s += (k ? "," : "") + std::to_string(c.encoder.stage_channels[k]);
                         }
                         return s;
                     },
                     [](RunConfig& c, const std::string& v) {
                         std::vector<int64_t> out;
                         std::stringstream ss(v);
                         std::string item;
                         while (std::getline(ss, item, ',')) out.push_back(parse_int("stage_channels", trim(item)));
                         if (out.empty()) throw ConfigError("key 'stage_channels': empty list");
                         c.encoder.stage_channels = out;
                     }});
        f.push_back({"image_token_projection", "positional|shared",
                     [](const RunConfig& c) { return model::to_string(c.encoder.token_projection); },
                     [](RunConfig& c, const std::string& v) { c.encoder.token_projection = model::parse_token_projection(v); }});
        f.push_back(integer("tabular_layers", "transformer layers in the tabular encoder",
                            [](RunConfig& c) -> int64_t& { return c.encoder.tabular_layers; }));
        f.push_back(integer("ffn_mult", "feed-forward width multiple of D",
                            [](RunConfig& c) -> int64_t& { return c.encoder.ffn_mult; }));
        f.push_back(integer("interaction_blocks", "stacked interaction blocks",
                            [](RunConfig& c) -> int64_t& { return c.interaction_blocks; }));
        f.push_back(integer("projection_dim", "output size of g^i, g^t, h",
                            [](RunConfig& c) -> int64_t& { return c.projection_dim; }));
        f.push_back({"head_activation", "relu|gelu", [](const RunConfig& c) { return model::to_string(c.head_activation); },
                     [](RunConfig& c, const std::string& v) { c.head_activation = model::parse_activation(v); }});

        f.push_back(integer("synth_classes", "classes", [](RunConfig& c) -> int64_t& { return c.synth.classes; }));
        f.push_back(integer("synth_d_sh", "shared latent dim", [](RunConfig& c) -> int64_t& { return c.synth.d_sh; }));
        f.push_back(integer("synth_d_im", "image-only latent dim", [](RunConfig& c) -> int64_t& { return c.synth.d_im; }));
        f.push_back(integer("synth_d_tb", "tabular-only latent dim", [](RunConfig& c) -> int64_t& { return c.synth.d_tb; }));
        f.push_back(real("synth_w_sh", "shared class separation", [](RunConfig& c) -> double& { return c.synth.w_sh; }));
        f.push_back(real("synth_w_im", "image-only class separation", [](RunConfig& c) -> double& { return c.synth.w_im; }));
        f.push_back(real("synth_w_tb", "tabular-only class separation", [](RunConfig& c) -> double& { return c.synth.w_tb; }));
        f.push_back(integer("synth_n_train", "train samples", [](RunConfig& c) -> int64_t& { return c.synth.n_train; }));
        f.push_back(integer("synth_n_val", "validation samples", [](RunConfig& c) -> int64_t& { return c.synth.n_val; }));
        f.push_back(integer("synth_n_test", "test samples", [](RunConfig& c) -> int64_t& { return c.synth.n_test; }));
        f.push_back(real("synth_label_fraction", "labeled fraction of train",
                         [](RunConfig& c) -> double& { return c.synth.label_fraction; }));
        f.push_back(real("synth_noise_sigma", "pixel noise", [](RunConfig& c) -> double& { return c.synth.noise_sigma; }));
        f.push_back(integer("synth_image_size", "H = W", [](RunConfig& c) -> int64_t& { return c.synth.image_size; }));
        f.push_back(integer("synth_tabular_columns", "L^t", [](RunConfig& c) -> int64_t& { return c.synth.tabular_columns; }));
        f.push_back(integer("synth_categorical_columns", "quartile-binned columns",
                            [](RunConfig& c) -> int64_t& { return c.synth.categorical_columns; }));
        f.push_back(real("synth_image_smoothing", "blur of the image map (pixels)",
                         [](RunConfig& c) -> double& { return c.synth.image_smoothing; }));
        f.push_back(boolean("synth_image_symmetric", "mirror-symmetric image map",
                            [](RunConfig& c) -> bool& { return c.synth.image_symmetric; }));
        f.push_back(real("synth_image_scale", "pixel = 0.5 + value / scale",
                         [](RunConfig& c) -> double& { return c.synth.image_scale; }));
        f.push_back(unsigned_int("synth_seed", "generator seed", [](RunConfig& c) -> uint64_t& { return c.synth.seed; }));

        f.push_back(boolean("enable_dcc", "false forces beta = gamma = 0",
                            [](RunConfig& c) -> bool& { return c.enable_dcc; }));
        f.push_back(boolean("enable_cgpl", "false forces lambda_u = 0",
                            [](RunConfig& c) -> bool& { return c.enable_cgpl; }));
        f.push_back(boolean("enable_pgls", "false forces r = 1, lambda_p = 0",
                            [](RunConfig& c) -> bool& { return c.enable_pgls; }));
        return f;
    }();
    return table;
}

inline const detail::Field* find_field(const std::string& key) {
    for (const auto& f : fields()) {
        if (f.key == key) return &f;
    }
    return nullptr;
}

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto* f = find_field(key);
    if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
    f->set(cfg, value);
}

/// key=value lines; '#' starts a comment; blank lines ignored.
inline void apply_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        try {
            set_key(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    apply_text(cfg, text);
    return cfg;
}

inline RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg;
    apply_text(cfg, ss.str(), path.string());
    return cfg;
}

inline std::string serialize(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
    return out;
}

/// Applies the ablation flags; returns a description of every forced value.
inline std::vector<std::string> apply_ablations(RunConfig& cfg) {
    std::vector<std::string> notes;
    auto force = [&](const char* flag, const char* key, double& slot, double value) {
        if (slot != value) {
            notes.push_back(std::string(flag) + "=false: " + key + " " + detail::fmt_double(slot) + " -> " +
                            detail::fmt_double(value));
        }
        slot = value;
    };
    if (!cfg.enable_dcc) {
        force("enable_dcc", "beta", cfg.hyper.beta, 0.0);
        force("enable_dcc", "gamma", cfg.hyper.gamma, 0.0);
    }
    if (!cfg.enable_cgpl) force("enable_cgpl", "lambda_u", cfg.hyper.lambda_u, 0.0);
    if (!cfg.enable_pgls) {
        force("enable_pgls", "r", cfg.hyper.r, 1.0);
        force("enable_pgls", "lambda_p", cfg.hyper.lambda_p, 0.0);
    }
    return notes;
}

inline void set_ablation(RunConfig& cfg, const std::string& component) {
    if (component == "dcc") cfg.enable_dcc = false;
    else if (component == "cgpl") cfg.enable_cgpl = false;
    else if (component == "pgls") cfg.enable_pgls = false;
    else throw ConfigError("unknown ablation '" + component + "' (expected dcc|cgpl|pgls)");
}

/// Hyperparameters with seed and ablations resolved.
inline train::Hyper resolved_hyper(const RunConfig& cfg, std::vector<std::string>* overrides = nullptr) {
    RunConfig c = cfg;
    auto notes = apply_ablations(c);
    if (overrides) *overrides = notes;
    c.hyper.seed = c.seed;
    c.hyper.validate();
    return c.hyper;
}

inline model::ModelConfig model_config(const RunConfig& cfg, int64_t classes, int64_t image_channels, int64_t image_size) {
    model::ModelConfig m;
    m.encoder = cfg.encoder;
    m.encoder.image_channels = image_channels;
    m.encoder.image_size = image_size;
    m.classes = classes;
    m.interaction_blocks = cfg.interaction_blocks;
    m.projection_dim = cfg.projection_dim;
    m.head_activation = cfg.head_activation;
    m.encoder.validate();
    return m;
}

inline fs::path resolve_output(const std::string& dir) {
    fs::path p(dir);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') return fs::path(root) / p;
    return p;
}

struct DataPaths {
    fs::path table, images, schema, split;
};

inline DataPaths data_paths(const RunConfig& cfg) {
    const fs::path base(cfg.data_dir);
    auto pick = [&](const std::string& explicit_path, const char* fallback) {
        if (!explicit_path.empty()) return fs::path(explicit_path);
        if (cfg.data_dir.empty()) throw ConfigError("data_dir (or explicit " + std::string(fallback) + " path) is required");
        return base / fallback;
    };
    return {pick(cfg.table_path, "table.csv"), pick(cfg.image_dir, "images"), pick(cfg.schema_path, "schema.json"),
            pick(cfg.split_path, "split.json")};
}

}  // namespace stil::cli
