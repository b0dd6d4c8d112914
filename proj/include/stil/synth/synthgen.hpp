#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "stil/data/csv.hpp"
#include "stil/data/dataset_io.hpp"
#include "stil/data/sample.hpp"
#include "stil/data/schema.hpp"
#include "stil/data/split.hpp"
#include "stil/errors.hpp"

namespace stil::synth {

namespace fs = std::filesystem;

// Latent blocks: shared (both modalities), image-only, tabular-only. Each
// block's class means sit on fixed unit directions scaled by its weight.
struct SynthConfig {
    int64_t classes = 4;
    int64_t d_sh = 4, d_im = 4, d_tb = 4;
    double w_sh = 1.5, w_im = 1.5, w_tb = 1.5;
    int64_t n_train = 2000, n_val = 500, n_test = 2000;
    double label_fraction = 0.05;
    double noise_sigma = 0.3;
    int64_t image_size = 32;
    int64_t tabular_columns = 12;
    int64_t categorical_columns = 4;  // leading columns, quartile-binned
    // Rendering of the image map: columns are Gaussian random fields blurred
    // with `image_smoothing` pixels and mirrored left-right when
    // `image_symmetric`, so flips and small warps keep the latent readable.
    double image_smoothing = 1.0;
    bool image_symmetric = true;
    double image_scale = 6.0;  // pixel = clip(0.5 + value / image_scale, 0, 1)
    uint64_t seed = 0;

    void validate() const {
        if (classes < 2) throw ConfigError("synth classes must be >= 2");
        if (d_sh < 0 || d_im < 0 || d_tb < 0 || d_sh + d_im == 0 || d_sh + d_tb == 0) {
            throw ConfigError("synth latent dims must be >= 0 and feed both modalities");
        }
        if (w_sh < 0 || w_im < 0 || w_tb < 0) throw ConfigError("synth weights must be >= 0");
        if (n_train <= 0 || n_val <= 0 || n_test <= 0) throw ConfigError("synth split sizes must be positive");
        if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("label_fraction must lie in (0,1]");
        if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
        if (image_size <= 0) throw ConfigError("image_size must be positive");
        if (tabular_columns <= 0 || categorical_columns < 0 || categorical_columns > tabular_columns) {
            throw ConfigError("synth tabular column counts are inconsistent");
        }
        if (image_smoothing < 0) throw ConfigError("image_smoothing must be >= 0");
        if (!(image_scale > 0)) throw ConfigError("image_scale must be positive");
    }

    int64_t latent_dim() const { return d_sh + d_im + d_tb; }
};

struct SynthSplit {
    std::vector<std::string> ids;
    std::vector<int64_t> labels;
    torch::Tensor latents;  // [n, d_sh+d_im+d_tb] float64
    torch::Tensor images;   // [n,1,H,W] float32 in [0,1], 16-bit quantized
    torch::Tensor tabular;  // [n, L] float64; ordinal for categorical, raw value otherwise
};

struct SynthDataset {
    SynthConfig config;
    SynthSplit train, val, test;
    data::TabularSchema schema;  // continuous mean/std from the train split
    data::LabelSplit label_split;
};

namespace detail {

inline torch::Tensor gaussian_matrix(int64_t rows, int64_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    auto m = torch::empty({rows, cols}, torch::kFloat64);
    auto* p = m.data_ptr<double>();
    for (int64_t k = 0; k < rows * cols; ++k) p[k] = g(rng);
    return m;
}

inline torch::Tensor unit_rows(torch::Tensor m) {
    return m / m.norm(2, 1, true).clamp_min(1e-12);
}

// Separable Gaussian blur of each [H,W] map in a [K,H,W] stack (reflect padding).
inline torch::Tensor blur(const torch::Tensor& maps, double sigma) {
    if (sigma <= 0.0) return maps;
    const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    auto offs = torch::arange(-radius, radius + 1, torch::kFloat64);
    auto kernel = torch::exp(-0.5 * (offs / sigma).pow(2));
    kernel = kernel / kernel.sum();
    namespace F = torch::nn::functional;
    auto x = maps.unsqueeze(1);  // [K,1,H,W]
    x = F::pad(x, F::PadFuncOptions({radius, radius, 0, 0}).mode(torch::kReflect));
    x = F::conv2d(x, kernel.view({1, 1, 1, -1}));
    x = F::pad(x, F::PadFuncOptions({0, 0, radius, radius}).mode(torch::kReflect));
    x = F::conv2d(x, kernel.view({1, 1, -1, 1}));
    return x.squeeze(1);
}

}  // namespace detail

/// Fixed generative maps drawn once from the seed.
struct SynthMaps {
    std::array<torch::Tensor, 3> means;  // per block [C, d_b], unit rows
    torch::Tensor image_map;             // [H*W, d_sh+d_im]
    torch::Tensor tabular_map;           // [L, d_sh+d_tb]
};

inline SynthMaps make_maps(const SynthConfig& cfg, std::mt19937_64& rng) {
    SynthMaps maps;
    const std::array<int64_t, 3> dims{cfg.d_sh, cfg.d_im, cfg.d_tb};
    for (size_t b = 0; b < 3; ++b) {
        maps.means[b] = dims[b] > 0 ? detail::unit_rows(detail::gaussian_matrix(cfg.classes, dims[b], rng))
                                    : torch::zeros({cfg.classes, 0}, torch::kFloat64);
    }
    const auto h = cfg.image_size;
    const auto ki = cfg.d_sh + cfg.d_im;
    const auto kt = cfg.d_sh + cfg.d_tb;
    auto fields = detail::gaussian_matrix(ki, h * h, rng).view({ki, h, h});
    if (cfg.image_symmetric) fields = (fields + fields.flip({2})) / std::sqrt(2.0);
    fields = detail::blur(fields, cfg.image_smoothing);
    // Every column gets the same energy so no latent dominates the pixels.
    auto flat = fields.reshape({ki, h * h});
    flat = flat / flat.std(1, true, true).clamp_min(1e-12);
    maps.image_map = (flat / std::sqrt(static_cast<double>(ki))).t().contiguous();
    maps.tabular_map = detail::gaussian_matrix(cfg.tabular_columns, kt, rng) / std::sqrt(static_cast<double>(kt));
    return maps;
}

inline SynthSplit draw_split(const SynthConfig& cfg, const SynthMaps& maps, int64_t n, const std::string& prefix,
                             std::mt19937_64& rng) {
    SynthSplit s;
    // Balanced labels: each class ceil(n/C) times, truncated, shuffled.
    const auto per = (n + cfg.classes - 1) / cfg.classes;
    for (int64_t c = 0; c < cfg.classes; ++c) {
        for (int64_t k = 0; k < per; ++k) s.labels.push_back(c);
    }
    s.labels.resize(static_cast<size_t>(n));
    std::shuffle(s.labels.begin(), s.labels.end(), rng);
    for (int64_t i = 0; i < n; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s_%05lld", prefix.c_str(), static_cast<long long>(i));
        s.ids.emplace_back(buf);
    }
    auto y = torch::tensor(s.labels, torch::kInt64);
    const std::array<double, 3> w{cfg.w_sh, cfg.w_im, cfg.w_tb};
    std::vector<torch::Tensor> blocks;
    for (size_t b = 0; b < 3; ++b) {
        const auto d = maps.means[b].size(1);
        blocks.push_back(w[b] * maps.means[b].index_select(0, y) + detail::gaussian_matrix(n, d, rng));
    }
    s.latents = torch::cat(blocks, 1);
    auto img_lat = torch::cat({blocks[0], blocks[1]}, 1);
    auto tab_lat = torch::cat({blocks[0], blocks[2]}, 1);
    const auto h = cfg.image_size;
    auto pixels = img_lat.matmul(maps.image_map.t()) + cfg.noise_sigma * detail::gaussian_matrix(n, h * h, rng);
    pixels = (0.5 + pixels / cfg.image_scale).clamp(0.0, 1.0);
    pixels = (pixels * 65535.0).round() / 65535.0;  // what a 16-bit PNG round-trip stores
    s.images = pixels.view({n, 1, h, h}).to(torch::kFloat32);
    s.tabular = tab_lat.matmul(maps.tabular_map.t());
    return s;
}

/// Quartile edges (type-7 quantiles) of each column over the train split.
inline std::vector<std::array<double, 3>> quartile_edges(const torch::Tensor& values, int64_t columns) {
    std::vector<std::array<double, 3>> edges;
    auto probs = torch::tensor({0.25, 0.5, 0.75}, torch::kFloat64);
    for (int64_t j = 0; j < columns; ++j) {
        auto q = torch::quantile(values.select(1, j), probs).contiguous();
        edges.push_back({q[0].item<double>(), q[1].item<double>(), q[2].item<double>()});
    }
    return edges;
}

inline void discretize(torch::Tensor& tab, const std::vector<std::array<double, 3>>& edges) {
    auto a = tab.accessor<double, 2>();
    for (int64_t i = 0; i < tab.size(0); ++i) {
        for (size_t j = 0; j < edges.size(); ++j) {
            const double v = a[i][static_cast<int64_t>(j)];
            // searchsorted(left): number of edges strictly below v
            a[i][static_cast<int64_t>(j)] = static_cast<double>(std::lower_bound(edges[j].begin(), edges[j].end(), v) -
                                                                edges[j].begin());
        }
    }
}

inline SynthDataset generate(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const auto maps = make_maps(cfg, rng);
    SynthDataset ds;
    ds.config = cfg;
    ds.train = draw_split(cfg, maps, cfg.n_train, "train", rng);
    ds.val = draw_split(cfg, maps, cfg.n_val, "val", rng);
    ds.test = draw_split(cfg, maps, cfg.n_test, "test", rng);
    const auto edges = quartile_edges(ds.train.tabular, cfg.categorical_columns);
    for (auto* s : {&ds.train, &ds.val, &ds.test}) discretize(s->tabular, edges);

    std::vector<data::ColumnSpec> cols;
    for (int64_t j = 0; j < cfg.tabular_columns; ++j) {
        data::ColumnSpec c;
        const bool cat = j < cfg.categorical_columns;
        c.name = (cat ? "cat" : "num") + std::to_string(j);
        c.kind = cat ? data::ColumnKind::categorical : data::ColumnKind::continuous;
        if (cat) {
            c.cardinality = 4;
        } else {
            auto col = ds.train.tabular.select(1, j);
            c.mean = col.mean().item<double>();
            const double sd = col.std(false).item<double>();
            c.std = sd > 0 ? sd : 1.0;
        }
        cols.push_back(c);
    }
    ds.schema = data::TabularSchema(cols);
    ds.label_split = data::make_label_split(ds.train.ids, ds.train.labels, cfg.label_fraction, cfg.seed + 17);
    return ds;
}

inline data::SplitManifest manifest(const SynthDataset& ds) {
    data::SplitManifest m;
    m.seed = ds.config.seed + 17;
    m.label_fraction = ds.config.label_fraction;
    m.labeled_ids = ds.label_split.labeled_ids;
    m.unlabeled_ids = ds.label_split.unlabeled_ids;
    m.val_ids = ds.val.ids;
    m.test_ids = ds.test.ids;
    return m;
}

/// The splits exactly as load_dataset() would produce them from disk.
inline data::DatasetSplits to_splits(const SynthDataset& ds) {
    std::unordered_map<std::string, int64_t> index;
    for (size_t i = 0; i < ds.train.ids.size(); ++i) index[ds.train.ids[i]] = static_cast<int64_t>(i);
    auto encode = [&](const SynthSplit& s, const std::vector<int64_t>& rows, bool labeled) {
        std::vector<data::MultimodalSample> out;
        for (auto i : rows) {
            data::MultimodalSample m;
            m.id = s.ids[static_cast<size_t>(i)];
            m.image = s.images[i];
            for (int64_t j = 0; j < ds.schema.size(); ++j) {
                const double v = s.tabular[i][j].item<double>();
                m.tabular.push_back(static_cast<float>(ds.schema[j].is_categorical() ? v : ds.schema.standardize(j, v)));
            }
            m.truth = s.labels[static_cast<size_t>(i)];
            if (labeled) m.label = m.truth;
            out.push_back(std::move(m));
        }
        return data::SampleSet::from_samples(out);
    };
    auto rows_of = [&](const std::vector<std::string>& ids) {
        std::vector<int64_t> r;
        for (const auto& id : ids) r.push_back(index.at(id));
        return r;
    };
    auto all = [](const SynthSplit& s) {
        std::vector<int64_t> r(s.ids.size());
        std::iota(r.begin(), r.end(), 0);
        return r;
    };
    data::DatasetSplits out;
    out.train_labeled = encode(ds.train, rows_of(ds.label_split.labeled_ids), true);
    out.train_unlabeled = encode(ds.train, rows_of(ds.label_split.unlabeled_ids), false);
    out.val = encode(ds.val, all(ds.val), false);
    out.test = encode(ds.test, all(ds.test), false);
    out.schema = ds.schema;
    out.num_classes = ds.config.classes;
    return out;
}

/// Writes table.csv, images/<id>.png, schema.json, split.json and latents.csv.
inline void write_dataset(const SynthDataset& ds, const fs::path& dir) {
    fs::create_directories(dir / "images");
    data::CsvTable table;
    table.header = {"id", "label"};
    for (const auto& c : ds.schema.columns()) table.header.push_back(c.name);
    data::CsvTable latents;
    latents.header = {"id", "split"};
    for (int64_t k = 0; k < ds.config.latent_dim(); ++k) latents.header.push_back("z" + std::to_string(k));
    auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto* s : {&ds.train, &ds.val, &ds.test}) {
        const std::string split = s == &ds.train ? "train" : s == &ds.val ? "val" : "test";
        for (size_t i = 0; i < s->ids.size(); ++i) {
            const auto row = static_cast<int64_t>(i);
            std::vector<std::string> fields{s->ids[i], std::to_string(s->labels[i])};
            for (int64_t j = 0; j < ds.schema.size(); ++j) {
                const double v = s->tabular[row][j].item<double>();
                fields.push_back(ds.schema[j].is_categorical() ? std::to_string(static_cast<int64_t>(v)) : fmt(v));
            }
            table.rows.push_back(std::move(fields));
            std::vector<std::string> lf{s->ids[i], split};
            for (int64_t k = 0; k < ds.config.latent_dim(); ++k) lf.push_back(fmt(s->latents[row][k].item<double>()));
            latents.rows.push_back(std::move(lf));
            data::write_image(dir / "images" / (s->ids[i] + data::kImageExtension), s->images[row]);
        }
    }
    data::write_csv((dir / "table.csv").string(), table);
    data::write_csv((dir / "latents.csv").string(), latents);
    auto schema = ds.schema;  // statistics are recomputed by the loader
    data::save_schema(dir / "schema.json", schema);
    manifest(ds).save((dir / "split.json").string());
}

/// Full-batch multinomial logistic regression (small L2) fit with L-BFGS.
/// Returns accuracy on (x_eval, y_eval). Features are standardized with the
/// training statistics.
inline double logistic_probe(const torch::Tensor& x_train, const torch::Tensor& y_train, const torch::Tensor& x_eval,
                             const torch::Tensor& y_eval, int64_t classes, double l2 = 1e-4) {
    auto xt = x_train.to(torch::kFloat64);
    auto mean = xt.mean(0, true);
    auto sd = xt.std(0, false, true).clamp_min(1e-12);
    xt = (xt - mean) / sd;
    auto xe = (x_eval.to(torch::kFloat64) - mean) / sd;
    auto w = torch::zeros({xt.size(1), classes}, torch::dtype(torch::kFloat64).requires_grad(true));
    auto b = torch::zeros({classes}, torch::dtype(torch::kFloat64).requires_grad(true));
    torch::optim::LBFGS opt({w, b}, torch::optim::LBFGSOptions(1.0).max_iter(500).line_search_fn("strong_wolfe"));
    auto y = y_train.to(torch::kInt64);
    auto closure = [&]() -> torch::Tensor {
        opt.zero_grad();
        auto loss = torch::nn::functional::cross_entropy(xt.matmul(w) + b, y) + l2 * w.pow(2).sum();
        loss.backward();
        return loss;
    };
    for (int k = 0; k < 4; ++k) opt.step(closure);
    torch::NoGradGuard guard;
    return (xe.matmul(w) + b).argmax(1).eq(y_eval.to(torch::kInt64)).to(torch::kFloat64).mean().item<double>();
}

/// Approximate Bayes reference: logistic model on the true latents of the
/// full train split, evaluated on the requested split ("train"|"val"|"test").
inline double reference_accuracy(const SynthDataset& ds, const std::string& split) {
    const SynthSplit* s = split == "train" ? &ds.train : split == "val" ? &ds.val : split == "test" ? &ds.test : nullptr;
    if (s == nullptr) throw ConfigError("unknown split '" + split + "'");
    return logistic_probe(ds.train.latents, torch::tensor(ds.train.labels), s->latents, torch::tensor(s->labels),
                          ds.config.classes);
}

/// Same probe on the tabular columns alone (ordinal categorical codes one-hot encoded).
inline double tabular_probe_accuracy(const SynthDataset& ds, const std::string& split) {
    const SynthSplit* s = split == "val" ? &ds.val : &ds.test;
    auto features = [&](const SynthSplit& sp) {
        std::vector<torch::Tensor> parts;
        const auto nc = ds.config.categorical_columns;
        for (int64_t j = 0; j < nc; ++j) {
            parts.push_back(torch::one_hot(sp.tabular.select(1, j).to(torch::kInt64), 4).to(torch::kFloat64));
        }
        parts.push_back(sp.tabular.slice(1, nc));
        return torch::cat(parts, 1);
    };
    return logistic_probe(features(ds.train), torch::tensor(ds.train.labels), features(*s), torch::tensor(s->labels),
                          ds.config.classes);
}

}  // namespace stil::synth
