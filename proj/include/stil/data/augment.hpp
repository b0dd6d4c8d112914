#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "stil/data/sample.hpp"
#include "stil/data/schema.hpp"
#include "stil/errors.hpp"

namespace stil::data {

using Rng = std::mt19937_64;

// Empirical per-column values of the train split, sampled with replacement.
struct TabularValuePool {
    std::vector<std::vector<float>> columns;

    static TabularValuePool from(const SampleSet& train) {
        TabularValuePool pool;
        const auto width = train.tabular_width();
        pool.columns.resize(static_cast<size_t>(width));
        auto tab = train.tabular().contiguous();
        auto acc = tab.accessor<float, 2>();
        for (int64_t i = 0; i < train.size(); ++i) {
            for (int64_t j = 0; j < width; ++j) pool.columns[static_cast<size_t>(j)].push_back(acc[i][j]);
        }
        return pool;
    }

    static TabularValuePool from(std::initializer_list<const SampleSet*> parts) {
        TabularValuePool pool;
        for (const auto* part : parts) {
            if (part->empty()) continue;
            auto p = from(*part);
            if (pool.columns.empty()) pool.columns.resize(p.columns.size());
            for (size_t j = 0; j < p.columns.size(); ++j) {
                pool.columns[j].insert(pool.columns[j].end(), p.columns[j].begin(), p.columns[j].end());
            }
        }
        return pool;
    }
};

struct TabularAugmentResult {
    std::vector<float> row;
    std::vector<int64_t> replaced;  // positions drawn from the pool
    std::vector<int64_t> skipped;   // chosen positions whose pool was empty
};

/// Replaces exactly round(replace_fraction * L) positions, chosen uniformly
/// without replacement, by values drawn from that column's pool.
inline TabularAugmentResult augment_tabular(std::span<const float> row, const TabularSchema& schema,
                                            double replace_fraction, const TabularValuePool& pool, Rng& rng) {
    if (!(replace_fraction >= 0.0 && replace_fraction <= 1.0)) {
        throw ConfigError("tabular replace_fraction must lie in [0, 1]");
    }
    const auto width = static_cast<int64_t>(row.size());
    require(width == schema.size(), "augment_tabular: row length differs from schema");
    require(static_cast<int64_t>(pool.columns.size()) == width, "augment_tabular: pool width differs from row");

    TabularAugmentResult out;
    out.row.assign(row.begin(), row.end());
    const auto count = static_cast<int64_t>(std::llround(replace_fraction * static_cast<double>(width)));
    if (count == 0) return out;

    std::vector<int64_t> positions(static_cast<size_t>(width));
    std::iota(positions.begin(), positions.end(), 0);
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    for (int64_t k = 0; k < count; ++k) {
        std::uniform_int_distribution<int64_t> pick(k, width - 1);
        std::swap(positions[static_cast<size_t>(k)], positions[static_cast<size_t>(pick(rng))]);
    }
    positions.resize(static_cast<size_t>(count));
    std::sort(positions.begin(), positions.end());
    for (auto j : positions) {
        const auto& values = pool.columns[static_cast<size_t>(j)];
        if (values.empty()) {
            out.skipped.push_back(j);
            continue;
        }
        std::uniform_int_distribution<size_t> draw(0, values.size() - 1);
        out.row[static_cast<size_t>(j)] = values[draw(rng)];
        out.replaced.push_back(j);
    }
    return out;
}

/// Row-wise augmentation of an [N,L] tabular batch. Returns the number of
/// skipped (empty-pool) positions through `skipped` when given.
inline torch::Tensor augment_tabular_batch(const torch::Tensor& tabular, const TabularSchema& schema,
                                           double replace_fraction, const TabularValuePool& pool, Rng& rng,
                                           int64_t* skipped = nullptr) {
    auto src = tabular.to(torch::kFloat32).contiguous();
    auto out = src.clone();
    const auto n = src.size(0);
    const auto width = src.size(1);
    const float* in_ptr = src.data_ptr<float>();
    float* out_ptr = out.data_ptr<float>();
    for (int64_t i = 0; i < n; ++i) {
        auto res = augment_tabular(std::span<const float>(in_ptr + i * width, static_cast<size_t>(width)), schema,
                                   replace_fraction, pool, rng);
        std::copy(res.row.begin(), res.row.end(), out_ptr + i * width);
        if (skipped) *skipped += static_cast<int64_t>(res.skipped.size());
    }
    return out;
}

// Desk-scale subset of the usual photometric/geometric image augmentations.
// `strength` scales every component; strength 0 is the identity.
struct ImageAugmentConfig {
    double strength = 1.0;
    double flip_prob = 0.5;
    double max_rotation_deg = 15.0;
    double min_crop_area = 0.8;
    double noise_std = 0.05;  // fraction of the [0,1] value range
};

/// Augments an [N,C,H,W] batch. Random draws are consumed per sample in a
/// fixed order (flip, angle, area, shift x, shift y), then noise.
inline torch::Tensor augment_image_batch(const torch::Tensor& images, const ImageAugmentConfig& cfg, Rng& rng) {
    require(images.dim() == 4, "augment_image_batch: expected [N,C,H,W]");
    const double s = std::clamp(cfg.strength, 0.0, 1.0);
    auto out = images.to(torch::kFloat32).clone();
    if (s == 0.0 || out.size(0) == 0) return out;

    const auto n = out.size(0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto theta = torch::zeros({n, 2, 3}, torch::kFloat32);
    auto th = theta.accessor<float, 3>();
    bool any_geometry = false;
    for (int64_t i = 0; i < n; ++i) {
        const bool flip = unit(rng) < cfg.flip_prob * s;
        const double angle = (2.0 * unit(rng) - 1.0) * cfg.max_rotation_deg * s * std::numbers::pi / 180.0;
        const double area = 1.0 - unit(rng) * (1.0 - cfg.min_crop_area) * s;
        const double side = std::sqrt(area);
        const double tx = (2.0 * unit(rng) - 1.0) * (1.0 - side);
        const double ty = (2.0 * unit(rng) - 1.0) * (1.0 - side);
        if (flip) out[i] = out[i].flip({2});
        th[i][0][0] = static_cast<float>(side * std::cos(angle));
        th[i][0][1] = static_cast<float>(-side * std::sin(angle));
        th[i][0][2] = static_cast<float>(tx);
        th[i][1][0] = static_cast<float>(side * std::sin(angle));
        th[i][1][1] = static_cast<float>(side * std::cos(angle));
        th[i][1][2] = static_cast<float>(ty);
        any_geometry = any_geometry || angle != 0.0 || side != 1.0;
    }
    if (any_geometry) {
        namespace F = torch::nn::functional;
        auto grid = F::affine_grid(theta, out.sizes().vec(), /*align_corners=*/false);
        out = F::grid_sample(out, grid,
                             F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
    }
    const double sigma = cfg.noise_std * s;
    if (sigma > 0.0) {
        std::normal_distribution<float> gauss(0.0f, static_cast<float>(sigma));
        auto noise = torch::empty_like(out);
        float* p = noise.data_ptr<float>();
        for (int64_t k = 0; k < noise.numel(); ++k) p[k] = gauss(rng);
        out = (out + noise).clamp(0.0, 1.0);
    }
    return out;
}

inline torch::Tensor augment_image(const torch::Tensor& image, const ImageAugmentConfig& cfg, Rng& rng) {
    require(image.dim() == 3, "augment_image: expected [C,H,W]");
    return augment_image_batch(image.unsqueeze(0), cfg, rng).squeeze(0);
}

}  // namespace stil::data
