#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "stil/data/csv.hpp"
#include "stil/data/sample.hpp"
#include "stil/data/schema.hpp"
#include "stil/data/split.hpp"
#include "stil/errors.hpp"

namespace stil::data {

namespace fs = std::filesystem;

inline constexpr const char* kIdColumn = "id";
inline constexpr const char* kLabelColumn = "label";
inline constexpr const char* kImageExtension = ".png";

/// Reads a PNG (8- or 16-bit, gray or color) as a float [C,H,W] tensor in [0,1].
inline torch::Tensor read_image(const fs::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty()) throw DataError("cannot decode image " + path.string());
    double scale = 1.0;
    switch (mat.depth()) {
        case CV_8U: scale = 255.0; break;
        case CV_16U: scale = 65535.0; break;
        default: throw DataError("unsupported image depth in " + path.string());
    }
    const int channels = mat.channels();
    if (channels != 1 && channels != 3) throw DataError("unsupported channel count in " + path.string());
    cv::Mat as_float;
    mat.convertTo(as_float, CV_32F, 1.0 / scale);
    auto chw = torch::from_blob(as_float.data, {as_float.rows, as_float.cols, channels}, torch::kFloat32)
                   .permute({2, 0, 1});
    if (channels == 3) chw = chw.flip({0});  // BGR -> RGB
    return chw.contiguous().clone();
}

/// Writes a [C,H,W] tensor with values in [0,1] as a 16-bit PNG (C = 1 or 3).
inline void write_image(const fs::path& path, const torch::Tensor& image) {
    require(image.dim() == 3 && (image.size(0) == 1 || image.size(0) == 3), "write_image: expected [1|3,H,W]");
    auto hwc = (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 65535.0)
                   .round()
                   .to(torch::kInt32)
                   .permute({1, 2, 0})
                   .contiguous();
    const int h = static_cast<int>(hwc.size(0));
    const int w = static_cast<int>(hwc.size(1));
    const int c = static_cast<int>(hwc.size(2));
    cv::Mat mat(h, w, CV_MAKETYPE(CV_16U, c));
    auto acc = hwc.accessor<int32_t, 3>();
    for (int y = 0; y < h; ++y) {
        auto* row = mat.ptr<uint16_t>(y);
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                // OpenCV stores color as BGR.
                const int src = c == 3 ? 2 - k : k;
                row[x * c + k] = static_cast<uint16_t>(acc[y][x][src]);
            }
        }
    }
    if (!cv::imwrite(path.string(), mat)) throw DataError("cannot write image " + path.string());
}

struct DatasetSplits {
    SampleSet train_labeled;
    SampleSet train_unlabeled;
    SampleSet val;
    SampleSet test;
    TabularSchema schema;  // with train-split statistics filled in
    int64_t num_classes = 0;
};

namespace detail {

struct RawRow {
    std::string id;
    std::optional<int64_t> label;
    std::vector<double> raw;  // ordinal or untransformed continuous value
};

inline std::string where(size_t row, const std::string& column) {
    return "row " + std::to_string(row + 1) + ", column '" + column + "'";
}

}  // namespace detail

/// Loads table + images and applies the split manifest. Continuous columns are
/// z-scored with statistics of the train split (labeled + unlabeled).
inline DatasetSplits load_dataset(const fs::path& table_path, const fs::path& image_dir, TabularSchema schema,
                                  const SplitManifest& manifest) {
    const auto table = read_csv(table_path.string());
    const auto id_col = table.column(kIdColumn);
    const auto label_col = table.column(kLabelColumn);
    if (id_col < 0) throw DataError("table " + table_path.string() + " has no 'id' column");

    std::vector<int64_t> src_cols;
    for (const auto& c : schema.columns()) {
        const auto idx = table.column(c.name);
        if (idx < 0) throw DataError("table is missing schema column '" + c.name + "'");
        src_cols.push_back(idx);
    }

    std::vector<detail::RawRow> rows;
    std::unordered_map<std::string, size_t> by_id;
    for (size_t r = 0; r < table.rows.size(); ++r) {
        const auto& fields = table.rows[r];
        detail::RawRow row;
        row.id = fields[static_cast<size_t>(id_col)];
        if (!by_id.emplace(row.id, r).second) throw DataError("duplicate id '" + row.id + "' in table");
        if (label_col >= 0 && !fields[static_cast<size_t>(label_col)].empty()) {
            try {
                row.label = std::stoll(fields[static_cast<size_t>(label_col)]);
            } catch (const std::exception&) {
                throw DataError("invalid label at " + detail::where(r, kLabelColumn));
            }
            if (*row.label < 0) throw DataError("negative label at " + detail::where(r, kLabelColumn));
        }
        for (int64_t j = 0; j < schema.size(); ++j) {
            const auto& spec = schema[j];
            const auto& text = fields[static_cast<size_t>(src_cols[static_cast<size_t>(j)])];
            if (spec.is_categorical()) {
                const auto ord = schema.category_index(j, text);
                if (!ord) throw DataError("unknown categorical value '" + text + "' at " + detail::where(r, spec.name));
                row.raw.push_back(static_cast<double>(*ord));
            } else {
                double v = 0.0;
                try {
                    size_t used = 0;
                    v = std::stod(text, &used);
                    if (used != text.size()) throw std::invalid_argument("trailing characters");
                } catch (const std::exception&) {
                    throw DataError("non-numeric value '" + text + "' at " + detail::where(r, spec.name));
                }
                if (!std::isfinite(v)) throw DataError("non-finite value at " + detail::where(r, spec.name));
                row.raw.push_back(v);
            }
        }
        rows.push_back(std::move(row));
    }

    auto lookup = [&](const std::string& id) -> const detail::RawRow& {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("split manifest id '" + id + "' not found in table");
        return rows[it->second];
    };

    // Train statistics over labeled + unlabeled rows.
    std::vector<const detail::RawRow*> train_rows;
    for (const auto& id : manifest.labeled_ids) train_rows.push_back(&lookup(id));
    for (const auto& id : manifest.unlabeled_ids) train_rows.push_back(&lookup(id));
    if (train_rows.empty()) throw DataError("split manifest has no training ids");
    for (int64_t j = 0; j < schema.size(); ++j) {
        auto& spec = schema.columns()[static_cast<size_t>(j)];
        if (spec.is_categorical()) continue;
        double sum = 0.0;
        for (const auto* r : train_rows) sum += r->raw[static_cast<size_t>(j)];
        const double mean = sum / static_cast<double>(train_rows.size());
        double ss = 0.0;
        for (const auto* r : train_rows) {
            const double d = r->raw[static_cast<size_t>(j)] - mean;
            ss += d * d;
        }
        const double sd = std::sqrt(ss / static_cast<double>(train_rows.size()));
        spec.mean = mean;
        spec.std = sd > 0.0 ? sd : 1.0;  // constant column: centre only
    }
    schema.validate();

    int64_t num_classes = 0;
    for (const auto& r : rows) {
        if (r.label) num_classes = std::max(num_classes, *r.label + 1);
    }

    auto build = [&](const std::vector<std::string>& ids, bool labeled) {
        std::vector<MultimodalSample> samples;
        samples.reserve(ids.size());
        for (const auto& id : ids) {
            const auto& r = lookup(id);
            const auto img_path = image_dir / (id + kImageExtension);
            if (!fs::exists(img_path)) throw DataError("missing image for id '" + id + "' (" + img_path.string() + ")");
            MultimodalSample s;
            s.id = id;
            s.image = read_image(img_path);
            for (int64_t j = 0; j < schema.size(); ++j) {
                const double v = r.raw[static_cast<size_t>(j)];
                s.tabular.push_back(static_cast<float>(schema[j].is_categorical() ? v : schema.standardize(j, v)));
            }
            if (labeled) {
                if (!r.label) throw DataError("labeled id '" + id + "' has no label in the table");
                s.label = r.label;
            }
            s.truth = r.label;
            samples.push_back(std::move(s));
        }
        return SampleSet::from_samples(samples);
    };

    DatasetSplits out;
    out.train_labeled = build(manifest.labeled_ids, true);
    out.train_unlabeled = build(manifest.unlabeled_ids, false);
    out.val = build(manifest.val_ids, false);
    out.test = build(manifest.test_ids, false);
    out.schema = std::move(schema);
    out.num_classes = num_classes;

    // Stratified rounding moves each class by at most one sample.
    const double n_train = static_cast<double>(train_rows.size());
    const double observed = static_cast<double>(manifest.labeled_ids.size()) / n_train;
    if (std::abs(observed - manifest.label_fraction) > static_cast<double>(std::max<int64_t>(num_classes, 1)) / n_train) {
        throw DataError("labeled fraction " + std::to_string(observed) + " does not match manifest label_fraction " +
                        std::to_string(manifest.label_fraction));
    }
    return out;
}

inline TabularSchema load_schema(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema " + path.string());
    try {
        return TabularSchema::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("schema " + path.string() + ": " + e.what());
    }
}

inline void save_schema(const fs::path& path, const TabularSchema& schema) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write schema " + path.string());
    out << schema.to_json().dump(2) << '\n';
}

}  // namespace stil::data
