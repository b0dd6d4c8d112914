#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stil/errors.hpp"

namespace stil::data {

// One image plus one encoded tabular row. `label` is present iff the sample
// belongs to the labeled split; `truth` keeps the ground truth for diagnostics
// when it is known (synthetic data, validation, test).
struct MultimodalSample {
    torch::Tensor image;           // [C,H,W], values in [0,1]
    std::vector<float> tabular;    // ordinal index for categorical, z-score for continuous
    std::optional<int64_t> label;
    std::optional<int64_t> truth;
    std::string id;
};

// Column-stacked storage for a list of samples. Immutable after construction.
class SampleSet {
public:
    SampleSet() = default;

    SampleSet(torch::Tensor images, torch::Tensor tabular, torch::Tensor labels, torch::Tensor truth,
              std::vector<std::string> ids)
        : images_(std::move(images)),
          tabular_(std::move(tabular)),
          labels_(std::move(labels)),
          truth_(std::move(truth)),
          ids_(std::move(ids)) {
        const auto n = static_cast<int64_t>(ids_.size());
        require(images_.dim() == 4 && images_.size(0) == n, "SampleSet: images must be [N,C,H,W]");
        require(tabular_.dim() == 2 && tabular_.size(0) == n, "SampleSet: tabular must be [N,L]");
        require(labels_.numel() == n && truth_.numel() == n, "SampleSet: label vectors must have N entries");
    }

    static SampleSet from_samples(const std::vector<MultimodalSample>& samples) {
        if (samples.empty()) return {};
        std::vector<torch::Tensor> imgs;
        std::vector<std::string> ids;
        const auto n = static_cast<int64_t>(samples.size());
        const auto width = static_cast<int64_t>(samples.front().tabular.size());
        auto tab = torch::empty({n, width}, torch::kFloat32);
        auto labels = torch::full({n}, -1, torch::kInt64);
        auto truth = torch::full({n}, -1, torch::kInt64);
        auto tab_a = tab.accessor<float, 2>();
        auto lab_a = labels.accessor<int64_t, 1>();
        auto tru_a = truth.accessor<int64_t, 1>();
        for (int64_t i = 0; i < n; ++i) {
            const auto& s = samples[static_cast<size_t>(i)];
            require(static_cast<int64_t>(s.tabular.size()) == width, "SampleSet: ragged tabular rows");
            imgs.push_back(s.image.to(torch::kFloat32));
            for (int64_t j = 0; j < width; ++j) tab_a[i][j] = s.tabular[static_cast<size_t>(j)];
            if (s.label) lab_a[i] = *s.label;
            if (s.truth) tru_a[i] = *s.truth;
            else if (s.label) tru_a[i] = *s.label;
            ids.push_back(s.id);
        }
        return SampleSet(torch::stack(imgs), tab, labels, truth, std::move(ids));
    }

    int64_t size() const { return static_cast<int64_t>(ids_.size()); }
    bool empty() const { return ids_.empty(); }

    const torch::Tensor& images() const { return images_; }
    const torch::Tensor& tabular() const { return tabular_; }
    const torch::Tensor& labels() const { return labels_; }
    const torch::Tensor& truth() const { return truth_; }
    const std::vector<std::string>& ids() const { return ids_; }

    MultimodalSample at(int64_t i) const {
        require(i >= 0 && i < size(), "SampleSet::at: index out of range");
        MultimodalSample s;
        s.image = images_[i];
        auto row = tabular_[i].contiguous();
        s.tabular.assign(row.data_ptr<float>(), row.data_ptr<float>() + row.numel());
        const auto l = labels_[i].item<int64_t>();
        const auto t = truth_[i].item<int64_t>();
        if (l >= 0) s.label = l;
        if (t >= 0) s.truth = t;
        s.id = ids_[static_cast<size_t>(i)];
        return s;
    }

    SampleSet select(std::span<const int64_t> indices) const {
        auto idx = torch::tensor(std::vector<int64_t>(indices.begin(), indices.end()), torch::kInt64);
        std::vector<std::string> ids;
        ids.reserve(indices.size());
        for (auto i : indices) ids.push_back(ids_.at(static_cast<size_t>(i)));
        return SampleSet(images_.index_select(0, idx), tabular_.index_select(0, idx), labels_.index_select(0, idx),
                         truth_.index_select(0, idx), std::move(ids));
    }

    // Same samples with training labels hidden (ground truth kept).
    SampleSet without_labels() const {
        return SampleSet(images_, tabular_, torch::full_like(labels_, -1), truth_, ids_);
    }

    int64_t image_channels() const { return images_.size(1); }
    int64_t image_height() const { return images_.size(2); }
    int64_t image_width() const { return images_.size(3); }
    int64_t tabular_width() const { return tabular_.size(1); }

private:
    torch::Tensor images_ = torch::empty({0, 1, 1, 1});
    torch::Tensor tabular_ = torch::empty({0, 0});
    torch::Tensor labels_ = torch::empty({0}, torch::kInt64);
    torch::Tensor truth_ = torch::empty({0}, torch::kInt64);
    std::vector<std::string> ids_;
};

// One labeled batch X (size B) and one unlabeled batch U (size mu*B).
struct BatchPair {
    SampleSet labeled;
    SampleSet unlabeled;
};

}  // namespace stil::data
