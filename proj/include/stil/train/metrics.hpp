#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stil/errors.hpp"

namespace stil::train {

enum class Metric { accuracy, auc };

inline Metric parse_metric(const std::string& s) {
    if (s == "accuracy" || s == "acc") return Metric::accuracy;
    if (s == "auc") return Metric::auc;
    throw ConfigError("unknown metric '" + s + "' (expected accuracy|auc)");
}

inline std::string to_string(Metric m) { return m == Metric::accuracy ? "accuracy" : "auc"; }

inline double accuracy(const torch::Tensor& probs, const torch::Tensor& labels) {
    require(probs.dim() == 2 && probs.size(0) == labels.numel(), "accuracy: shape mismatch");
    if (labels.numel() == 0) return 0.0;
    return probs.argmax(1).eq(labels.to(torch::kInt64)).to(torch::kFloat64).mean().item<double>();
}

/// Rank-based (Mann-Whitney) AUC of `scores` for positives `is_pos`; tied
/// scores share their midrank.
inline double binary_auc(const std::vector<double>& scores, const std::vector<bool>& is_pos) {
    require(scores.size() == is_pos.size(), "binary_auc: size mismatch");
    const auto n = scores.size();
    size_t n_pos = 0;
    for (bool p : is_pos) n_pos += p;
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw DataError("AUC undefined: labels contain a single class");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) {
            if (is_pos[order[k]]) rank_sum += midrank;
        }
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

/// Binary: AUC of the class-1 probability. Multiclass: one-vs-rest macro mean
/// over classes present in `labels`.
inline double auc(const torch::Tensor& probs, const torch::Tensor& labels) {
    require(probs.dim() == 2 && probs.size(0) == labels.numel(), "auc: shape mismatch");
    auto p = probs.to(torch::kFloat64).contiguous();
    auto y = labels.to(torch::kInt64).contiguous();
    const auto n = p.size(0);
    const auto c = p.size(1);
    auto pa = p.accessor<double, 2>();
    auto ya = y.accessor<int64_t, 1>();
    auto one_class = [&](int64_t k) {
        std::vector<double> s(static_cast<size_t>(n));
        std::vector<bool> pos(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            s[static_cast<size_t>(i)] = pa[i][k];
            pos[static_cast<size_t>(i)] = ya[i] == k;
        }
        return binary_auc(s, pos);
    };
    if (c == 2) return one_class(1);
    std::vector<int64_t> present;
    for (int64_t k = 0; k < c; ++k) {
        if ((y == k).any().item<bool>()) present.push_back(k);
    }
    if (present.size() < 2) throw DataError("AUC undefined: labels contain a single class");
    double sum = 0.0;
    for (auto k : present) sum += one_class(k);
    return sum / static_cast<double>(present.size());
}

inline double score(Metric m, const torch::Tensor& probs, const torch::Tensor& labels) {
    return m == Metric::accuracy ? accuracy(probs, labels) : auc(probs, labels);
}

}  // namespace stil::train
