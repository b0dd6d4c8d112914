#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stil/errors.hpp"

namespace stil::method {

enum class ConsensusCase : int64_t { case1 = 0, case2i = 1, case2t = 2, case3 = 3 };

inline constexpr std::array<const char*, 4> kCaseNames{"case1", "case2i", "case2t", "case3"};

inline std::string to_string(ConsensusCase c) { return kCaseNames[static_cast<size_t>(c)]; }

// Which classifiers receive the unlabeled loss.
struct UpdateMask {
    bool m = false;
    bool i = false;
    bool t = false;
    bool operator==(const UpdateMask&) const = default;
};

struct PseudoLabelDecision {
    ConsensusCase consensus = ConsensusCase::case3;
    std::vector<double> pseudo_label;
    UpdateMask update;
    bool confident = false;
};

/// First index of the maximum (ties go to the lowest class).
inline int64_t argmax_lowest(const std::vector<double>& p) {
    require(!p.empty(), "argmax of an empty distribution");
    return static_cast<int64_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline ConsensusCase case_from_argmax(int64_t am, int64_t ai, int64_t at) {
    if (am == ai && am == at) return ConsensusCase::case1;
    if (am == ai) return ConsensusCase::case2i;
    if (am == at) return ConsensusCase::case2t;
    return ConsensusCase::case3;
}

inline ConsensusCase determine_case(const std::vector<double>& p_m, const std::vector<double>& p_i,
                                    const std::vector<double>& p_t) {
    require(p_m.size() == p_i.size() && p_m.size() == p_t.size(), "determine_case: class count mismatch");
    return case_from_argmax(argmax_lowest(p_m), argmax_lowest(p_i), argmax_lowest(p_t));
}

/// Batched case determination on [N,C] probabilities; returns int64 [N].
/// torch::argmax returns the first maximal index, matching argmax_lowest.
inline torch::Tensor determine_cases(const torch::Tensor& p_m, const torch::Tensor& p_i, const torch::Tensor& p_t) {
    require(p_m.dim() == 2 && p_m.sizes() == p_i.sizes() && p_m.sizes() == p_t.sizes(),
            "determine_cases: expected matching [N,C]");
    auto am = p_m.argmax(1);
    auto ai = p_i.argmax(1);
    auto at = p_t.argmax(1);
    auto c1 = am.eq(ai).logical_and(am.eq(at));
    auto c2i = am.eq(ai).logical_and(c1.logical_not());
    auto c2t = am.eq(at).logical_and(c1.logical_not());
    auto out = torch::full_like(am, static_cast<int64_t>(ConsensusCase::case3));
    out.masked_fill_(c2t, static_cast<int64_t>(ConsensusCase::case2t));
    out.masked_fill_(c2i, static_cast<int64_t>(ConsensusCase::case2i));
    out.masked_fill_(c1, static_cast<int64_t>(ConsensusCase::case1));
    return out;
}

inline std::vector<double> make_pseudo_label(ConsensusCase c, const std::vector<double>& p_m,
                                             const std::vector<double>& p_i, const std::vector<double>& p_t) {
    std::vector<double> out(p_m.size());
    for (size_t k = 0; k < p_m.size(); ++k) {
        switch (c) {
            case ConsensusCase::case1: out[k] = (p_m[k] + p_i[k] + p_t[k]) / 3.0; break;
            case ConsensusCase::case2i: out[k] = (p_m[k] + p_i[k]) / 2.0; break;
            case ConsensusCase::case2t: out[k] = (p_m[k] + p_t[k]) / 2.0; break;
            case ConsensusCase::case3: out[k] = p_m[k]; break;
        }
    }
    return out;
}

/// Batched pseudo-labels: average of the agreeing classifiers, p_m for case 3.
inline torch::Tensor make_pseudo_labels(const torch::Tensor& cases, const torch::Tensor& p_m, const torch::Tensor& p_i,
                                        const torch::Tensor& p_t) {
    auto c = cases.unsqueeze(1);
    auto all = (p_m + p_i + p_t) / 3.0;
    auto mi = (p_m + p_i) / 2.0;
    auto mt = (p_m + p_t) / 2.0;
    return torch::where(c.eq(0), all, torch::where(c.eq(1), mi, torch::where(c.eq(2), mt, p_m)));
}

/// Case 3 picks {i} or {t} with probability 1/2 from the caller's RNG.
template <class Rng>
UpdateMask select_update_targets(ConsensusCase c, Rng& rng) {
    switch (c) {
        case ConsensusCase::case1: return {true, true, true};
        case ConsensusCase::case2i: return {false, false, true};
        case ConsensusCase::case2t: return {false, true, false};
        case ConsensusCase::case3: {
            std::bernoulli_distribution coin(0.5);
            return coin(rng) ? UpdateMask{false, true, false} : UpdateMask{false, false, true};
        }
    }
    throw ContractViolation("select_update_targets: invalid case");
}

/// Batched masks [N,3] (columns m, i, t) in the given dtype. The RNG is
/// consumed once per case-3 sample, in batch order.
template <class Rng>
torch::Tensor select_update_targets(const torch::Tensor& cases, Rng& rng, torch::Dtype dtype = torch::kFloat32) {
    auto cs = cases.to(torch::kInt64).contiguous();
    const auto n = cs.size(0);
    auto masks = torch::zeros({n, 3}, torch::kFloat64);
    auto ma = masks.accessor<double, 2>();
    const auto* cp = cs.data_ptr<int64_t>();
    for (int64_t b = 0; b < n; ++b) {
        const auto u = select_update_targets(static_cast<ConsensusCase>(cp[b]), rng);
        ma[b][0] = u.m;
        ma[b][1] = u.i;
        ma[b][2] = u.t;
    }
    return masks.to(dtype);
}

/// Full decision for one teacher prediction triple. The gate reads the
/// (smoothed) multimodal prediction `p_bar_m`; pass p_m when smoothing is off.
template <class Rng>
PseudoLabelDecision decide(const std::vector<double>& p_m, const std::vector<double>& p_i,
                           const std::vector<double>& p_t, const std::vector<double>& p_bar_m, double tau, Rng& rng) {
    PseudoLabelDecision d;
    d.consensus = determine_case(p_m, p_i, p_t);
    d.pseudo_label = make_pseudo_label(d.consensus, p_m, p_i, p_t);
    d.update = select_update_targets(d.consensus, rng);
    d.confident = *std::max_element(p_bar_m.begin(), p_bar_m.end()) >= tau;
    return d;
}

/// Soft-target cross-entropy H(p, target) = -sum target * log p, per row.
inline torch::Tensor soft_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target) {
    return -(target * torch::log_softmax(logits, -1)).sum(-1);
}

/// (1/N) sum_b 1(max pbar_m_b >= tau) sum_{k in mask_b} H(p^k_b, pbar_b), with
/// student logits and teacher-derived (smoothed) targets.
inline torch::Tensor unlabeled_loss(const torch::Tensor& logits_m, const torch::Tensor& logits_i,
                                    const torch::Tensor& logits_t, const torch::Tensor& p_bar,
                                    const torch::Tensor& p_bar_m, const torch::Tensor& masks, double tau) {
    require(logits_m.dim() == 2 && logits_m.sizes() == p_bar.sizes() && masks.size(0) == logits_m.size(0),
            "unlabeled_loss: shape mismatch");
    const auto n = logits_m.size(0);
    if (n == 0) return torch::zeros({}, logits_m.options());
    auto target = p_bar.detach();
    auto gate = std::get<0>(p_bar_m.detach().max(1)).ge(tau).to(logits_m.scalar_type());
    auto mk = masks.to(logits_m.scalar_type());
    auto per_sample = mk.select(1, 0) * soft_cross_entropy(logits_m, target) +
                      mk.select(1, 1) * soft_cross_entropy(logits_i, target) +
                      mk.select(1, 2) * soft_cross_entropy(logits_t, target);
    return (gate * per_sample).sum() / static_cast<double>(n);
}

}  // namespace stil::method
