#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "stil/errors.hpp"
#include "stil/model/dcc.hpp"

namespace stil::method {

/// Per-class running sums of embeddings; prototypes are finalized once per
/// epoch and read as a frozen snapshot in between. Accumulation is in double.
class PrototypeStore {
public:
    PrototypeStore() = default;
    PrototypeStore(int64_t classes, int64_t dim)
        : sums_(torch::zeros({classes, dim}, torch::kFloat64)),
          counts_(torch::zeros({classes}, torch::kFloat64)),
          prototypes_(torch::zeros({classes, dim}, torch::kFloat64)),
          present_(torch::zeros({classes}, torch::kBool)) {}

    int64_t classes() const { return sums_.size(0); }
    int64_t dim() const { return sums_.size(1); }

    void accumulate(const torch::Tensor& v, int64_t c, double weight) {
        require(c >= 0 && c < classes(), "prototype accumulate: class out of range");
        require(v.dim() == 1 && v.size(0) == dim(), "prototype accumulate: embedding dim mismatch");
        if (weight == 0.0) return;
        sums_[c] += weight * v.detach().to(torch::kFloat64);
        counts_[c] += weight;
    }

    /// Batched form: v [N,P], classes [N], weights [N].
    void accumulate(const torch::Tensor& v, const torch::Tensor& cls, const torch::Tensor& weights) {
        require(v.dim() == 2 && v.size(1) == dim() && cls.numel() == v.size(0) && weights.numel() == v.size(0),
                "prototype accumulate: shape mismatch");
        if (v.size(0) == 0) return;
        auto c = cls.to(torch::kInt64).flatten();
        require(c.min().item<int64_t>() >= 0 && c.max().item<int64_t>() < classes(),
                "prototype accumulate: class out of range");
        auto w = weights.detach().to(torch::kFloat64).flatten();
        sums_.index_add_(0, c, v.detach().to(torch::kFloat64) * w.unsqueeze(1));
        counts_.index_add_(0, c, w);
    }

    /// v_c = sum_c / n_c where n_c > 0; other classes keep their previous
    /// prototype. Sums and counts reset. Returns false if every class was empty.
    bool finalize() {
        auto has = counts_.gt(0);
        const bool any = has.any().item<bool>();
        if (any) {
            auto mean = sums_ / counts_.clamp_min(1.0).unsqueeze(1);
            prototypes_ = torch::where(has.unsqueeze(1), mean, prototypes_);
            present_ = present_.logical_or(has);
        }
        last_counts_ = counts_.clone();
        sums_.zero_();
        counts_.zero_();
        ++epoch_;
        return any;
    }

    bool complete() const { return present_.defined() && present_.numel() > 0 && present_.all().item<bool>(); }
    bool any_present() const { return present_.defined() && present_.any().item<bool>(); }

    const torch::Tensor& prototypes() const { return prototypes_; }
    const torch::Tensor& present() const { return present_; }
    const torch::Tensor& sums() const { return sums_; }
    const torch::Tensor& counts() const { return counts_; }
    const torch::Tensor& last_counts() const { return last_counts_; }
    int64_t epoch() const { return epoch_; }

    // Raw state access for checkpoints.
    std::vector<torch::Tensor> state() const {
        auto lc = last_counts_.defined() ? last_counts_ : torch::zeros_like(counts_);
        return {sums_, counts_, prototypes_, present_, lc, torch::tensor(epoch_)};
    }
    void restore(const std::vector<torch::Tensor>& s) {
        require(s.size() == 6, "prototype store: bad state");
        sums_ = s[0].clone();
        counts_ = s[1].clone();
        prototypes_ = s[2].clone();
        present_ = s[3].clone();
        last_counts_ = s[4].clone();
        epoch_ = s[5].item<int64_t>();
    }

private:
    torch::Tensor sums_, counts_, prototypes_, present_, last_counts_;
    int64_t epoch_ = 0;
};

/// q = softmax(P v) with raw dot products (no temperature).
inline torch::Tensor prototype_similarity(const torch::Tensor& v, const torch::Tensor& prototypes) {
    require(v.size(-1) == prototypes.size(1), "prototype_similarity: dim mismatch");
    return torch::softmax(v.matmul(prototypes.to(v.scalar_type()).t()), -1);
}

struct Smoothed {
    torch::Tensor p_bar;
    torch::Tensor p_bar_m;
};

/// p_bar = r p + (1-r) q, p_bar_m = r p_m + (1-r) q.
inline Smoothed smooth(const torch::Tensor& p, const torch::Tensor& p_m, const torch::Tensor& q, double r) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("smoothing r must lie in [0,1]");
    if (r == 1.0) return {p, p_m};
    return {r * p + (1.0 - r) * q, r * p_m + (1.0 - r) * q};
}

/// Per-row -log(Psi(v, v_y) / sum_c Psi(v, v_c)) with Psi = exp(cos/kappa).
inline torch::Tensor prototype_nll(const torch::Tensor& v, const torch::Tensor& y, const torch::Tensor& prototypes,
                                   double kappa) {
    auto logits = model::l2_normalize(v).matmul(model::l2_normalize(prototypes.to(v.scalar_type())).t()) / kappa;
    return -torch::log_softmax(logits, -1).gather(1, y.to(torch::kInt64).unsqueeze(1)).squeeze(1);
}

/// Labeled mean of prototype_nll plus the confidence-gated unlabeled term
/// averaged over the full unlabeled batch. Prototypes are treated as constants.
inline torch::Tensor prototypical_contrastive_loss(const torch::Tensor& v_l, const torch::Tensor& y_l,
                                                   const torch::Tensor& v_u, const torch::Tensor& y_u,
                                                   const torch::Tensor& confident, const torch::Tensor& prototypes,
                                                   double kappa) {
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    auto protos = prototypes.detach();
    auto loss = torch::zeros({}, v_l.defined() && v_l.numel() ? v_l.options() : v_u.options());
    if (v_l.defined() && v_l.size(0) > 0) loss = loss + prototype_nll(v_l, y_l, protos, kappa).mean();
    if (v_u.defined() && v_u.size(0) > 0) {
        auto gate = confident.to(v_u.scalar_type());
        loss = loss + (gate * prototype_nll(v_u, y_u, protos, kappa)).sum() / static_cast<double>(v_u.size(0));
    }
    return loss;
}

}  // namespace stil::method
