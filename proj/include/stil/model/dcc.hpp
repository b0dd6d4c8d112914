#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include <torch/torch.h>

#include "stil/errors.hpp"
#include "stil/model/attention.hpp"

namespace stil::model {

inline constexpr double kNormEps = 1e-12;
inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

/// Two bias-free D x D maps: shared = x W_s, specific = x W_c.
class SplitProjectionImpl : public torch::nn::Module {
public:
    explicit SplitProjectionImpl(int64_t dim) {
        shared = register_module("shared", torch::nn::Linear(torch::nn::LinearOptions(dim, dim).bias(false)));
        specific = register_module("specific", torch::nn::Linear(torch::nn::LinearOptions(dim, dim).bias(false)));
    }
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& tokens) {
        return {shared(tokens), specific(tokens)};
    }

    torch::nn::Linear shared{nullptr}, specific{nullptr};
};
TORCH_MODULE(SplitProjection);

/// Mean over the sequence dimension: [N,L,D] -> [N,D] (or [L,D] -> [D]).
inline torch::Tensor pool(const torch::Tensor& tokens) {
    require(tokens.dim() >= 2, "pool: expected a token sequence");
    const auto seq_dim = tokens.dim() - 2;
    if (tokens.size(seq_dim) == 0) throw ContractViolation("pool: empty token sequence");
    return tokens.mean(seq_dim);
}

inline torch::Tensor l2_normalize(const torch::Tensor& x) {
    return x / x.norm(2, -1, true).clamp_min(kNormEps);
}

/// Symmetric cross-modal InfoNCE over paired rows with Psi = exp(cos/kappa);
/// the other rows of the opposite modality act as negatives.
inline torch::Tensor contrastive_consistency_loss(const torch::Tensor& zi, const torch::Tensor& zt, double kappa) {
    require(zi.dim() == 2 && zi.sizes() == zt.sizes(), "contrastive_consistency_loss: expected matching [N,P]");
    require(zi.size(0) >= 1, "contrastive_consistency_loss: empty batch");
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    auto logits = l2_normalize(zi).matmul(l2_normalize(zt).t()) / kappa;
    auto diag_i = torch::log_softmax(logits, 1).diagonal();
    auto diag_t = torch::log_softmax(logits, 0).diagonal();
    return -(diag_i.sum() + diag_t.sum()) / (2.0 * static_cast<double>(zi.size(0)));
}

struct GaussianParams {
    torch::Tensor mean;     // [N,D]
    torch::Tensor log_var;  // [N,D], clamped
};

/// q_theta(b | a): diagonal Gaussian with mean / log-variance heads.
class VariationalNetImpl : public torch::nn::Module {
public:
    VariationalNetImpl(int64_t dim, int64_t hidden) {
        hidden_layer = register_module("hidden", torch::nn::Linear(dim, hidden));
        mean_head = register_module("mean", torch::nn::Linear(hidden, dim));
        log_var_head = register_module("log_var", torch::nn::Linear(hidden, dim));
    }

    GaussianParams forward(const torch::Tensor& a) {
        auto h = torch::relu(hidden_layer(a));
        return {mean_head(h), log_var_head(h).clamp(kLogVarMin, kLogVarMax)};
    }

    // Same map with every parameter detached: no gradient reaches theta.
    GaussianParams frozen(const torch::Tensor& a) {
        namespace F = torch::nn::functional;
        auto lin = [](const torch::nn::Linear& l, const torch::Tensor& x) {
            return F::linear(x, l->weight.detach(), l->bias.detach());
        };
        auto h = torch::relu(lin(hidden_layer, a));
        return {lin(mean_head, h), lin(log_var_head, h).clamp(kLogVarMin, kLogVarMax)};
    }

    torch::nn::Linear hidden_layer{nullptr}, mean_head{nullptr}, log_var_head{nullptr};
};
TORCH_MODULE(VariationalNet);

/// Row-wise log N(b_j; mean_j, diag exp(log_var_j)).
inline torch::Tensor gaussian_log_density(const GaussianParams& q, const torch::Tensor& b) {
    const double log2pi = std::log(2.0 * std::numbers::pi);
    return -0.5 * ((b - q.mean).pow(2) * torch::exp(-q.log_var) + q.log_var + log2pi).sum(-1);
}

/// All-pairs log q(b_k | a_j) as an [N,N] matrix (row j = conditioning input).
/// Expanded quadratic form, so memory stays O(N*D + N^2).
inline torch::Tensor pairwise_log_density(const GaussianParams& q, const torch::Tensor& b) {
    const double log2pi = std::log(2.0 * std::numbers::pi);
    const auto d = static_cast<double>(b.size(1));
    auto prec = torch::exp(-q.log_var);                                 // [N,D]
    auto quad = prec.matmul(b.pow(2).t())                               // sum_d b_kd^2 / s_jd
                - 2.0 * (q.mean * prec).matmul(b.t())                   // cross term
                + (q.mean.pow(2) * prec).sum(-1, true);                 // sum_d m_jd^2 / s_jd
    return -0.5 * (quad + q.log_var.sum(-1, true) + d * log2pi);
}

/// Variational CLUB: (1/N^2) sum_j sum_k [log q(B_j|A_j) - log q(B_k|A_j)],
/// evaluated with theta frozen.
inline torch::Tensor vclub_estimate(const torch::Tensor& a, const torch::Tensor& b, VariationalNet& net) {
    require(a.dim() == 2 && a.sizes() == b.sizes(), "vclub_estimate: expected matching [N,D]");
    auto q = net->frozen(a);
    auto ll = pairwise_log_density(q, b);
    return ll.diagonal().mean() - ll.mean();
}

/// (1/N) sum_j log q(B_j|A_j); representations detached, so only theta learns.
inline torch::Tensor varnet_loglik(const torch::Tensor& a, const torch::Tensor& b, VariationalNet& net) {
    require(a.dim() == 2 && a.sizes() == b.sizes(), "varnet_loglik: expected matching [N,D]");
    return gaussian_log_density(net->forward(a.detach()), b.detach()).mean();
}

/// vCLUB(z_c, z_s) - L_q(z_c, z_s): q models z_s given z_c.
inline torch::Tensor disentanglement_loss(const torch::Tensor& z_c, const torch::Tensor& z_s, VariationalNet& net) {
    return vclub_estimate(z_c, z_s, net) - varnet_loglik(z_c, z_s, net);
}

inline torch::Tensor dcc_loss(const torch::Tensor& l_cc, const torch::Tensor& l_ds_i, const torch::Tensor& l_ds_t,
                              double beta, double gamma) {
    if (beta < 0.0 || gamma < 0.0) throw ConfigError("beta and gamma must be non-negative");
    return beta * l_cc + gamma * (l_ds_i + l_ds_t);
}

struct InteractionOutput {
    torch::Tensor z_s;        // [N,D] enhanced shared vector
    torch::Tensor image_c;    // [N,L^i,D]
    torch::Tensor tabular_c;  // [N,L^t,D]
    torch::Tensor z_i_c;      // pooled image_c
    torch::Tensor z_t_c;      // pooled tabular_c
    std::vector<torch::Tensor> cross_weights;  // per block, [N,heads,1,1+L^i+L^t]
};

/// z_s queries [z_s; I_c; T_c] by cross-attention; each specific sequence runs
/// its own self-attention block. Blocks may be stacked.
class InteractionLayerImpl : public torch::nn::Module {
public:
    InteractionLayerImpl(int64_t dim, int64_t heads, int64_t ffn_hidden, int64_t blocks = 1) {
        if (blocks < 1) throw ConfigError("interaction_blocks must be >= 1");
        for (int64_t k = 0; k < blocks; ++k) {
            cross->push_back(TransformerBlock(dim, heads, ffn_hidden));
            self_image->push_back(TransformerBlock(dim, heads, ffn_hidden));
            self_tabular->push_back(TransformerBlock(dim, heads, ffn_hidden));
        }
        register_module("cross", cross);
        register_module("self_image", self_image);
        register_module("self_tabular", self_tabular);
    }

    InteractionOutput forward(const torch::Tensor& z_s, const torch::Tensor& image_c, const torch::Tensor& tabular_c) {
        require(z_s.dim() == 2 && image_c.dim() == 3 && tabular_c.dim() == 3, "interaction: expected [N,D], [N,L,D]");
        InteractionOutput out;
        auto s = z_s.unsqueeze(1);
        auto ic = image_c;
        auto tc = tabular_c;
        for (size_t k = 0; k < cross->size(); ++k) {
            auto context = torch::cat({s, ic, tc}, 1);
            auto att = cross[k]->as<TransformerBlock>()->attend(s, context);
            out.cross_weights.push_back(att.weights);
            s = att.values;
            ic = self_image[k]->as<TransformerBlock>()->forward(ic);
            tc = self_tabular[k]->as<TransformerBlock>()->forward(tc);
        }
        out.z_s = s.squeeze(1);
        out.image_c = ic;
        out.tabular_c = tc;
        out.z_i_c = pool(ic);
        out.z_t_c = pool(tc);
        return out;
    }

    torch::nn::ModuleList cross, self_image, self_tabular;
};
TORCH_MODULE(InteractionLayer);

}  // namespace stil::model
