#include <cmath>
#include <numbers>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stil/model/dcc.hpp"
#include "test_util.hpp"

using namespace stil;
using namespace stil::model;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
    return (a * b).sum().item<double>() / (a.norm().item<double>() * b.norm().item<double>());
}

// Direct double loop over the symmetric InfoNCE definition.
double brute_cc(const torch::Tensor& zi, const torch::Tensor& zt, double kappa) {
    const auto n = zi.size(0);
    auto psi = [&](const torch::Tensor& a, const torch::Tensor& b) { return std::exp(cosine(a, b) / kappa); };
    double total = 0.0;
    for (int64_t b = 0; b < n; ++b) {
        double den_i = 0.0, den_t = 0.0;
        for (int64_t k = 0; k < n; ++k) {
            den_i += psi(zi[b], zt[k]);
            den_t += psi(zt[b], zi[k]);
        }
        total += std::log(psi(zi[b], zt[b]) / den_i) + std::log(psi(zt[b], zi[b]) / den_t);
    }
    return -total / (2.0 * static_cast<double>(n));
}

double log_q(VariationalNet& net, const torch::Tensor& a, const torch::Tensor& b) {
    torch::NoGradGuard g;
    auto q = net->forward(a.unsqueeze(0));
    double s = 0.0;
    for (int64_t d = 0; d < b.size(0); ++d) {
        const double m = q.mean[0][d].item<double>();
        const double lv = q.log_var[0][d].item<double>();
        const double x = b[d].item<double>();
        s += -0.5 * ((x - m) * (x - m) / std::exp(lv) + lv + kLog2Pi);
    }
    return s;
}

double brute_vclub(VariationalNet& net, const torch::Tensor& a, const torch::Tensor& b) {
    const auto n = a.size(0);
    double total = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        for (int64_t k = 0; k < n; ++k) total += log_q(net, a[j], b[j]) - log_q(net, a[j], b[k]);
    }
    return total / static_cast<double>(n * n);
}

VariationalNet double_net(int64_t dim, int64_t hidden, uint64_t seed) {
    torch::manual_seed(seed);
    VariationalNet net(dim, hidden);
    net->to(torch::kFloat64);
    return net;
}

// Varnet whose output ignores the input: zero hidden weights.
VariationalNet constant_net(int64_t dim) {
    auto net = double_net(dim, 5, 99);
    torch::NoGradGuard g;
    net->hidden_layer->weight.zero_();
    return net;
}

}  // namespace

// ---- split & pool -----------------------------------------------------------------

TEST(SplitProjection, IdentityAndZeroMaps) {
    SplitProjection split(3);
    {
        torch::NoGradGuard g;
        split->shared->weight.copy_(torch::eye(3));
        split->specific->weight.zero_();
    }
    auto x = torch::randn({2, 5, 3});
    auto [s, c] = split(x);
    EXPECT_TRUE(torch::allclose(s, x));
    EXPECT_EQ(c.abs().max().item<float>(), 0.0f);
    EXPECT_EQ(s.sizes(), x.sizes());
    EXPECT_EQ(c.sizes(), x.sizes());
}

TEST(SplitProjection, GradientMatchesFiniteDifferences) {
    torch::manual_seed(1);
    SplitProjection split(4);
    split->to(torch::kFloat64);
    auto x = torch::randn({2, 3, 4}, torch::kFloat64);
    auto probe = torch::randn({2, 3, 4}, torch::kFloat64);
    auto f = [&] { return (split(x).first.tanh() * probe).sum(); };
    EXPECT_LT(test::gradient_check(f, {split->shared->weight}), 1e-3);
}

TEST(Pool, Examples) {
    auto t = torch::tensor({{1.0, 2.0}, {3.0, 4.0}}, torch::kFloat64);
    EXPECT_TRUE(torch::equal(pool(t), torch::tensor({2.0, 3.0}, torch::kFloat64)));
    auto one = torch::tensor({{5.0, -1.0}}, torch::kFloat64);
    EXPECT_TRUE(torch::equal(pool(one), one[0]));
    auto same = torch::tensor({1.5, 2.5}, torch::kFloat64).repeat({4, 1});
    EXPECT_TRUE(torch::allclose(pool(same), same[0]));
}

TEST(Pool, EmptySequenceIsContractViolation) { EXPECT_THROW(pool(torch::zeros({0, 3})), ContractViolation); }

// ---- contrastive consistency -------------------------------------------------------

TEST(ContrastiveConsistency, SingleRowIsZero) {
    auto z = torch::randn({1, 8}, torch::kFloat64);
    EXPECT_NEAR(contrastive_consistency_loss(z, torch::randn({1, 8}, torch::kFloat64), 0.1).item<double>(), 0.0, 1e-12);
}

TEST(ContrastiveConsistency, OrthogonalPairsClosedForm) {
    auto e = torch::eye(2, torch::kFloat64);
    const double expected = std::log1p(std::exp(-10.0));
    EXPECT_NEAR(contrastive_consistency_loss(e, e, 0.1).item<double>(), expected, 1e-12);
    EXPECT_NEAR(expected, 4.54e-5, 1e-7);
}

TEST(ContrastiveConsistency, MatchesBruteForceOracle) {
    torch::manual_seed(2);
    for (double kappa : {0.1, 0.5, 1.0}) {
        auto zi = torch::randn({8, 16}, torch::kFloat64);
        auto zt = torch::randn({8, 16}, torch::kFloat64);
        EXPECT_NEAR(contrastive_consistency_loss(zi, zt, kappa).item<double>(), brute_cc(zi, zt, kappa), 1e-6);
    }
}

TEST(ContrastiveConsistency, SymmetricInModalities) {
    torch::manual_seed(3);
    auto zi = torch::randn({7, 5}, torch::kFloat64);
    auto zt = torch::randn({7, 5}, torch::kFloat64);
    EXPECT_NEAR(contrastive_consistency_loss(zi, zt, 0.2).item<double>(),
                contrastive_consistency_loss(zt, zi, 0.2).item<double>(), 1e-9);
}

TEST(ContrastiveConsistency, InvariantToPositiveRowScaling) {
    torch::manual_seed(4);
    auto zi = torch::randn({6, 5}, torch::kFloat64);
    auto zt = torch::randn({6, 5}, torch::kFloat64);
    auto scale = torch::rand({6, 1}, torch::kFloat64) * 10 + 0.01;
    EXPECT_NEAR(contrastive_consistency_loss(zi * scale, zt, 0.1).item<double>(),
                contrastive_consistency_loss(zi, zt, 0.1).item<double>(), 1e-6);
}

TEST(ContrastiveConsistency, ZeroRowStaysFinite) {
    auto zi = torch::zeros({3, 4}, torch::kFloat64);
    auto zt = torch::randn({3, 4}, torch::kFloat64);
    EXPECT_TRUE(std::isfinite(contrastive_consistency_loss(zi, zt, 0.1).item<double>()));
}

TEST(ContrastiveConsistency, GradientMatchesFiniteDifferences) {
    torch::manual_seed(5);
    auto zi = torch::randn({4, 4}, torch::kFloat64).requires_grad_(true);
    auto zt = torch::randn({4, 4}, torch::kFloat64).requires_grad_(true);
    auto f = [&] { return contrastive_consistency_loss(zi, zt, 0.5); };
    EXPECT_LT(test::gradient_check(f, {zi, zt}), 1e-3);
}

// ---- vCLUB ----------------------------------------------------------------------

TEST(VClub, ZeroForConstantVarnet) {
    auto net = constant_net(4);
    torch::manual_seed(6);
    auto a = torch::randn({9, 4}, torch::kFloat64);
    auto b = torch::randn({9, 4}, torch::kFloat64);
    EXPECT_NEAR(vclub_estimate(a, b, net).item<double>(), 0.0, 1e-12);
}

TEST(VClub, ZeroForSingleRow) {
    auto net = double_net(4, 6, 7);
    auto a = torch::randn({1, 4}, torch::kFloat64);
    EXPECT_NEAR(vclub_estimate(a, torch::randn({1, 4}, torch::kFloat64), net).item<double>(), 0.0, 1e-12);
}

TEST(VClub, MatchesDoubleSumOracle) {
    auto net = double_net(3, 4, 8);
    torch::manual_seed(9);
    auto a = torch::randn({3, 3}, torch::kFloat64);
    auto b = torch::randn({3, 3}, torch::kFloat64);
    EXPECT_NEAR(vclub_estimate(a, b, net).item<double>(), brute_vclub(net, a, b), 1e-8);
    auto a6 = torch::randn({6, 3}, torch::kFloat64) * 3;
    auto b6 = torch::randn({6, 3}, torch::kFloat64) * 3;
    EXPECT_NEAR(vclub_estimate(a6, b6, net).item<double>(), brute_vclub(net, a6, b6), 1e-6);
}

TEST(VClub, PairwiseDensityMatchesRowwise) {
    auto net = double_net(4, 5, 10);
    torch::manual_seed(11);
    auto a = torch::randn({5, 4}, torch::kFloat64);
    auto b = torch::randn({5, 4}, torch::kFloat64);
    auto q = net->forward(a);
    auto all = pairwise_log_density(q, b);
    EXPECT_LT((all.diagonal() - gaussian_log_density(q, b)).abs().max().item<double>(), 1e-10);
}

TEST(VClub, NoGradientReachesVarnet) {
    auto net = double_net(4, 5, 12);
    auto a = torch::randn({5, 4}, torch::kFloat64).requires_grad_(true);
    auto b = torch::randn({5, 4}, torch::kFloat64).requires_grad_(true);
    vclub_estimate(a, b, net).backward();
    for (const auto& p : net->parameters()) {
        EXPECT_FALSE(p.grad().defined() && p.grad().abs().max().item<double>() > 0.0);
    }
    EXPECT_TRUE(a.grad().defined());
    EXPECT_TRUE(b.grad().defined());
}

TEST(VClub, GradientMatchesFiniteDifferences) {
    auto net = double_net(4, 6, 13);
    torch::manual_seed(14);
    auto a = torch::randn({4, 4}, torch::kFloat64).requires_grad_(true);
    auto b = torch::randn({4, 4}, torch::kFloat64).requires_grad_(true);
    auto f = [&] { return vclub_estimate(a, b, net); };
    EXPECT_LT(test::gradient_check(f, {a, b}), 1e-3);
}

TEST(VClub, LogVarianceClamped) {
    auto net = double_net(2, 3, 15);
    {
        torch::NoGradGuard g;
        net->log_var_head->bias.fill_(100.0);
    }
    auto q = net->forward(torch::randn({3, 2}, torch::kFloat64));
    EXPECT_LE(q.log_var.max().item<double>(), kLogVarMax);
}

// ---- varnet log-likelihood ------------------------------------------------------------

TEST(VarnetLoglik, DensityAtMeanWithUnitVariance) {
    auto net = double_net(4, 5, 16);
    {
        torch::NoGradGuard g;
        net->log_var_head->weight.zero_();
        net->log_var_head->bias.zero_();
    }
    auto a = torch::randn({3, 4}, torch::kFloat64);
    torch::Tensor b;
    {
        torch::NoGradGuard g;
        b = net->forward(a).mean;
    }
    EXPECT_NEAR(varnet_loglik(a, b, net).item<double>(), -2.0 * kLog2Pi, 1e-10);
    {
        torch::NoGradGuard g;
        net->log_var_head->bias.fill_(std::log(2.0));
    }
    EXPECT_NEAR(varnet_loglik(a, b, net).item<double>(), -2.0 * kLog2Pi - 2.0 * std::log(2.0), 1e-10);
}

TEST(VarnetLoglik, RepresentationsReceiveNoGradient) {
    auto net = double_net(4, 5, 17);
    auto a = torch::randn({5, 4}, torch::kFloat64).requires_grad_(true);
    auto b = torch::randn({5, 4}, torch::kFloat64).requires_grad_(true);
    varnet_loglik(a, b, net).backward();
    EXPECT_FALSE(a.grad().defined());
    EXPECT_FALSE(b.grad().defined());
    EXPECT_GT(net->mean_head->weight.grad().abs().max().item<double>(), 0.0);
}

TEST(VarnetLoglik, GradientWrtThetaMatchesFiniteDifferences) {
    auto net = double_net(4, 6, 18);
    torch::manual_seed(19);
    auto a = torch::randn({5, 4}, torch::kFloat64);
    auto b = torch::randn({5, 4}, torch::kFloat64);
    auto f = [&] { return varnet_loglik(a, b, net); };
    EXPECT_LT(test::gradient_check(f, net->parameters()), 1e-3);
}

// ---- disentanglement & dcc ------------------------------------------------------------

TEST(Disentanglement, ConstantVarnetGivesNegativeLoglik) {
    auto net = constant_net(4);
    auto zc = torch::randn({6, 4}, torch::kFloat64);
    auto zs = torch::randn({6, 4}, torch::kFloat64);
    EXPECT_NEAR(disentanglement_loss(zc, zs, net).item<double>(), -varnet_loglik(zc, zs, net).item<double>(), 1e-12);
}

TEST(Disentanglement, EqualsSumOfParts) {
    auto net = double_net(4, 5, 20);
    auto zc = torch::randn({6, 4}, torch::kFloat64);
    auto zs = torch::randn({6, 4}, torch::kFloat64);
    const double parts = vclub_estimate(zc, zs, net).item<double>() - varnet_loglik(zc, zs, net).item<double>();
    EXPECT_NEAR(disentanglement_loss(zc, zs, net).item<double>(), parts, 1e-9);
}

TEST(Disentanglement, MatchesRawDensityRecomputation) {
    auto net = double_net(3, 4, 21);
    torch::manual_seed(22);
    auto zc = torch::randn({4, 3}, torch::kFloat64);
    auto zs = torch::randn({4, 3}, torch::kFloat64);
    double ll = 0.0;
    for (int64_t j = 0; j < 4; ++j) ll += log_q(net, zc[j], zs[j]);
    ll /= 4.0;
    EXPECT_NEAR(disentanglement_loss(zc, zs, net).item<double>(), brute_vclub(net, zc, zs) - ll, 1e-8);
}

TEST(Disentanglement, GradientRoutingIsPartitioned) {
    // vCLUB feeds the representations only, log-likelihood feeds theta only.
    auto net = double_net(4, 5, 23);
    auto zc = torch::randn({6, 4}, torch::kFloat64).requires_grad_(true);
    auto zs = torch::randn({6, 4}, torch::kFloat64).requires_grad_(true);
    auto rep_grads = torch::autograd::grad({vclub_estimate(zc, zs, net)}, {zc, zs});
    auto full = disentanglement_loss(zc, zs, net);
    auto full_grads = torch::autograd::grad({full}, {zc, zs}, {}, true);
    for (int k = 0; k < 2; ++k) EXPECT_LT((full_grads[0 + k] - rep_grads[k]).abs().max().item<double>(), 1e-12);
    auto theta_grads = torch::autograd::grad({full}, net->parameters(), {}, false, false, true);
    auto ll_grads = torch::autograd::grad({-varnet_loglik(zc, zs, net)}, net->parameters(), {}, false, false, true);
    for (size_t k = 0; k < theta_grads.size(); ++k) {
        EXPECT_LT((theta_grads[k] - ll_grads[k]).abs().max().item<double>(), 1e-12);
    }
}

TEST(DccLoss, Examples) {
    auto one = torch::tensor(1.0, torch::kFloat64);
    auto ds = torch::tensor(0.2, torch::kFloat64);
    EXPECT_NEAR(dcc_loss(one, ds, ds, 3.0, 0.5).item<double>(), 3.2, 1e-12);
    EXPECT_EQ(dcc_loss(one, ds, ds, 0.0, 0.0).item<double>(), 0.0);
    EXPECT_NEAR(dcc_loss(one * 1.7, ds, ds, 2.0, 0.0).item<double>(), 3.4, 1e-12);
    EXPECT_THROW(dcc_loss(one, ds, ds, -1.0, 0.0), ConfigError);
}

// ---- interaction layer -----------------------------------------------------------

TEST(InteractionLayer, ShapesAndSimplexWeights) {
    torch::manual_seed(24);
    InteractionLayer layer(8, 2, 16);
    auto out = layer(torch::randn({3, 8}), torch::randn({3, 16, 8}), torch::randn({3, 5, 8}));
    EXPECT_EQ(out.z_s.sizes(), (std::vector<int64_t>{3, 8}));
    EXPECT_EQ(out.image_c.sizes(), (std::vector<int64_t>{3, 16, 8}));
    EXPECT_EQ(out.tabular_c.sizes(), (std::vector<int64_t>{3, 5, 8}));
    ASSERT_EQ(out.cross_weights.size(), 1u);
    EXPECT_EQ(out.cross_weights[0].sizes(), (std::vector<int64_t>{3, 2, 1, 22}));
    EXPECT_LT((out.cross_weights[0].sum(-1) - 1).abs().max().item<double>(), 1e-6);
    EXPECT_TRUE(torch::allclose(out.z_i_c, out.image_c.mean(1)));
}

TEST(InteractionLayer, UniformAttentionMeansAllValueRows) {
    // Single head, constant logits, identity value/output maps, no LayerNorm
    // effect on the context (identity affine with unit-variance rows).
    InteractionLayer layer(4, 1, 8);
    auto block = layer->cross[0]->as<TransformerBlock>();
    torch::NoGradGuard g;
    block->attention->query->weight.zero_();
    block->attention->query->bias.zero_();
    block->attention->value->weight.copy_(torch::eye(4));
    block->attention->value->bias.zero_();
    block->attention->output->weight.copy_(torch::eye(4));
    block->attention->output->bias.zero_();
    auto zs = torch::randn({1, 4});
    auto ic = torch::randn({1, 3, 4});
    auto tc = torch::randn({1, 2, 4});
    auto context = block->norm_context(torch::cat({zs.unsqueeze(1), ic, tc}, 1));
    auto att = block->attention(block->norm_attn(zs.unsqueeze(1)), context);
    EXPECT_LT((att.values[0][0] - context[0].mean(0)).abs().max().item<double>(), 1e-6);
}

TEST(InteractionLayer, GradientMatchesFiniteDifferences) {
    torch::manual_seed(25);
    InteractionLayer layer(4, 2, 8);
    layer->to(torch::kFloat64);
    auto zs = torch::randn({2, 4}, torch::kFloat64).requires_grad_(true);
    auto ic = torch::randn({2, 3, 4}, torch::kFloat64).requires_grad_(true);
    auto tc = torch::randn({2, 2, 4}, torch::kFloat64).requires_grad_(true);
    auto p1 = torch::randn({2, 4}, torch::kFloat64);
    auto p2 = torch::randn({2, 4}, torch::kFloat64);
    auto f = [&] {
        auto o = layer(zs, ic, tc);
        return (o.z_s * p1).sum() + (o.z_i_c * p2).sum() + o.z_t_c.pow(2).sum();
    };
    auto block = layer->cross[0]->as<TransformerBlock>();
    EXPECT_LT(test::gradient_check(f, {zs, ic, tc, block->attention->query->weight, block->attention->value->weight}),
              1e-3);
}
