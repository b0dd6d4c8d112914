#pragma once

#include <cmath>
#include <cstdint>

#include <torch/torch.h>

#include "stil/errors.hpp"

namespace stil::model {

struct AttentionOutput {
    torch::Tensor values;   // [N, Lq, D]
    torch::Tensor weights;  // [N, heads, Lq, Lk], rows on the simplex
};

/// Scaled dot-product attention softmax(Q K^T / sqrt(d_k)) V with d_k = D / heads.
/// Queries attend over `context`; self-attention passes the same tensor twice.
class MultiHeadAttentionImpl : public torch::nn::Module {
public:
    MultiHeadAttentionImpl(int64_t dim, int64_t heads) : dim_(dim), heads_(heads) {
        if (dim <= 0 || heads <= 0 || dim % heads != 0) {
            throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        }
        query = register_module("query", torch::nn::Linear(dim, dim));
        key = register_module("key", torch::nn::Linear(dim, dim));
        value = register_module("value", torch::nn::Linear(dim, dim));
        output = register_module("output", torch::nn::Linear(dim, dim));
    }

    AttentionOutput forward(const torch::Tensor& x, const torch::Tensor& context) {
        require(x.dim() == 3 && context.dim() == 3 && x.size(2) == dim_ && context.size(2) == dim_,
                "attention: expected [N,L,D] inputs");
        const auto n = x.size(0);
        const auto lq = x.size(1);
        const auto lk = context.size(1);
        const auto dk = dim_ / heads_;
        auto split = [&](const torch::Tensor& t, int64_t len) { return t.view({n, len, heads_, dk}).transpose(1, 2); };
        auto q = split(query(x), lq);
        auto k = split(key(context), lk);
        auto v = split(value(context), lk);
        auto weights = torch::softmax(q.matmul(k.transpose(-1, -2)) / std::sqrt(static_cast<double>(dk)), -1);
        auto mixed = weights.matmul(v).transpose(1, 2).reshape({n, lq, dim_});
        return {output(mixed), weights};
    }

    int64_t heads() const { return heads_; }

    torch::nn::Linear query{nullptr}, key{nullptr}, value{nullptr}, output{nullptr};

private:
    int64_t dim_;
    int64_t heads_;
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
public:
    FeedForwardImpl(int64_t dim, int64_t hidden) {
        fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
        fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
    }
    torch::Tensor forward(const torch::Tensor& x) { return fc2(torch::relu(fc1(x))); }

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm transformer block. `forward` is self-attention; `attend` lets the
/// block's tokens query a separate context sequence.
class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t dim, int64_t heads, int64_t ffn_hidden) {
        norm_attn = register_module("norm_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
        norm_context = register_module("norm_context", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
        norm_ffn = register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
        attention = register_module("attention", MultiHeadAttention(dim, heads));
        ffn = register_module("ffn", FeedForward(dim, ffn_hidden));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto normed = norm_attn(x);
        auto h = x + attention(normed, normed).values;
        return h + ffn(norm_ffn(h));
    }

    // Returns the block output together with the attention weights.
    AttentionOutput attend(const torch::Tensor& x, const torch::Tensor& context) {
        auto att = attention(norm_attn(x), norm_context(context));
        auto h = x + att.values;
        return {h + ffn(norm_ffn(h)), att.weights};
    }

    torch::nn::LayerNorm norm_attn{nullptr}, norm_context{nullptr}, norm_ffn{nullptr};
    MultiHeadAttention attention{nullptr};
    FeedForward ffn{nullptr};
};
TORCH_MODULE(TransformerBlock);

}  // namespace stil::model
