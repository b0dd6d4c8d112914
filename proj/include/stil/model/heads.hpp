#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "stil/errors.hpp"

namespace stil::model {

inline constexpr int64_t kProjectionDim = 128;

enum class Activation { relu, gelu };

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    throw ConfigError("unknown head_activation '" + s + "' (expected relu|gelu)");
}

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

/// Linear classifier; `forward` returns logits, `probabilities` the softmax.
class ClassifierImpl : public torch::nn::Module {
public:
    ClassifierImpl(int64_t in, int64_t classes) {
        if (classes < 2) throw ConfigError("need at least two classes");
        linear = register_module("linear", torch::nn::Linear(in, classes));
    }
    torch::Tensor forward(const torch::Tensor& x) { return linear(x); }
    torch::Tensor probabilities(const torch::Tensor& x) { return torch::softmax(linear(x), -1); }

    torch::nn::Linear linear{nullptr};
};
TORCH_MODULE(Classifier);

/// Two-layer MLP (hidden width D) to a 128-d embedding.
class ProjectionHeadImpl : public torch::nn::Module {
public:
    ProjectionHeadImpl(int64_t in, int64_t hidden, int64_t out = kProjectionDim, Activation act = Activation::relu)
        : act_(act) {
        fc1 = register_module("fc1", torch::nn::Linear(in, hidden));
        fc2 = register_module("fc2", torch::nn::Linear(hidden, out));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto h = fc1(x);
        h = act_ == Activation::relu ? torch::relu(h) : torch::gelu(h);
        return fc2(h);
    }

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};

private:
    Activation act_;
};
TORCH_MODULE(ProjectionHead);

/// z_s = Linear(concat(z_i_s, z_t_s)).
inline torch::Tensor fuse_shared(const torch::Tensor& z_i_s, const torch::Tensor& z_t_s, torch::nn::Linear& fuse) {
    require(z_i_s.sizes() == z_t_s.sizes(), "fuse_shared: shape mismatch");
    return fuse(torch::cat({z_i_s, z_t_s}, -1));
}

// Classifier input layouts.
inline torch::Tensor multimodal_input(const torch::Tensor& zhat_i_c, const torch::Tensor& zhat_s,
                                      const torch::Tensor& zhat_t_c) {
    return torch::cat({zhat_i_c, zhat_s, zhat_t_c}, -1);
}

inline torch::Tensor unimodal_input(const torch::Tensor& z_s_pooled, const torch::Tensor& zhat_c) {
    return torch::cat({z_s_pooled, zhat_c}, -1);
}

}  // namespace stil::model
