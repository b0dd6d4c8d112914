#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "stil/data/schema.hpp"
#include "stil/model/dcc.hpp"
#include "stil/model/encoders.hpp"
#include "stil/model/heads.hpp"

namespace stil::model {

struct ModelConfig {
    EncoderConfig encoder;
    int64_t classes = 2;
    int64_t interaction_blocks = 1;
    int64_t projection_dim = kProjectionDim;
    Activation head_activation = Activation::relu;
};

struct ModelOutput {
    torch::Tensor logits_m, logits_i, logits_t;  // [N,C]
    torch::Tensor z_i_s, z_i_c, z_t_s, z_t_c;    // pooled split tokens, [N,D]
    torch::Tensor z_s;                           // fused shared vector before interaction
    InteractionOutput interaction;               // enhanced z_s and specific tokens
    torch::Tensor embedding;                     // h([zhat_i_c, zhat_s, zhat_t_c]), [N,128]

    torch::Tensor prob_m() const { return torch::softmax(logits_m, -1); }
    torch::Tensor prob_i() const { return torch::softmax(logits_i, -1); }
    torch::Tensor prob_t() const { return torch::softmax(logits_t, -1); }
};

/// Student/teacher network: encoders, shared/specific split, interaction layer,
/// classifiers f^m, f^i, f^t and projection heads g^i, g^t, h.
class StilModelImpl : public torch::nn::Module {
public:
    StilModelImpl(const ModelConfig& cfg, const data::TabularSchema& schema) : cfg_(cfg) {
        const auto d = cfg.encoder.dim;
        const auto ffn = cfg.encoder.ffn_mult * d;
        image_encoder = register_module("image_encoder", ImageEncoder(cfg.encoder));
        tabular_encoder = register_module("tabular_encoder", TabularEncoder(cfg.encoder, schema));
        split_image = register_module("split_image", SplitProjection(d));
        split_tabular = register_module("split_tabular", SplitProjection(d));
        fuse = register_module("fuse", torch::nn::Linear(2 * d, d));
        interaction = register_module("interaction", InteractionLayer(d, cfg.encoder.heads, ffn, cfg.interaction_blocks));
        f_m = register_module("f_m", Classifier(3 * d, cfg.classes));
        f_i = register_module("f_i", Classifier(2 * d, cfg.classes));
        f_t = register_module("f_t", Classifier(2 * d, cfg.classes));
        g_i = register_module("g_i", ProjectionHead(d, d, cfg.projection_dim, cfg.head_activation));
        g_t = register_module("g_t", ProjectionHead(d, d, cfg.projection_dim, cfg.head_activation));
        h = register_module("h", ProjectionHead(3 * d, d, cfg.projection_dim, cfg.head_activation));
    }

    ModelOutput forward(const torch::Tensor& images, const torch::Tensor& tabular) {
        ModelOutput o;
        auto [i_s, i_c] = split_image(image_encoder(images));
        auto [t_s, t_c] = split_tabular(tabular_encoder(tabular));
        o.z_i_s = pool(i_s);
        o.z_i_c = pool(i_c);
        o.z_t_s = pool(t_s);
        o.z_t_c = pool(t_c);
        o.z_s = fuse_shared(o.z_i_s, o.z_t_s, fuse);
        o.interaction = interaction(o.z_s, i_c, t_c);
        const auto& it = o.interaction;
        auto joint = multimodal_input(it.z_i_c, it.z_s, it.z_t_c);
        o.logits_m = f_m(joint);
        o.logits_i = f_i(unimodal_input(o.z_i_s, it.z_i_c));
        o.logits_t = f_t(unimodal_input(o.z_t_s, it.z_t_c));
        o.embedding = h(joint);
        return o;
    }

    const ModelConfig& config() const { return cfg_; }

    ImageEncoder image_encoder{nullptr};
    TabularEncoder tabular_encoder{nullptr};
    SplitProjection split_image{nullptr}, split_tabular{nullptr};
    torch::nn::Linear fuse{nullptr};
    InteractionLayer interaction{nullptr};
    Classifier f_m{nullptr}, f_i{nullptr}, f_t{nullptr};
    ProjectionHead g_i{nullptr}, g_t{nullptr}, h{nullptr};

private:
    ModelConfig cfg_;
};
TORCH_MODULE(StilModel);

}  // namespace stil::model
