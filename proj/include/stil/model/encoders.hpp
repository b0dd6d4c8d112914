#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stil/data/schema.hpp"
#include "stil/errors.hpp"
#include "stil/model/attention.hpp"

namespace stil::model {

enum class TokenProjection {
    positional,  // flatten the feature map, one linear map to L^i*D (position-specific weights)
    shared,      // per-cell linear map C->D plus a learned positional embedding
};

inline TokenProjection parse_token_projection(const std::string& s) {
    if (s == "positional") return TokenProjection::positional;
    if (s == "shared") return TokenProjection::shared;
    throw ConfigError("unknown image_token_projection '" + s + "' (expected positional|shared)");
}

inline std::string to_string(TokenProjection p) { return p == TokenProjection::positional ? "positional" : "shared"; }

struct EncoderConfig {
    int64_t dim = 64;
    int64_t image_channels = 1;
    int64_t image_size = 32;
    std::vector<int64_t> stage_channels{16, 32, 64};  // each stage: conv3x3 + ReLU + 2x2 max-pool
    TokenProjection token_projection = TokenProjection::positional;
    int64_t tabular_layers = 2;
    int64_t heads = 4;
    int64_t ffn_mult = 2;

    int64_t grid() const { return image_size >> static_cast<int>(stage_channels.size()); }
    int64_t image_tokens() const { return grid() * grid(); }

    void validate() const {
        if (dim <= 0) throw ConfigError("encoder dim must be positive");
        if (heads <= 0 || dim % heads != 0) throw ConfigError("encoder dim must be divisible by heads");
        if (image_channels <= 0) throw ConfigError("image_channels must be positive");
        if (stage_channels.empty()) throw ConfigError("image encoder needs at least one stage");
        for (auto c : stage_channels) {
            if (c <= 0) throw ConfigError("stage channel counts must be positive");
        }
        const auto div = int64_t{1} << stage_channels.size();
        if (image_size <= 0 || image_size % div != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by 2^stages = " +
                              std::to_string(div));
        }
        if (tabular_layers < 0) throw ConfigError("tabular_layers must be >= 0");
        if (ffn_mult <= 0) throw ConfigError("ffn_mult must be positive");
    }
};

/// Small CNN producing [N, L^i, D] tokens from [N, C, H, W] images.
class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        int64_t in = cfg.image_channels;
        for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
            auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(in, cfg.stage_channels[s], 3).padding(1));
            torch::nn::init::zeros_(conv->bias);
            convs->push_back(conv);
            in = cfg.stage_channels[s];
        }
        register_module("convs", convs);
        const auto cells = cfg.image_tokens();
        if (cfg.token_projection == TokenProjection::positional) {
            projection = register_module("projection", torch::nn::Linear(in * cells, cells * cfg.dim));
        } else {
            projection = register_module("projection", torch::nn::Linear(in, cfg.dim));
            position = register_parameter("position", torch::zeros({cells, cfg.dim}));
        }
        torch::nn::init::zeros_(projection->bias);
    }

    torch::Tensor forward(const torch::Tensor& images) {
        if (images.dim() != 4 || images.size(1) != cfg_.image_channels || images.size(2) != cfg_.image_size ||
            images.size(3) != cfg_.image_size) {
            throw ContractViolation("image encoder: expected [N," + std::to_string(cfg_.image_channels) + "," +
                                    std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "]");
        }
        auto x = images;
        for (const auto& m : *convs) {
            x = torch::max_pool2d(torch::relu(m->as<torch::nn::Conv2d>()->forward(x)), 2);
        }
        const auto n = x.size(0);
        const auto cells = cfg_.image_tokens();
        if (cfg_.token_projection == TokenProjection::positional) {
            return projection(x.flatten(1)).view({n, cells, cfg_.dim});
        }
        return projection(x.flatten(2).transpose(1, 2)) + position;
    }

    torch::nn::ModuleList convs;
    torch::nn::Linear projection{nullptr};
    torch::Tensor position;

private:
    EncoderConfig cfg_;
};
TORCH_MODULE(ImageEncoder);

/// One token per column: categorical -> embedding lookup, continuous -> value *
/// learned direction; plus an additive column embedding, then transformer blocks.
class TabularEncoderImpl : public torch::nn::Module {
public:
    TabularEncoderImpl(const EncoderConfig& cfg, const data::TabularSchema& schema) : cfg_(cfg) {
        cfg.validate();
        require(schema.size() > 0, "tabular encoder: empty schema");
        for (int64_t j = 0; j < schema.size(); ++j) {
            const auto& c = schema[j];
            cardinalities_.push_back(c.is_categorical() ? c.cardinality : 0);
            if (c.is_categorical()) {
                cat_columns_.push_back(j);
                offsets_.push_back(total_categories_);
                total_categories_ += c.cardinality;
            } else {
                cont_columns_.push_back(j);
            }
        }
        const auto width = schema.size();
        if (total_categories_ > 0) {
            embedding = register_module("embedding", torch::nn::Embedding(total_categories_, cfg.dim));
        }
        direction = register_parameter("direction", torch::randn({static_cast<int64_t>(cont_columns_.size()), cfg.dim}) * 0.1);
        column = register_parameter("column", torch::randn({width, cfg.dim}) * 0.02);
        for (int64_t l = 0; l < cfg.tabular_layers; ++l) {
            blocks->push_back(TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_mult * cfg.dim));
        }
        register_module("blocks", blocks);
        cat_index_ = torch::tensor(cat_columns_, torch::kInt64);
        cont_index_ = torch::tensor(cont_columns_, torch::kInt64);
        offset_ = torch::tensor(offsets_, torch::kInt64);
    }

    int64_t width() const { return static_cast<int64_t>(cardinalities_.size()); }

    /// Tokens before the transformer blocks (column embedding included).
    torch::Tensor tokenize(const torch::Tensor& rows) {
        if (rows.dim() != 2 || rows.size(1) != width()) {
            throw ContractViolation("tabular encoder: expected [N," + std::to_string(width()) + "] rows");
        }
        const auto n = rows.size(0);
        auto tokens = torch::zeros({n, width(), cfg_.dim}, column.options());
        if (!cat_columns_.empty()) {
            auto ordinals = rows.index_select(1, cat_index_).round().to(torch::kInt64);
            auto card = torch::tensor(cat_cardinalities(), torch::kInt64);
            if ((ordinals < 0).any().item<bool>() || (ordinals >= card).any().item<bool>()) {
                throw ContractViolation("tabular encoder: categorical ordinal out of range");
            }
            tokens = tokens.index_copy(1, cat_index_, embedding(ordinals + offset_));
        }
        if (!cont_columns_.empty()) {
            auto values = rows.index_select(1, cont_index_).to(column.scalar_type());
            tokens = tokens.index_copy(1, cont_index_, values.unsqueeze(-1) * direction);
        }
        return tokens + column;
    }

    torch::Tensor forward(const torch::Tensor& rows) {
        auto t = tokenize(rows);
        for (const auto& b : *blocks) t = b->as<TransformerBlock>()->forward(t);
        return t;
    }

    torch::nn::Embedding embedding{nullptr};
    torch::Tensor direction;
    torch::Tensor column;
    torch::nn::ModuleList blocks;

private:
    std::vector<int64_t> cat_cardinalities() const {
        std::vector<int64_t> out;
        for (auto j : cat_columns_) out.push_back(cardinalities_[static_cast<size_t>(j)]);
        return out;
    }

    EncoderConfig cfg_;
    std::vector<int64_t> cardinalities_;
    std::vector<int64_t> cat_columns_, cont_columns_, offsets_;
    int64_t total_categories_ = 0;
    torch::Tensor cat_index_, cont_index_, offset_;
};
TORCH_MODULE(TabularEncoder);

}  // namespace stil::model
