// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include "json.hpp"

#include "lgpool/errors.hpp"

namespace lgp {

/// Architecture of one DeiT-style vision transformer.
struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t dim = 64;
    std::size_t depth = 6;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 10;
    bool use_cls_token = true;

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t tokens() const { return num_patches() + (use_cls_token ? 1 : 0); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t hidden_dim() const { return mlp_ratio * dim; }
    std::size_t head_dim() const { return dim / heads; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
        if (image_size == 0 || patch_size == 0 || channels == 0 || dim == 0 || heads == 0 || mlp_ratio == 0 ||
            num_classes == 0)
            fail("all sizes must be positive");
        if (image_size % patch_size != 0)
            fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " + std::to_string(patch_size));
        if (dim % heads != 0) fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    }

    /// Same frame (input, classes, token layout), different width/depth.
    bool same_frame(const ModelConfig& o) const {
        return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels &&
               num_classes == o.num_classes && use_cls_token == o.use_cls_token;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
                       {"dim", c.dim},               {"depth", c.depth},           {"heads", c.heads},
                       {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"use_cls_token", c.use_cls_token}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("channels").get_to(c.channels);
    j.at("dim").get_to(c.dim);
    j.at("depth").get_to(c.depth);
    j.at("heads").get_to(c.heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("num_classes").get_to(c.num_classes);
    j.at("use_cls_token").get_to(c.use_cls_token);
}

namespace profiles {

/// DeiT frame: 224px input, 16px patches, 1000 classes.
inline ModelConfig deit(std::size_t dim, std::size_t depth, std::size_t heads) {
    ModelConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.channels = 3;
    c.dim = dim;
    c.depth = depth;
    c.heads = heads;
    c.num_classes = 1000;
    return c;
}

inline ModelConfig deit_tiny(std::size_t depth) { return deit(192, depth, 3); }
inline ModelConfig deit_base(std::size_t depth) { return deit(768, depth, 12); }

/// Desk-scale frame: 32px input, 4px patches.
inline ModelConfig mini(std::size_t dim, std::size_t depth, std::size_t heads, std::size_t num_classes = 10) {
    ModelConfig c;
    c.image_size = 32;
    c.patch_size = 4;
    c.channels = 3;
    c.dim = dim;
    c.depth = depth;
    c.heads = heads;
    c.num_classes = num_classes;
    return c;
}

}  // namespace profiles

}  // namespace lgp
