// SPDX-License-Identifier: Apache-2.0
//
// Closed-form parameter and FLOPs counts. FLOPs count one multiply-accumulate
// as one FLOP and cover every matrix product of the forward pass (patch
// projection, QKV/output projections, attention scores and weighted values,
// MLP, classifier, stitch). Norms, softmax and GELU are not counted.

#pragma once

#include <cstdint>

#include "lgpool/vit/config.hpp"

namespace lgp::accounting {

inline std::uint64_t embed_params(const ModelConfig& c) {
    return c.patch_dim() * c.dim + c.dim + (c.use_cls_token ? c.dim : 0) + c.tokens() * c.dim;
}

/// 12 d^2 + 13 d for the default mlp_ratio of 4.
inline std::uint64_t block_params(std::uint64_t dim, std::uint64_t mlp_ratio) {
    const std::uint64_t h = mlp_ratio * dim;
    return 4 * dim                   // two layer norms
           + 3 * dim * dim + 3 * dim  // qkv
           + dim * dim + dim          // output projection
           + dim * h + h              // fc1
           + h * dim + dim;           // fc2
}

inline std::uint64_t head_params(std::uint64_t dim, std::uint64_t classes) { return 2 * dim + dim * classes + classes; }

/// Tokenwise linear map plus bias.
inline std::uint64_t stitch_params(std::uint64_t d_in, std::uint64_t d_out) { return d_in * d_out + d_out; }

inline std::uint64_t count_params(const ModelConfig& c) {
    return embed_params(c) + c.depth * block_params(c.dim, c.mlp_ratio) + head_params(c.dim, c.num_classes);
}

inline std::uint64_t embed_flops(const ModelConfig& c) {
    return static_cast<std::uint64_t>(c.num_patches()) * c.patch_dim() * c.dim;
}

inline std::uint64_t block_flops(std::uint64_t tokens, std::uint64_t dim, std::uint64_t mlp_ratio) {
    const std::uint64_t n = tokens, h = mlp_ratio * dim;
    return n * dim * 3 * dim  // qkv
           + n * n * dim      // q k^T over all heads
           + n * n * dim      // attention-weighted values
           + n * dim * dim    // output projection
           + 2 * n * dim * h; // MLP
}

/// The classifier only runs on the cls token.
inline std::uint64_t head_flops(std::uint64_t dim, std::uint64_t classes) { return dim * classes; }

inline std::uint64_t stitch_flops(std::uint64_t tokens, std::uint64_t d_in, std::uint64_t d_out) {
    return tokens * d_in * d_out;
}

inline std::uint64_t count_flops(const ModelConfig& c) {
    return embed_flops(c) + c.depth * block_flops(c.tokens(), c.dim, c.mlp_ratio) + head_flops(c.dim, c.num_classes);
}

/// Frame of `c` evaluated at a different input resolution.
inline std::uint64_t count_flops(ModelConfig c, std::size_t image_size) {
    c.image_size = image_size;
    c.validate();
    return count_flops(c);
}

}  // namespace lgp::accounting
