// SPDX-License-Identifier: Apache-2.0
// Small fixtures shared by the unit suites.

#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "lgpool/io/dataset.hpp"
#include "lgpool/pool/pool.hpp"
#include "lgpool/vit/model.hpp"

namespace lgp::testing {

/// 8px frame, 4px patches: 4 patches + cls = 5 tokens, 3 classes.
inline ModelConfig tiny(std::size_t dim, std::size_t depth, std::size_t heads = 1, std::size_t classes = 3) {
    ModelConfig c = profiles::mini(dim, depth, heads, classes);
    c.image_size = 8;
    return c;
}

template <class T>
Tensor<T> random_images(const ModelConfig& c, std::size_t batch, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Tensor<T>::randn({batch, c.channels, c.image_size, c.image_size}, rng);
}

inline std::vector<std::size_t> iota_idx(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

/// Copy every parameter value of `src` into the matching leaf of `dst`.
template <class T, class M>
void copy_params(const M& src, M& dst) {
    auto s = src.named_parameters();
    auto d = dst.named_parameters();
    for (std::size_t i = 0; i < s.size(); ++i) d[i].second.mutable_value() = s[i].second.value();
}

template <class T>
Tensor<double> to_double(const Tensor<T>& t) {
    return t.template cast<double>();
}

/// Zero every weight and bias of a block, making it the identity map.
template <class T>
void zero_block(Block<T>& b) {
    for (auto& [n, v] : b.named_parameters("")) {
        auto copy = v;
        copy.mutable_value().fill(T(0));
    }
}

/// Pool whose blocks are identities and whose high embed is the low embed
/// times `planted`, so high activations equal low activations times X.
template <class T>
LearngenePool<T> planted_pool(const ModelConfig& low, const ModelConfig& high, std::uint64_t seed, Tensor<T>& planted) {
    auto lo = init_vit<T>(low, seed);
    auto hi = init_vit<T>(high, seed + 1);
    std::mt19937_64 rng(seed + 2);
    // Embeds with O(1) entries keep the low activations well conditioned.
    for (auto* v : {&lo.embed.weight, &lo.embed.bias, &lo.embed.cls, &lo.embed.pos})
        v->mutable_value() = Tensor<T>::randn(v->shape(), rng);
    planted = Tensor<T>::randn({low.dim, high.dim}, rng);
    auto times_x = [&](const Tensor<T>& a) {
        const auto m = a.rank() == 1 ? a.reshaped({1, a.numel()}) : a;
        const auto r = matmul(Var<T>::constant(m), Var<T>::constant(planted)).value();
        return a.rank() == 1 ? r.reshaped({r.numel()}) : r;
    };
    hi.embed.weight.mutable_value() = times_x(lo.embed.weight.value());
    hi.embed.bias.mutable_value() = times_x(lo.embed.bias.value());
    hi.embed.cls.mutable_value() = times_x(lo.embed.cls.value());
    hi.embed.pos.mutable_value() = times_x(lo.embed.pos.value());
    for (auto& b : lo.blocks) zero_block(b);
    for (auto& b : hi.blocks) zero_block(b);
    return build_pool(lo, hi);
}

}  // namespace lgp::testing
