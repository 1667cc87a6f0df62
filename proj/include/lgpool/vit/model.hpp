// SPDX-License-Identifier: Apache-2.0
//
// Vision transformer built from the op set in numerics/ops.hpp:
//
//   logits = head( block_L( ... block_1( embed(x) ) ) )
//
// Activations for a batch of B images are stacked as a (B*N) x dim matrix,
// N tokens per image with the cls token first. Tokenwise layers run on the
// whole stack; attention runs per image and per head.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lgpool/numerics/ops.hpp"
#include "lgpool/vit/config.hpp"

namespace lgp {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

namespace detail {

template <class T>
Var<T> clone_leaf(const Var<T>& v) {
    auto out = Var<T>::parameter(v.value());
    out.set_requires_grad(v.requires_grad());
    return out;
}

template <class T, class Rng>
Var<T> init_weight(Shape shape, Rng& rng) {
    return Var<T>::parameter(Tensor<T>::trunc_normal(std::move(shape), rng, 0.02));
}

template <class T>
Var<T> init_const(Shape shape, T v) {
    return Var<T>::parameter(Tensor<T>(std::move(shape), v));
}

}  // namespace detail

/// f^PE: linear patch projection, cls token and learned positions.
template <class T>
struct PatchEmbed {
    Var<T> weight;  // patch_dim x dim
    Var<T> bias;    // dim
    Var<T> cls;     // 1 x dim (absent when the config has no cls token)
    Var<T> pos;     // tokens x dim

    NamedParams<T> named_parameters(const std::string& prefix) const {
        NamedParams<T> out{{prefix + "patch.weight", weight}, {prefix + "patch.bias", bias}};
        if (cls.defined()) out.emplace_back(prefix + "cls", cls);
        out.emplace_back(prefix + "pos", pos);
        return out;
    }

    PatchEmbed clone() const {
        return {detail::clone_leaf(weight), detail::clone_leaf(bias), cls.defined() ? detail::clone_leaf(cls) : Var<T>{},
                detail::clone_leaf(pos)};
    }
};

/// f^i: LN -> MHSA -> residual -> LN -> MLP -> residual.
template <class T>
struct Block {
    std::size_t heads = 1;
    Var<T> ln1_gamma, ln1_beta;
    Var<T> qkv_weight, qkv_bias;    // dim x 3dim, 3dim
    Var<T> proj_weight, proj_bias;  // dim x dim, dim
    Var<T> ln2_gamma, ln2_beta;
    Var<T> fc1_weight, fc1_bias;  // dim x hidden, hidden
    Var<T> fc2_weight, fc2_bias;  // hidden x dim, dim

    std::size_t dim() const { return ln1_gamma.numel(); }

    NamedParams<T> named_parameters(const std::string& prefix) const {
        return {{prefix + "norm1.weight", ln1_gamma}, {prefix + "norm1.bias", ln1_beta},
                {prefix + "attn.qkv.weight", qkv_weight}, {prefix + "attn.qkv.bias", qkv_bias},
                {prefix + "attn.proj.weight", proj_weight}, {prefix + "attn.proj.bias", proj_bias},
                {prefix + "norm2.weight", ln2_gamma}, {prefix + "norm2.bias", ln2_beta},
                {prefix + "mlp.fc1.weight", fc1_weight}, {prefix + "mlp.fc1.bias", fc1_bias},
                {prefix + "mlp.fc2.weight", fc2_weight}, {prefix + "mlp.fc2.bias", fc2_bias}};
    }

    Block clone() const {
        Block b;
        b.heads = heads;
        auto src = named_parameters("");
        auto dst = std::vector<Var<T>*>{&b.ln1_gamma, &b.ln1_beta, &b.qkv_weight, &b.qkv_bias,
                                        &b.proj_weight, &b.proj_bias, &b.ln2_gamma, &b.ln2_beta,
                                        &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias};
        for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = detail::clone_leaf(src[i].second);
        return b;
    }
};

/// f^H: final LN on the cls token, then a linear classifier.
template <class T>
struct Head {
    Var<T> ln_gamma, ln_beta;
    Var<T> weight;  // dim x classes
    Var<T> bias;    // classes

    NamedParams<T> named_parameters(const std::string& prefix) const {
        return {{prefix + "norm.weight", ln_gamma}, {prefix + "norm.bias", ln_beta},
                {prefix + "weight", weight}, {prefix + "bias", bias}};
    }

    Head clone() const {
        return {detail::clone_leaf(ln_gamma), detail::clone_leaf(ln_beta), detail::clone_leaf(weight),
                detail::clone_leaf(bias)};
    }
};

template <class T>
struct VitModel {
    ModelConfig config;
    PatchEmbed<T> embed;
    std::vector<Block<T>> blocks;
    Head<T> head;

    NamedParams<T> named_parameters() const {
        auto out = embed.named_parameters("embed.");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto b = blocks[i].named_parameters("blocks." + std::to_string(i) + ".");
            out.insert(out.end(), b.begin(), b.end());
        }
        auto h = head.named_parameters("head.");
        out.insert(out.end(), h.begin(), h.end());
        return out;
    }

    std::vector<Var<T>> parameters() const {
        std::vector<Var<T>> out;
        for (auto& [name, v] : named_parameters()) out.push_back(v);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& [name, v] : named_parameters()) {
            auto copy = v;
            copy.set_requires_grad(on);
        }
    }

    /// Deep copy; the result shares no storage with this model.
    VitModel clone() const {
        VitModel m;
        m.config = config;
        m.embed = embed.clone();
        for (const auto& b : blocks) m.blocks.push_back(b.clone());
        m.head = head.clone();
        return m;
    }
};

template <class T, class Rng>
PatchEmbed<T> init_patch_embed(const ModelConfig& cfg, Rng& rng) {
    PatchEmbed<T> e;
    e.weight = detail::init_weight<T>({cfg.patch_dim(), cfg.dim}, rng);
    e.bias = detail::init_const<T>({cfg.dim}, T(0));
    if (cfg.use_cls_token) e.cls = detail::init_weight<T>({1, cfg.dim}, rng);
    e.pos = detail::init_weight<T>({cfg.tokens(), cfg.dim}, rng);
    return e;
}

template <class T, class Rng>
Block<T> init_block(const ModelConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.dim, h = cfg.hidden_dim();
    Block<T> b;
    b.heads = cfg.heads;
    b.ln1_gamma = detail::init_const<T>({d}, T(1));
    b.ln1_beta = detail::init_const<T>({d}, T(0));
    b.qkv_weight = detail::init_weight<T>({d, 3 * d}, rng);
    b.qkv_bias = detail::init_const<T>({3 * d}, T(0));
    b.proj_weight = detail::init_weight<T>({d, d}, rng);
    b.proj_bias = detail::init_const<T>({d}, T(0));
    b.ln2_gamma = detail::init_const<T>({d}, T(1));
    b.ln2_beta = detail::init_const<T>({d}, T(0));
    b.fc1_weight = detail::init_weight<T>({d, h}, rng);
    b.fc1_bias = detail::init_const<T>({h}, T(0));
    b.fc2_weight = detail::init_weight<T>({h, d}, rng);
    b.fc2_bias = detail::init_const<T>({d}, T(0));
    return b;
}

template <class T, class Rng>
Head<T> init_head(const ModelConfig& cfg, Rng& rng) {
    Head<T> h;
    h.ln_gamma = detail::init_const<T>({cfg.dim}, T(1));
    h.ln_beta = detail::init_const<T>({cfg.dim}, T(0));
    h.weight = detail::init_weight<T>({cfg.dim, cfg.num_classes}, rng);
    h.bias = detail::init_const<T>({cfg.num_classes}, T(0));
    return h;
}

/// Fresh model with DeiT-style initialization, deterministic in `seed`.
template <class T>
VitModel<T> init_vit(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    VitModel<T> m;
    m.config = cfg;
    m.embed = init_patch_embed<T>(cfg, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) m.blocks.push_back(init_block<T>(cfg, rng));
    m.head = init_head<T>(cfg, rng);
    return m;
}

/// Batch B x C x H x W -> (B * patches) x (C * p * p). Each patch vector is
/// laid out channel-major, then row, then column.
template <class T>
Tensor<T> patchify(const Tensor<T>& batch, const ModelConfig& cfg) {
    const Shape expect{0, cfg.channels, cfg.image_size, cfg.image_size};
    if (batch.rank() != 4 || batch.dim(1) != cfg.channels || batch.dim(2) != cfg.image_size ||
        batch.dim(3) != cfg.image_size) {
        throw ShapeError("input batch: expected [Bx" + std::to_string(cfg.channels) + "x" +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "], got " +
                         shape_str(batch.shape()));
    }
    const std::size_t B = batch.dim(0), C = cfg.channels, H = cfg.image_size, p = cfg.patch_size;
    const std::size_t side = cfg.patches_per_side(), P = cfg.num_patches(), pd = cfg.patch_dim();
    Tensor<T> out({B * P, pd});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t py = 0; py < side; ++py)
            for (std::size_t px = 0; px < side; ++px) {
                T* row = out.data().data() + ((b * P) + py * side + px) * pd;
                std::size_t k = 0;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t y = 0; y < p; ++y)
                        for (std::size_t x = 0; x < p; ++x)
                            row[k++] = batch[((b * C + c) * H + py * p + y) * H + px * p + x];
            }
    return out;
}

/// Token stack (B*N) x dim for a patchified batch.
template <class T>
Var<T> embed_forward(const PatchEmbed<T>& e, const Tensor<T>& patches, std::size_t batch) {
    const std::size_t P = patches.dim(0) / batch;
    const auto proj = add_row(matmul(Var<T>::constant(patches), e.weight), e.bias);
    std::vector<Var<T>> rows;
    rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        auto tok = slice_rows(proj, b * P, P);
        if (e.cls.defined()) tok = concat_rows<T>({e.cls, tok});
        rows.push_back(add(tok, e.pos));
    }
    return batch == 1 ? rows[0] : concat_rows(rows);
}

/// Multi-head self-attention sublayer output after the output projection,
/// before the residual add. x is the normalized (B*N) x dim stack.
template <class T>
Var<T> attention_forward(const Block<T>& blk, const Var<T>& x, std::size_t batch) {
    const std::size_t d = blk.dim(), heads = blk.heads, dh = d / heads;
    const std::size_t N = x.value().dim(0) / batch;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    const auto qkv = add_row(matmul(x, blk.qkv_weight), blk.qkv_bias);
    std::vector<Var<T>> per_image;
    per_image.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto rows = batch == 1 ? qkv : slice_rows(qkv, b * N, N);
        std::vector<Var<T>> per_head;
        per_head.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const auto q = slice_cols(rows, h * dh, dh);
            const auto k = slice_cols(rows, d + h * dh, dh);
            const auto v = slice_cols(rows, 2 * d + h * dh, dh);
            const auto att = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
            per_head.push_back(matmul(att, v));
        }
        per_image.push_back(heads == 1 ? per_head[0] : concat_cols(per_head));
    }
    const auto merged = batch == 1 ? per_image[0] : concat_rows(per_image);
    return add_row(matmul(merged, blk.proj_weight), blk.proj_bias);
}

/// One transformer block. When attn_tap is given it receives the attention
/// sublayer output.
template <class T>
Var<T> block_forward(const Block<T>& blk, const Var<T>& x, std::size_t batch, Var<T>* attn_tap = nullptr) {
    const auto a = attention_forward(blk, layer_norm(x, blk.ln1_gamma, blk.ln1_beta), batch);
    if (attn_tap) *attn_tap = a;
    const auto h = add(x, a);
    const auto hidden = gelu(add_row(matmul(layer_norm(h, blk.ln2_gamma, blk.ln2_beta), blk.fc1_weight), blk.fc1_bias));
    return add(h, add_row(matmul(hidden, blk.fc2_weight), blk.fc2_bias));
}

/// Classifier on the first token of each image: B x classes logits.
template <class T>
Var<T> head_forward(const Head<T>& head, const Var<T>& x, std::size_t batch) {
    const std::size_t N = x.value().dim(0) / batch;
    std::vector<Var<T>> cls_rows;
    cls_rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows.push_back(slice_rows(x, b * N, 1));
    const auto cls = batch == 1 ? cls_rows[0] : concat_rows(cls_rows);
    return add_row(matmul(layer_norm(cls, head.ln_gamma, head.ln_beta), head.weight), head.bias);
}

/// Model outputs plus every block output B_i and attention output A_i.
template <class T>
struct TapRecord {
    Var<T> logits;
    std::vector<Var<T>> block_outputs;
    std::vector<Var<T>> attn_outputs;
};

template <class T>
TapRecord<T> forward_with_taps(const VitModel<T>& model, const Tensor<T>& batch) {
    const auto patches = patchify(batch, model.config);
    const std::size_t B = batch.dim(0);
    TapRecord<T> taps;
    auto x = embed_forward(model.embed, patches, B);
    for (const auto& blk : model.blocks) {
        Var<T> a;
        x = block_forward(blk, x, B, &a);
        taps.attn_outputs.push_back(a);
        taps.block_outputs.push_back(x);
    }
    taps.logits = head_forward(model.head, x, B);
    return taps;
}

template <class T>
Var<T> forward(const VitModel<T>& model, const Tensor<T>& batch) {
    const auto patches = patchify(batch, model.config);
    const std::size_t B = batch.dim(0);
    auto x = embed_forward(model.embed, patches, B);
    for (const auto& blk : model.blocks) x = block_forward(blk, x, B);
    return head_forward(model.head, x, B);
}

template <class T>
std::size_t count_params(const VitModel<T>& model) {
    std::size_t n = 0;
    for (const auto& [name, v] : model.named_parameters()) n += v.numel();
    return n;
}

}  // namespace lgp
