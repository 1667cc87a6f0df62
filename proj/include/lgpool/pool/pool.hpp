// SPDX-License-Identifier: Apache-2.0
//
// Learngene pool: two rows of transformer blocks harvested from a narrow and
// a wide auxiliary model, plus one stitch layer per split position.
//
// A path (k, m) runs the first k low-row instances, crosses stitch k, then
// runs high-row instances m..l. k = 0 starts in the high row, m = l + 1 ends
// in the low row.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "lgpool/io/binary.hpp"
#include "lgpool/numerics/linalg.hpp"
#include "lgpool/vit/model.hpp"

namespace lgp {

enum class Row { low, high };
enum class StitchInit { none, tm, ls, random };

inline std::string to_string(StitchInit s) {
    switch (s) {
        case StitchInit::none: return "none";
        case StitchInit::tm: return "tm";
        case StitchInit::ls: return "ls";
        case StitchInit::random: return "random";
    }
    return "none";
}

inline StitchInit stitch_init_from_string(const std::string& s) {
    if (s == "none") return StitchInit::none;
    if (s == "tm") return StitchInit::tm;
    if (s == "ls") return StitchInit::ls;
    if (s == "random") return StitchInit::random;
    throw ValidationError("unknown stitch init '" + s + "' (expected tm, ls or random)");
}

template <class T>
struct LearngeneInstance {
    Block<T> block;
    std::size_t dim = 0;
    Row row = Row::low;
    std::size_t position = 0;  // 1-based
};

/// Tokenwise d_low -> d_high linear map with bias.
template <class T>
struct StitchLayer {
    Var<T> weight;  // d_low x d_high
    Var<T> bias;    // d_high
    std::size_t split_position = 0;
    StitchInit init_source = StitchInit::none;

    bool initialized() const { return init_source != StitchInit::none; }
    Var<T> apply(const Var<T>& x) const { return add_row(matmul(x, weight), bias); }

    NamedParams<T> named_parameters(const std::string& prefix) const {
        return {{prefix + "weight", weight}, {prefix + "bias", bias}};
    }

    StitchLayer clone() const {
        return {detail::clone_leaf(weight), detail::clone_leaf(bias), split_position, init_source};
    }
};

template <class T>
struct LearngenePool {
    ModelConfig low_config;
    ModelConfig high_config;
    std::vector<LearngeneInstance<T>> low_row;
    std::vector<LearngeneInstance<T>> high_row;
    std::vector<StitchLayer<T>> stitches;  // stitches[s - 1] sits after low instance s
    PatchEmbed<T> low_embed, high_embed;
    Head<T> low_head, high_head;

    std::size_t length() const { return low_row.size(); }
    std::size_t d_low() const { return low_config.dim; }
    std::size_t d_high() const { return high_config.dim; }

    StitchLayer<T>& stitch(std::size_t s) { return stitches.at(s - 1); }
    const StitchLayer<T>& stitch(std::size_t s) const { return stitches.at(s - 1); }

    NamedParams<T> named_parameters() const {
        NamedParams<T> out;
        auto append = [&](NamedParams<T> p) { out.insert(out.end(), p.begin(), p.end()); };
        append(low_embed.named_parameters("low.embed."));
        for (const auto& inst : low_row) append(inst.block.named_parameters("low.blocks." + std::to_string(inst.position) + "."));
        append(low_head.named_parameters("low.head."));
        append(high_embed.named_parameters("high.embed."));
        for (const auto& inst : high_row)
            append(inst.block.named_parameters("high.blocks." + std::to_string(inst.position) + "."));
        append(high_head.named_parameters("high.head."));
        for (const auto& st : stitches) append(st.named_parameters("stitch." + std::to_string(st.split_position) + "."));
        return out;
    }

    LearngenePool clone() const {
        LearngenePool p;
        p.low_config = low_config;
        p.high_config = high_config;
        for (const auto& i : low_row) p.low_row.push_back({i.block.clone(), i.dim, i.row, i.position});
        for (const auto& i : high_row) p.high_row.push_back({i.block.clone(), i.dim, i.row, i.position});
        for (const auto& s : stitches) p.stitches.push_back(s.clone());
        p.low_embed = low_embed.clone();
        p.high_embed = high_embed.clone();
        p.low_head = low_head.clone();
        p.high_head = high_head.clone();
        return p;
    }
};

/// FNV-1a over parameter names and raw values, in declaration order.
template <class T>
std::uint64_t pool_checksum(const LearngenePool<T>& pool) {
    std::uint64_t h = io::fnv1a64(std::string_view{});
    h = io::fnv1a64(std::to_string(pool.d_low()) + "x" + std::to_string(pool.d_high()), h);
    for (const auto& [name, v] : pool.named_parameters()) {
        h = io::fnv1a64(name, h);
        const auto d = v.value().data();
        h = io::fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(d.data()), d.size_bytes()), h);
    }
    return h;
}

struct Path {
    std::size_t k = 0;  // low-row prefix length
    std::size_t m = 1;  // first high-row instance; l + 1 means none

    std::string id() const { return "k" + std::to_string(k) + "m" + std::to_string(m); }

    static Path parse(const std::string& s) {
        static const std::regex re(R"(k(\d+)m(\d+))");
        std::smatch mt;
        if (!std::regex_match(s, mt, re)) throw ValidationError("bad path id '" + s + "' (expected k<k>m<m>)");
        return {std::stoul(mt[1].str()), std::stoul(mt[2].str())};
    }

    std::size_t high_count(std::size_t l) const { return m <= l ? l - m + 1 : 0; }
    std::size_t depth(std::size_t l) const { return k + high_count(l); }
    bool uses_stitch(std::size_t l) const { return k >= 1 && m <= l; }
    bool ends_high(std::size_t l) const { return m <= l; }

    void validate(std::size_t l) const {
        if (k > l || m < 1 || m > l + 1 || depth(l) < 1)
            throw ValidationError("path " + id() + " is not valid for a pool of length " + std::to_string(l));
    }

    friend bool operator==(const Path&, const Path&) = default;
};

enum class PathMode { table, general };

inline PathMode path_mode_from_string(const std::string& s) {
    if (s == "table") return PathMode::table;
    if (s == "general") return PathMode::general;
    throw ValidationError("unknown path mode '" + s + "' (expected table or general)");
}

/// Table mode: the l + 1 split paths (k, k + 1). General mode: every (k, m)
/// with at least one block.
inline std::vector<Path> enumerate_paths(std::size_t l, PathMode mode) {
    std::vector<Path> out;
    if (mode == PathMode::table) {
        for (std::size_t k = 0; k <= l; ++k) out.push_back({k, k + 1});
        return out;
    }
    for (std::size_t k = 0; k <= l; ++k)
        for (std::size_t m = 1; m <= l + 1; ++m) {
            const Path p{k, m};
            if (p.depth(l) >= 1) out.push_back(p);
        }
    return out;
}

template <class T>
std::vector<Path> enumerate_paths(const LearngenePool<T>& pool, PathMode mode) {
    return enumerate_paths(pool.length(), mode);
}

template <class Rng>
Path sample_path(const std::vector<Path>& paths, Rng& rng) {
    if (paths.empty()) throw ValidationError("sample_path: empty path space");
    std::uniform_int_distribution<std::size_t> pick(0, paths.size() - 1);
    return paths[pick(rng)];
}

/// Harvest both auxiliary models. Stitch slots start zeroed and uninitialized.
template <class T>
LearngenePool<T> build_pool(const VitModel<T>& aux_low, const VitModel<T>& aux_high) {
    const auto& lo = aux_low.config;
    const auto& hi = aux_high.config;
    if (!lo.same_frame(hi)) throw ValidationError("build_pool: auxiliary models use different input frames");
    if (lo.depth != hi.depth || aux_low.blocks.size() != aux_high.blocks.size())
        throw ValidationError("build_pool: depth mismatch (low " + std::to_string(lo.depth) + ", high " +
                              std::to_string(hi.depth) + ")");
    if (lo.depth < 1) throw ValidationError("build_pool: auxiliary models have no blocks");
    if (lo.dim > hi.dim)
        throw ValidationError("build_pool: low row is wider than high row (" + std::to_string(lo.dim) + " > " +
                              std::to_string(hi.dim) + "); stitching goes narrow to wide");
    LearngenePool<T> pool;
    pool.low_config = lo;
    pool.high_config = hi;
    for (std::size_t i = 0; i < lo.depth; ++i) {
        pool.low_row.push_back({aux_low.blocks[i].clone(), lo.dim, Row::low, i + 1});
        pool.high_row.push_back({aux_high.blocks[i].clone(), hi.dim, Row::high, i + 1});
        pool.stitches.push_back({Var<T>::parameter(Tensor<T>::zeros({lo.dim, hi.dim})),
                                 Var<T>::parameter(Tensor<T>::zeros({hi.dim})), i + 1, StitchInit::none});
    }
    pool.low_embed = aux_low.embed.clone();
    pool.high_embed = aux_high.embed.clone();
    pool.low_head = aux_low.head.clone();
    pool.high_head = aux_high.head.clone();
    return pool;
}

enum class TmOrientation { transpose, pinv };

/// Mean of the learned block matrices (each d_anc x d_low), oriented
/// d_low -> d_high, written into every stitch slot. Biases reset to zero.
template <class T>
void init_stitch_tm(LearngenePool<T>& pool, const std::vector<Tensor<T>>& learned, TmOrientation orient = TmOrientation::transpose) {
    if (learned.empty()) throw ValidationError("init_stitch_tm: no learned matrices given");
    const Shape expect{pool.d_high(), pool.d_low()};
    for (const auto& w : learned)
        if (w.shape() != expect)
            throw ShapeError("init_stitch_tm: learned matrix " + shape_str(w.shape()) + ", expected " + shape_str(expect) +
                             " (ancestry width must equal the high-row width)");
    Tensor<T> mean(expect);
    for (std::size_t i = 0; i < mean.numel(); ++i) {
        T acc = 0;
        for (const auto& w : learned) acc += w[i];
        mean[i] = acc / static_cast<T>(learned.size());
    }
    const Tensor<T> oriented = orient == TmOrientation::transpose ? transposed(mean) : pseudo_inverse(mean);
    for (auto& st : pool.stitches) {
        st.weight.mutable_value() = oriented;
        st.bias.mutable_value().fill(T(0));
        st.init_source = StitchInit::tm;
    }
}

struct StitchInitReport {
    std::vector<std::size_t> rank_deficient;  // split positions
    std::vector<std::string> warnings;
};

/// For each split position s, fit the low activations after instance s to
/// the high activations after instance s by least squares.
template <class T>
StitchInitReport init_stitch_ls(LearngenePool<T>& pool, const Tensor<T>& calib_images) {
    const std::size_t B = calib_images.rank() == 4 ? calib_images.dim(0) : 0;
    auto x_low = embed_forward(pool.low_embed, patchify(calib_images, pool.low_config), B);
    auto x_high = embed_forward(pool.high_embed, patchify(calib_images, pool.high_config), B);
    StitchInitReport report;
    for (std::size_t s = 1; s <= pool.length(); ++s) {
        x_low = block_forward(pool.low_row[s - 1].block, x_low, B);
        x_high = block_forward(pool.high_row[s - 1].block, x_high, B);
        if (x_low.value().dim(0) < pool.d_low())
            throw ValidationError("init_stitch_ls: calibration batch has " + std::to_string(x_low.value().dim(0)) +
                                  " token rows, need at least d_low = " + std::to_string(pool.d_low()));
        const auto fit = least_squares_solve(x_low.value(), x_high.value());
        auto& st = pool.stitch(s);
        st.weight.mutable_value() = fit.solution;
        st.bias.mutable_value().fill(T(0));
        st.init_source = StitchInit::ls;
        if (fit.rank_deficient) {
            report.rank_deficient.push_back(s);
            report.warnings.push_back("stitch " + std::to_string(s) + ": low activations have rank " +
                                      std::to_string(fit.rank) + " < " + std::to_string(pool.d_low()) +
                                      "; using the minimum-norm solution");
        }
    }
    return report;
}

template <class T>
void init_stitch_random(LearngenePool<T>& pool, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(pool.d_low()));
    for (auto& st : pool.stitches) {
        st.weight.mutable_value() = Tensor<T>::randn({pool.d_low(), pool.d_high()}, rng, sd);
        st.bias.mutable_value().fill(T(0));
        st.init_source = StitchInit::random;
    }
}

/// Run a batch along a path of the pool: B x classes logits.
template <class T>
Var<T> pool_forward(const LearngenePool<T>& pool, const Path& path, const Tensor<T>& images) {
    const std::size_t l = pool.length();
    path.validate(l);
    if (path.uses_stitch(l) && !pool.stitch(path.k).initialized())
        throw ValidationError("path " + path.id() + " crosses stitch " + std::to_string(path.k) +
                              ", which is uninitialized; run a stitch init first");
    const bool low_start = path.k >= 1;
    const auto& frame = low_start ? pool.low_config : pool.high_config;
    const std::size_t B = images.rank() == 4 ? images.dim(0) : 0;
    auto x = embed_forward(low_start ? pool.low_embed : pool.high_embed, patchify(images, frame), B);
    for (std::size_t i = 1; i <= path.k; ++i) x = block_forward(pool.low_row[i - 1].block, x, B);
    if (path.uses_stitch(l)) x = pool.stitch(path.k).apply(x);
    for (std::size_t i = path.m; i <= l; ++i) x = block_forward(pool.high_row[i - 1].block, x, B);
    return head_forward(path.ends_high(l) ? pool.high_head : pool.low_head, x, B);
}

/// Trainable tensors touched by a path. With freeze_instances the blocks are
/// left out.
template <class T>
std::vector<Var<T>> path_parameters(const LearngenePool<T>& pool, const Path& path, bool freeze_instances = false) {
    const std::size_t l = pool.length();
    path.validate(l);
    std::vector<Var<T>> out;
    auto append = [&](const NamedParams<T>& p) {
        for (const auto& [n, v] : p) out.push_back(v);
    };
    append((path.k >= 1 ? pool.low_embed : pool.high_embed).named_parameters(""));
    if (!freeze_instances) {
        for (std::size_t i = 1; i <= path.k; ++i) append(pool.low_row[i - 1].block.named_parameters(""));
        for (std::size_t i = path.m; i <= l; ++i) append(pool.high_row[i - 1].block.named_parameters(""));
    }
    if (path.uses_stitch(l)) append(pool.stitch(path.k).named_parameters(""));
    append((path.ends_high(l) ? pool.high_head : pool.low_head).named_parameters(""));
    return out;
}

}  // namespace lgp
