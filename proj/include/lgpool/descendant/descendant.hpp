// SPDX-License-Identifier: Apache-2.0
//
// Descendant models: standalone copies of one pool path, their cost, and
// budget-driven path selection.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "lgpool/io/dataset.hpp"
#include "lgpool/pool/pool.hpp"
#include "lgpool/vit/accounting.hpp"

namespace lgp {

template <class T>
struct DescendantModel {
    ModelConfig low_config;
    ModelConfig high_config;
    Path path;
    std::size_t pool_length = 0;
    std::uint64_t pool_checksum = 0;

    PatchEmbed<T> embed;
    std::vector<Block<T>> low_blocks;
    std::optional<StitchLayer<T>> stitch;
    std::vector<Block<T>> high_blocks;
    Head<T> head;

    /// Frame of the embed actually used (low if the path starts low).
    const ModelConfig& embed_config() const { return path.k >= 1 ? low_config : high_config; }

    NamedParams<T> named_parameters() const {
        NamedParams<T> out;
        auto append = [&](NamedParams<T> p) { out.insert(out.end(), p.begin(), p.end()); };
        append(embed.named_parameters("embed."));
        for (std::size_t i = 0; i < low_blocks.size(); ++i)
            append(low_blocks[i].named_parameters("low.blocks." + std::to_string(i + 1) + "."));
        if (stitch) append(stitch->named_parameters("stitch."));
        for (std::size_t i = 0; i < high_blocks.size(); ++i)
            append(high_blocks[i].named_parameters("high.blocks." + std::to_string(path.m + i) + "."));
        append(head.named_parameters("head."));
        return out;
    }

    std::size_t depth() const { return low_blocks.size() + high_blocks.size(); }
};

/// Copy one path out of the pool. The result shares no storage with it.
template <class T>
DescendantModel<T> assemble(const LearngenePool<T>& pool, const Path& path) {
    const std::size_t l = pool.length();
    path.validate(l);
    if (path.uses_stitch(l) && !pool.stitch(path.k).initialized())
        throw ValidationError("assemble: path " + path.id() + " crosses uninitialized stitch " + std::to_string(path.k));
    DescendantModel<T> d;
    d.low_config = pool.low_config;
    d.high_config = pool.high_config;
    d.path = path;
    d.pool_length = l;
    d.pool_checksum = pool_checksum(pool);
    d.embed = (path.k >= 1 ? pool.low_embed : pool.high_embed).clone();
    for (std::size_t i = 1; i <= path.k; ++i) d.low_blocks.push_back(pool.low_row[i - 1].block.clone());
    if (path.uses_stitch(l)) d.stitch = pool.stitch(path.k).clone();
    for (std::size_t i = path.m; i <= l; ++i) d.high_blocks.push_back(pool.high_row[i - 1].block.clone());
    d.head = (path.ends_high(l) ? pool.high_head : pool.low_head).clone();
    return d;
}

template <class T>
Var<T> forward(const DescendantModel<T>& model, const Tensor<T>& images) {
    const std::size_t B = images.rank() == 4 ? images.dim(0) : 0;
    auto x = embed_forward(model.embed, patchify(images, model.embed_config()), B);
    for (const auto& blk : model.low_blocks) x = block_forward(blk, x, B);
    if (model.stitch) x = model.stitch->apply(x);
    for (const auto& blk : model.high_blocks) x = block_forward(blk, x, B);
    return head_forward(model.head, x, B);
}

template <class T>
std::size_t count_params(const DescendantModel<T>& model) {
    std::size_t n = 0;
    for (const auto& [name, v] : model.named_parameters()) n += v.numel();
    return n;
}

/// Architecture of a two-row pool, enough to cost any path without weights.
struct PoolConfig {
    ModelConfig low;
    ModelConfig high;

    std::size_t length() const { return low.depth; }

    void validate() const {
        low.validate();
        high.validate();
        if (!low.same_frame(high)) throw ValidationError("pool config: rows use different input frames");
        if (low.depth != high.depth) throw ValidationError("pool config: row depths differ");
    }
};

namespace profiles {

/// DeiT-Tiny and DeiT-Base rows; pool(12) has l = 6, pool(18) has l = 9.
inline PoolConfig deit_pool(std::size_t instances) {
    if (instances % 2 != 0 || instances == 0) throw ValidationError("pool size must be even and positive");
    return {deit_tiny(instances / 2), deit_base(instances / 2)};
}

}  // namespace profiles

struct Cost {
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

inline Cost account(const PoolConfig& pc, const Path& path) {
    pc.validate();
    const std::size_t l = pc.length();
    path.validate(l);
    const auto& e = path.k >= 1 ? pc.low : pc.high;
    const auto& h = path.ends_high(l) ? pc.high : pc.low;
    const std::uint64_t N = e.tokens();
    const std::uint64_t nl = path.k, nh = path.high_count(l);
    Cost c;
    c.params = accounting::embed_params(e) + nl * accounting::block_params(pc.low.dim, pc.low.mlp_ratio) +
               nh * accounting::block_params(pc.high.dim, pc.high.mlp_ratio) +
               accounting::head_params(h.dim, h.num_classes);
    c.flops = accounting::embed_flops(e) + nl * accounting::block_flops(N, pc.low.dim, pc.low.mlp_ratio) +
              nh * accounting::block_flops(N, pc.high.dim, pc.high.mlp_ratio) +
              accounting::head_flops(h.dim, h.num_classes);
    if (path.uses_stitch(l)) {
        c.params += accounting::stitch_params(pc.low.dim, pc.high.dim);
        c.flops += accounting::stitch_flops(N, pc.low.dim, pc.high.dim);
    }
    return c;
}

template <class T>
PoolConfig pool_config(const LearngenePool<T>& pool) {
    return {pool.low_config, pool.high_config};
}

inline void write_account_csv(std::ostream& os, const PoolConfig& pc, const std::vector<Path>& paths) {
    os << "path_id,k,m,params,flops\n";
    for (const auto& p : paths) {
        const auto c = account(pc, p);
        os << p.id() << ',' << p.k << ',' << p.m << ',' << c.params << ',' << c.flops << '\n';
    }
}

struct Budget {
    std::optional<double> max_params;
    std::optional<double> max_flops;

    void validate() const {
        if (!max_params && !max_flops) throw ValidationError("budget needs max_params, max_flops or both");
        if ((max_params && !(*max_params >= 0)) || (max_flops && !(*max_flops >= 0)))
            throw ValidationError("budget bounds must be non-negative");
    }

    bool admits(const Cost& c) const {
        return (!max_params || static_cast<double>(c.params) <= *max_params) &&
               (!max_flops || static_cast<double>(c.flops) <= *max_flops);
    }
};

struct RankedPath {
    Path path;
    Cost cost;
};

struct BudgetPlan {
    std::vector<RankedPath> feasible;     // best first
    std::optional<Cost> smallest;         // set when nothing fits
};

/// Feasible paths, largest parameter count first. Ties go to fewer
/// stitches, then smaller k, then smaller m.
inline BudgetPlan plan_under_budget(const PoolConfig& pc, const Budget& budget, PathMode mode) {
    budget.validate();
    const std::size_t l = pc.length();
    BudgetPlan out;
    std::optional<Cost> smallest;
    for (const auto& p : enumerate_paths(l, mode)) {
        const auto c = account(pc, p);
        if (!smallest || c.params < smallest->params || (c.params == smallest->params && c.flops < smallest->flops))
            smallest = c;
        if (budget.admits(c)) out.feasible.push_back({p, c});
    }
    std::stable_sort(out.feasible.begin(), out.feasible.end(), [l](const RankedPath& a, const RankedPath& b) {
        if (a.cost.params != b.cost.params) return a.cost.params > b.cost.params;
        const int sa = a.path.uses_stitch(l), sb = b.path.uses_stitch(l);
        if (sa != sb) return sa < sb;
        if (a.path.k != b.path.k) return a.path.k < b.path.k;
        return a.path.m < b.path.m;
    });
    if (out.feasible.empty()) out.smallest = smallest;
    return out;
}

inline void write_plan_csv(std::ostream& os, const BudgetPlan& plan) {
    os << "rank,path_id,k,m,params,flops\n";
    for (std::size_t i = 0; i < plan.feasible.size(); ++i) {
        const auto& r = plan.feasible[i];
        os << i + 1 << ',' << r.path.id() << ',' << r.path.k << ',' << r.path.m << ',' << r.cost.params << ','
           << r.cost.flops << '\n';
    }
}

/// Index of the largest logit per row; ties resolve to the lowest index.
template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
    std::vector<std::size_t> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        out[r] = best;
    }
    return out;
}

/// Top-1 accuracy of any model with a forward(model, images) overload.
template <class T, class Model>
double evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 64) {
    if (data.empty()) throw ValidationError("evaluate: dataset is empty");
    if (batch_size == 0) throw ValidationError("evaluate: batch_size must be positive");
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        const auto pred = argmax_rows(forward(model, data.images<T>(idx)).value());
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (pred[i] == static_cast<std::size_t>(data.labels[idx[i]])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace lgp
