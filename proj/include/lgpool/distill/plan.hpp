// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "lgpool/errors.hpp"

namespace lgp {

/// One distillation pairing: ancestry block -> auxiliary block, 1-based.
struct DistillPair {
    std::size_t anc_block = 0;
    std::size_t aux_block = 0;
    std::string level;  // "low" | "mid" | "high"

    friend bool operator==(const DistillPair&, const DistillPair&) = default;
};

struct DistillPlan {
    std::vector<DistillPair> pairs;

    /// Indices strictly increase in both coordinates and the last pair is
    /// (anc_depth, aux_depth).
    void validate(std::size_t anc_depth, std::size_t aux_depth) const {
        if (pairs.empty()) throw ValidationError("distill plan is empty");
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const auto& p = pairs[i];
            if (p.anc_block < 1 || p.anc_block > anc_depth || p.aux_block < 1 || p.aux_block > aux_depth)
                throw ValidationError("distill plan pair (" + std::to_string(p.anc_block) + "," +
                                      std::to_string(p.aux_block) + ") outside depths (" + std::to_string(anc_depth) +
                                      "," + std::to_string(aux_depth) + ")");
            if (i > 0 && (p.anc_block <= pairs[i - 1].anc_block || p.aux_block <= pairs[i - 1].aux_block))
                throw ValidationError("distill plan indices must strictly increase");
        }
        if (pairs.back().anc_block != anc_depth || pairs.back().aux_block != aux_depth)
            throw ValidationError("distill plan must end at the final blocks");
    }

    friend bool operator==(const DistillPlan&, const DistillPlan&) = default;
};

/// round(num / den) with halves rounded up.
inline std::size_t round_half_up_div(std::size_t num, std::size_t den) { return (2 * num + den) / (2 * den); }

/// Matching widths distill only the final block. Otherwise both models are
/// cut into thirds (low, mid, high) and the last block of each third is
/// paired.
inline DistillPlan make_dense_plan(std::size_t anc_depth, std::size_t aux_depth, bool dims_match) {
    if (aux_depth < 1) throw ValidationError("make_dense_plan: auxiliary depth must be >= 1");
    if (aux_depth > anc_depth)
        throw ValidationError("make_dense_plan: auxiliary depth " + std::to_string(aux_depth) +
                              " exceeds ancestry depth " + std::to_string(anc_depth));
    DistillPlan plan;
    if (dims_match) {
        plan.pairs.push_back({anc_depth, aux_depth, "high"});
        return plan;
    }
    static const char* levels[] = {"low", "mid", "high"};
    for (std::size_t j = 1; j <= 3; ++j) {
        const std::size_t a = round_half_up_div(j * anc_depth, 3);
        const std::size_t b = round_half_up_div(j * aux_depth, 3);
        // Shallow models collapse thirds onto the same block; keep the pair
        // only when both indices advance.
        if (a == 0 || b == 0) continue;
        if (!plan.pairs.empty() && (a <= plan.pairs.back().anc_block || b <= plan.pairs.back().aux_block)) continue;
        plan.pairs.push_back({a, b, levels[j - 1]});
    }
    if (plan.pairs.back().anc_block != anc_depth || plan.pairs.back().aux_block != aux_depth) {
        plan.pairs.back() = {anc_depth, aux_depth, "high"};
    }
    return plan;
}

inline void to_json(nlohmann::json& j, const DistillPlan& p) {
    j = nlohmann::json::array();
    for (const auto& q : p.pairs) j.push_back({{"anc", q.anc_block}, {"aux", q.aux_block}, {"level", q.level}});
}

inline void from_json(const nlohmann::json& j, DistillPlan& p) {
    p.pairs.clear();
    for (const auto& q : j) p.pairs.push_back({q.at("anc").get<std::size_t>(), q.at("aux").get<std::size_t>(), q.at("level").get<std::string>()});
}

}  // namespace lgp
