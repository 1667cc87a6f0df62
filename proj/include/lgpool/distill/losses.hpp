// SPDX-License-Identifier: Apache-2.0
//
// Distillation objective:
//
//   L_pred = CE_soft(P_anc / tau, P_aux / tau)
//   L_blk  = mean over plan pairs of MSE(B_anc W, B_aux)
//   L_att  = mean over plan pairs of MSE(A_anc M, A_aux)
//   L_dis  = L_att + L_blk + L_pred
//   L      = alpha L_cls + (1 - alpha) L_dis

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "lgpool/distill/plan.hpp"
#include "lgpool/vit/model.hpp"

namespace lgp {

enum class MatrixKind { block, attention };

/// Learnable d x d' map from ancestry width to auxiliary width. Fixed to
/// the identity (and not learnable) when the widths match.
template <class T>
struct TransformationMatrix {
    MatrixKind kind = MatrixKind::block;
    std::size_t anc_block = 0;
    std::size_t aux_block = 0;
    Var<T> matrix;
    bool learnable = false;

    std::size_t in_dim() const { return matrix.value().dim(0); }
    std::size_t out_dim() const { return matrix.value().dim(1); }

    /// Archive name: "W.<anc>.<aux>" or "M.<anc>.<aux>".
    std::string name() const {
        return std::string(kind == MatrixKind::block ? "W." : "M.") + std::to_string(anc_block) + "." +
               std::to_string(aux_block);
    }

    Var<T> apply(const Var<T>& x) const { return learnable ? matmul(x, matrix) : x; }
};

template <class T>
struct TransformSet {
    std::vector<TransformationMatrix<T>> block;  // one per plan pair, same order
    std::vector<TransformationMatrix<T>> attn;

    std::vector<Var<T>> learnable_parameters() const {
        std::vector<Var<T>> out;
        for (const auto* set : {&block, &attn})
            for (const auto& m : *set)
                if (m.learnable) out.push_back(m.matrix);
        return out;
    }
};

/// One W and one M per plan pair. Mismatched widths start from N(0, 1/d).
template <class T>
TransformSet<T> make_transforms(const DistillPlan& plan, std::size_t anc_dim, std::size_t aux_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const bool identity = anc_dim == aux_dim;
    TransformSet<T> set;
    for (auto kind : {MatrixKind::block, MatrixKind::attention}) {
        auto& dst = kind == MatrixKind::block ? set.block : set.attn;
        for (const auto& p : plan.pairs) {
            TransformationMatrix<T> m;
            m.kind = kind;
            m.anc_block = p.anc_block;
            m.aux_block = p.aux_block;
            m.learnable = !identity;
            if (identity) {
                m.matrix = Var<T>::constant(Tensor<T>::identity(anc_dim));
            } else {
                m.matrix = Var<T>::parameter(
                    Tensor<T>::randn({anc_dim, aux_dim}, rng, 1.0 / std::sqrt(static_cast<double>(anc_dim))));
            }
            dst.push_back(std::move(m));
        }
    }
    return set;
}

template <class T>
struct DistillLosses {
    Var<T> pred, blk, att, dis;
};

template <class T>
DistillLosses<T> distill_losses(const TapRecord<T>& anc, const TapRecord<T>& aux, const DistillPlan& plan,
                                const TransformSet<T>& mats, T tau) {
    if (mats.block.size() != plan.pairs.size() || mats.attn.size() != plan.pairs.size())
        throw ValidationError("distill_losses: need one W and one M per plan pair (" + std::to_string(plan.pairs.size()) +
                              " pairs, " + std::to_string(mats.block.size()) + " W, " + std::to_string(mats.attn.size()) +
                              " M)");
    if (anc.logits.shape() != aux.logits.shape())
        throw ShapeError("distill_losses: batch mismatch, ancestry logits " + shape_str(anc.logits.shape()) +
                         " vs auxiliary logits " + shape_str(aux.logits.shape()));

    auto pair_term = [&](const std::vector<Var<T>>& anc_taps, const std::vector<Var<T>>& aux_taps,
                         const std::vector<TransformationMatrix<T>>& ms) {
        std::vector<Var<T>> terms;
        for (std::size_t i = 0; i < plan.pairs.size(); ++i) {
            const auto& p = plan.pairs[i];
            const auto& m = ms[i];
            if (m.anc_block != p.anc_block || m.aux_block != p.aux_block)
                throw ValidationError("distill_losses: missing matrix for pair (" + std::to_string(p.anc_block) + "," +
                                      std::to_string(p.aux_block) + ")");
            if (p.anc_block > anc_taps.size() || p.aux_block > aux_taps.size() || !anc_taps[p.anc_block - 1].defined() ||
                !aux_taps[p.aux_block - 1].defined())
                throw ValidationError("distill_losses: taps missing for pair (" + std::to_string(p.anc_block) + "," +
                                      std::to_string(p.aux_block) + ")");
            const auto& a = anc_taps[p.anc_block - 1];
            const auto& b = aux_taps[p.aux_block - 1];
            if (a.value().dim(0) != b.value().dim(0))
                throw ShapeError("distill_losses: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
            terms.push_back(mse(m.apply(a), b));
        }
        auto total = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
        return terms.size() == 1 ? total : scale(total, T(1) / static_cast<T>(terms.size()));
    };

    DistillLosses<T> out;
    out.pred = soft_cross_entropy(anc.logits.value(), aux.logits, tau);
    out.blk = pair_term(anc.block_outputs, aux.block_outputs, mats.block);
    out.att = pair_term(anc.attn_outputs, aux.attn_outputs, mats.attn);
    out.dis = add(add(out.att, out.blk), out.pred);
    return out;
}

template <class T>
Var<T> total_training_loss(const Var<T>& cls, const Var<T>& dis, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1], got " + std::to_string(alpha));
    return add(scale(cls, static_cast<T>(alpha)), scale(dis, static_cast<T>(1.0 - alpha)));
}

}  // namespace lgp
