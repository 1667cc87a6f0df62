// SPDX-License-Identifier: Apache-2.0
//
// Auxiliary-model training: plain supervised training (also used for the
// ancestry) and distillation from a frozen ancestry.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lgpool/distill/losses.hpp"
#include "lgpool/io/dataset.hpp"
#include "lgpool/numerics/optim.hpp"

namespace lgp {

struct Hyper {
    double alpha = 0.5;
    double tau = 1.0;
    double lr = 5e-4;
    double weight_decay = 0.0;
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
        if (!(tau > 0.0)) throw ValidationError("tau must be positive");
        if (!(lr > 0.0)) throw ValidationError("lr must be positive");
        if (batch_size == 0) throw ValidationError("batch_size must be positive");
    }
};

/// Per-epoch loss means. Epoch 0 is an evaluation pass before any update.
struct LossTraceRow {
    std::size_t epoch = 0;
    double cls = 0, pred = 0, blk = 0, att = 0, dis = 0, total = 0;
};

inline void write_trace_csv(std::ostream& os, const std::vector<LossTraceRow>& rows) {
    os << "epoch,L_cls,L_pred,L_blk,L_att,total\n";
    os.precision(9);
    for (const auto& r : rows) os << r.epoch << ',' << r.cls << ',' << r.pred << ',' << r.blk << ',' << r.att << ',' << r.total << '\n';
}

/// Shuffled mini-batches of sample indices; the last batch may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng,
                                                          bool shuffle = true) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (shuffle) std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch)
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
    return out;
}

/// Ancestry outputs for every sample, computed once. Only the blocks named
/// by the plan are kept.
template <class T>
class TeacherCache {
public:
    TeacherCache(const VitModel<T>& ancestry, const Dataset& data, const DistillPlan& plan, std::size_t batch_size) {
        auto frozen = ancestry.clone();
        frozen.set_requires_grad(false);
        depth_ = frozen.blocks.size();
        classes_ = frozen.config.num_classes;
        tokens_ = frozen.config.tokens();
        dim_ = frozen.config.dim;
        for (const auto& p : plan.pairs) {
            blocks_[p.anc_block];
            attn_[p.anc_block];
        }
        logits_.resize(data.size() * classes_);
        for (auto& [b, v] : blocks_) v.resize(data.size() * tokens_ * dim_);
        for (auto& [b, v] : attn_) v.resize(data.size() * tokens_ * dim_);
        std::mt19937_64 unused;
        for (const auto& idx : make_batches(data.size(), batch_size, unused, false)) {
            const auto taps = forward_with_taps(frozen, data.images<T>(idx));
            const std::size_t first = idx.front();
            std::copy_n(taps.logits.value().data().begin(), idx.size() * classes_, logits_.begin() + first * classes_);
            for (auto& [b, v] : blocks_)
                std::copy_n(taps.block_outputs[b - 1].value().data().begin(), idx.size() * tokens_ * dim_,
                            v.begin() + first * tokens_ * dim_);
            for (auto& [b, v] : attn_)
                std::copy_n(taps.attn_outputs[b - 1].value().data().begin(), idx.size() * tokens_ * dim_,
                            v.begin() + first * tokens_ * dim_);
        }
    }

    TapRecord<T> gather(std::span<const std::size_t> idx) const {
        TapRecord<T> out;
        out.logits = Var<T>::constant(gather_rows(logits_, idx, classes_, {idx.size(), classes_}));
        out.block_outputs.resize(depth_);
        out.attn_outputs.resize(depth_);
        const std::size_t per = tokens_ * dim_;
        for (const auto& [b, v] : blocks_)
            out.block_outputs[b - 1] = Var<T>::constant(gather_rows(v, idx, per, {idx.size() * tokens_, dim_}));
        for (const auto& [b, v] : attn_)
            out.attn_outputs[b - 1] = Var<T>::constant(gather_rows(v, idx, per, {idx.size() * tokens_, dim_}));
        return out;
    }

    Tensor<T> logits(std::span<const std::size_t> idx) const {
        return gather_rows(logits_, idx, classes_, {idx.size(), classes_});
    }

private:
    static Tensor<T> gather_rows(const std::vector<T>& src, std::span<const std::size_t> idx, std::size_t per, Shape shape) {
        std::vector<T> data;
        data.reserve(idx.size() * per);
        for (auto i : idx) data.insert(data.end(), src.begin() + static_cast<std::ptrdiff_t>(i * per),
                                       src.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        return Tensor<T>(std::move(shape), std::move(data));
    }

    std::size_t depth_ = 0, classes_ = 0, tokens_ = 0, dim_ = 0;
    std::vector<T> logits_;
    std::map<std::size_t, std::vector<T>> blocks_, attn_;
};

namespace detail {

inline void require_trainable_data(const Dataset& data, const ModelConfig& cfg) {
    if (data.empty()) throw ValidationError("training data is empty");
    if (data.channels != cfg.channels || data.height != cfg.image_size || data.width != cfg.image_size)
        throw ShapeError("dataset images " + std::to_string(data.channels) + "x" + std::to_string(data.height) + "x" +
                         std::to_string(data.width) + " do not match model input " + std::to_string(cfg.channels) + "x" +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    if (data.num_classes > cfg.num_classes)
        throw ValidationError("dataset has more classes than the model head");
}

inline void check_term(double v, const char* term, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(v))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ", term " + term);
}

}  // namespace detail

/// Cross-entropy training of a single model. Returns per-epoch mean L_cls.
template <class T>
std::vector<LossTraceRow> train_supervised(VitModel<T>& model, const Dataset& data, const Hyper& hyper) {
    hyper.validate();
    detail::require_trainable_data(data, model.config);
    std::mt19937_64 rng(hyper.seed);
    Adam<T> opt(AdamOptions{.weight_decay = hyper.weight_decay});
    const auto params = model.parameters();
    const std::size_t steps_per_epoch = (data.size() + hyper.batch_size - 1) / hyper.batch_size;
    const std::size_t total_steps = steps_per_epoch * hyper.epochs;
    std::size_t step = 0;
    std::vector<LossTraceRow> trace;
    for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
        LossTraceRow row{.epoch = epoch};
        const auto batches = make_batches(data.size(), hyper.batch_size, rng);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& idx = batches[bi];
            try {
                const auto loss = cross_entropy<T>(forward(model, data.images<T>(idx)), data.labels_at(idx));
                detail::check_term(loss.value()[0], "L_cls", epoch, bi);
                zero_grads(params);
                backward(loss);
                opt.step(params, cosine_lr(hyper.lr, step++, total_steps));
                row.cls += loss.value()[0] * static_cast<double>(idx.size());
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ": " + e.what());
            }
        }
        row.cls /= static_cast<double>(data.size());
        row.total = row.cls;
        trace.push_back(row);
    }
    return trace;
}

template <class T>
struct AuxTrainResult {
    VitModel<T> aux;
    TransformSet<T> transforms;
    std::vector<LossTraceRow> trace;
};

/// Trains `aux` on alpha * L_cls + (1 - alpha) * L_dis against the frozen
/// ancestry. Learnable W/M matrices are optimized jointly with the model.
template <class T>
AuxTrainResult<T> train_auxiliary(const VitModel<T>& ancestry, VitModel<T> aux, const Dataset& data,
                                  const DistillPlan& plan, const Hyper& hyper) {
    hyper.validate();
    if (!ancestry.config.same_frame(aux.config))
        throw ValidationError("train_auxiliary: ancestry and auxiliary models use different input frames");
    plan.validate(ancestry.config.depth, aux.config.depth);
    detail::require_trainable_data(data, aux.config);

    AuxTrainResult<T> out;
    out.transforms = make_transforms<T>(plan, ancestry.config.dim, aux.config.dim, hyper.seed ^ 0x5deece66dULL);
    const TeacherCache<T> teacher(ancestry, data, plan, hyper.batch_size);
    const T tau = static_cast<T>(hyper.tau);

    auto params = aux.parameters();
    for (const auto& m : out.transforms.learnable_parameters()) params.push_back(m);

    auto accumulate = [](LossTraceRow& row, const DistillLosses<T>& l, double cls, double total, double w) {
        row.cls += cls * w;
        row.pred += l.pred.value()[0] * w;
        row.blk += l.blk.value()[0] * w;
        row.att += l.att.value()[0] * w;
        row.dis += l.dis.value()[0] * w;
        row.total += total * w;
    };
    auto finish = [&](LossTraceRow& row) {
        const double n = static_cast<double>(data.size());
        for (double* v : {&row.cls, &row.pred, &row.blk, &row.att, &row.dis, &row.total}) *v /= n;
    };

    {
        LossTraceRow row{.epoch = 0};
        std::mt19937_64 unused;
        for (const auto& idx : make_batches(data.size(), hyper.batch_size, unused, false)) {
            const auto taps = forward_with_taps(aux, data.images<T>(idx));
            const auto l = distill_losses(teacher.gather(idx), taps, plan, out.transforms, tau);
            const auto cls = cross_entropy<T>(taps.logits, data.labels_at(idx));
            const auto total = total_training_loss(cls, l.dis, hyper.alpha);
            accumulate(row, l, cls.value()[0], total.value()[0], static_cast<double>(idx.size()));
        }
        finish(row);
        out.trace.push_back(row);
    }

    std::mt19937_64 rng(hyper.seed);
    Adam<T> opt(AdamOptions{.weight_decay = hyper.weight_decay});
    const std::size_t steps_per_epoch = (data.size() + hyper.batch_size - 1) / hyper.batch_size;
    const std::size_t total_steps = steps_per_epoch * hyper.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
        LossTraceRow row{.epoch = epoch};
        const auto batches = make_batches(data.size(), hyper.batch_size, rng);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& idx = batches[bi];
            try {
                const auto taps = forward_with_taps(aux, data.images<T>(idx));
                const auto l = distill_losses(teacher.gather(idx), taps, plan, out.transforms, tau);
                const auto cls = cross_entropy<T>(taps.logits, data.labels_at(idx));
                detail::check_term(cls.value()[0], "L_cls", epoch, bi);
                detail::check_term(l.pred.value()[0], "L_pred", epoch, bi);
                detail::check_term(l.blk.value()[0], "L_blk", epoch, bi);
                detail::check_term(l.att.value()[0], "L_att", epoch, bi);
                const auto total = total_training_loss(cls, l.dis, hyper.alpha);
                zero_grads(params);
                backward(total);
                opt.step(params, cosine_lr(hyper.lr, step++, total_steps));
                accumulate(row, l, cls.value()[0], total.value()[0], static_cast<double>(idx.size()));
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ": " + e.what());
            }
        }
        finish(row);
        out.trace.push_back(row);
    }
    out.aux = std::move(aux);
    return out;
}

}  // namespace lgp
