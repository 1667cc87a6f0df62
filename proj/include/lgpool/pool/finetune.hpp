// SPDX-License-Identifier: Apache-2.0
//
// Pool finetuning: every step samples one path uniformly and trains it on
// L_cls, plus L_pred against the ancestry when a teacher is given.

#pragma once

#include <cmath>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "lgpool/distill/trainer.hpp"
#include "lgpool/pool/pool.hpp"

namespace lgp {

struct FinetuneOptions {
    std::size_t epochs = 1;
    std::size_t batch_size = 16;
    double lr = 5e-4;
    double tau = 1.0;
    std::uint64_t seed = 0;
    PathMode mode = PathMode::table;
    bool freeze_instances = false;

    void validate() const {
        if (batch_size == 0) throw ValidationError("finetune: batch_size must be positive");
        if (!(lr > 0.0)) throw ValidationError("finetune: lr must be positive");
        if (!(tau > 0.0)) throw ValidationError("finetune: tau must be positive");
    }
};

struct FinetuneStep {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::string path_id;
    double cls = 0;
    double pred = 0;
    double total = 0;
};

inline void write_finetune_csv(std::ostream& os, const std::vector<FinetuneStep>& steps) {
    os << "step,epoch,path_id,L_cls,L_pred,total\n";
    os.precision(9);
    for (const auto& s : steps)
        os << s.step << ',' << s.epoch << ',' << s.path_id << ',' << s.cls << ',' << s.pred << ',' << s.total << '\n';
}

/// Trains `pool` in place and returns the per-step trace. Only the sampled
/// path's parameters move on each step.
template <class T>
std::vector<FinetuneStep> finetune_pool(LearngenePool<T>& pool, const Dataset& data, const FinetuneOptions& opts,
                                        const VitModel<T>* teacher = nullptr) {
    opts.validate();
    std::vector<FinetuneStep> trace;
    if (opts.epochs == 0) return trace;
    detail::require_trainable_data(data, pool.low_config);
    const auto paths = enumerate_paths(pool, opts.mode);
    const std::size_t l = pool.length();
    for (const auto& p : paths)
        if (p.uses_stitch(l) && !pool.stitch(p.k).initialized())
            throw ValidationError("finetune_pool: stitch " + std::to_string(p.k) + " is uninitialized (path " + p.id() + ")");

    std::optional<VitModel<T>> frozen;
    if (teacher) {
        if (!teacher->config.same_frame(pool.low_config))
            throw ValidationError("finetune_pool: teacher uses a different input frame");
        frozen = teacher->clone();
        frozen->set_requires_grad(false);
    }

    std::mt19937_64 data_rng(opts.seed);
    std::mt19937_64 path_rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
    Adam<T> opt;
    const std::size_t steps_per_epoch = (data.size() + opts.batch_size - 1) / opts.batch_size;
    const std::size_t total_steps = steps_per_epoch * opts.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
        for (const auto& idx : make_batches(data.size(), opts.batch_size, data_rng)) {
            const Path path = sample_path(paths, path_rng);
            const auto images = data.images<T>(idx);
            const auto logits = pool_forward(pool, path, images);
            const auto cls = cross_entropy<T>(logits, data.labels_at(idx));
            FinetuneStep rec{step, epoch, path.id(), cls.value()[0], 0.0, 0.0};
            auto loss = cls;
            if (frozen) {
                const auto pred = soft_cross_entropy(forward(*frozen, images).value(), logits, static_cast<T>(opts.tau));
                rec.pred = pred.value()[0];
                loss = add(cls, pred);
            }
            rec.total = loss.value()[0];
            if (!std::isfinite(rec.total))
                throw NumericError("finetune_pool: non-finite loss at step " + std::to_string(step) + " (path " + path.id() + ")");
            const auto params = path_parameters(pool, path, opts.freeze_instances);
            zero_grads(params);
            backward(loss);
            opt.step(params, cosine_lr(opts.lr, step, total_steps));
            trace.push_back(rec);
            ++step;
        }
    }
    return trace;
}

}  // namespace lgp
