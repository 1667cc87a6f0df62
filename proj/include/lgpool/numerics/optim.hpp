// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "lgpool/numerics/autograd.hpp"

namespace lgp {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW-style)
};

/// Adam with per-parameter step counters. State is keyed by node identity, so
/// a parameter that is not passed to step() keeps both its value and its
/// moments untouched.
template <class T>
class Adam {
public:
    explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

    void step(const std::vector<Var<T>>& params, double lr) {
        for (const auto& p : params) {
            auto* node = p.node();
            if (!node->requires_grad) continue;
            auto& st = state_[node];
            auto& w = node->value;
            if (st.m.empty()) {
                st.m = Tensor<double>::zeros(w.shape());
                st.v = Tensor<double>::zeros(w.shape());
            }
            ++st.t;
            const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(st.t));
            const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(st.t));
            const bool has_grad = !node->grad.empty();
            for (std::size_t i = 0; i < w.numel(); ++i) {
                const double g = has_grad ? static_cast<double>(node->grad[i]) : 0.0;
                st.m[i] = opts_.beta1 * st.m[i] + (1.0 - opts_.beta1) * g;
                st.v[i] = opts_.beta2 * st.v[i] + (1.0 - opts_.beta2) * g * g;
                const double update = (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + opts_.eps);
                double next = static_cast<double>(w[i]) - lr * update;
                if (opts_.weight_decay != 0.0) next -= lr * opts_.weight_decay * static_cast<double>(w[i]);
                w[i] = static_cast<T>(next);
            }
            if (!w.all_finite()) throw NumericError("Adam produced a non-finite parameter");
        }
    }

private:
    struct State {
        Tensor<double> m, v;
        long t = 0;
    };
    AdamOptions opts_;
    std::unordered_map<const Node<T>*, State> state_;
};

/// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

template <class T>
void zero_grads(const std::vector<Var<T>>& params) {
    for (auto p : params) p.zero_grad();
}

}  // namespace lgp
