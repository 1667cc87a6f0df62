// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks over every differentiable op, a whole ViT, and
// the full distillation objective. Shared by the `gradcheck` subcommand and
// the test suites.

#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lgpool/distill/losses.hpp"
#include "lgpool/numerics/gradcheck.hpp"
#include "lgpool/numerics/ops.hpp"
#include "lgpool/vit/model.hpp"

namespace lgp::check {

struct CaseResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
};

namespace detail {

using V = Var<double>;
using TD = Tensor<double>;

inline TD rand_t(Shape s, std::mt19937_64& rng, double sd = 1.0) { return TD::randn(std::move(s), rng, sd); }

// Projection onto a fixed random tensor so every output coordinate matters.
inline V project(const V& out, const TD& r) { return sum(mul(out, V::constant(r))); }

inline GradCheckReport unary(std::uint64_t seed, Shape in, const std::function<V(const V&)>& op) {
    std::mt19937_64 rng(seed);
    const auto x = rand_t(std::move(in), rng);
    const auto r = rand_t(op(V::constant(x)).shape(), rng);
    return finite_diff_check([&](const V& v) { return project(op(v), r); }, x);
}

inline GradCheckReport binary(std::uint64_t seed, Shape sa, Shape sb, const std::function<V(const V&, const V&)>& op) {
    std::mt19937_64 rng(seed);
    auto a = V::parameter(rand_t(std::move(sa), rng));
    auto b = V::parameter(rand_t(std::move(sb), rng));
    const auto r = rand_t(op(a, b).shape(), rng);
    return finite_diff_check([&] { return project(op(a, b), r); }, {a, b});
}

inline void jitter(const NamedParams<double>& params, std::mt19937_64& rng, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    for (const auto& [name, v] : params) {
        auto copy = v;
        for (auto& x : copy.mutable_value().data()) x += n(rng);
    }
}

}  // namespace detail

using OpCheck = std::function<GradCheckReport(std::uint64_t seed)>;

/// One entry per differentiable op.
inline std::vector<std::pair<std::string, OpCheck>> op_checks() {
    using namespace detail;
    std::vector<std::pair<std::string, OpCheck>> c;
    c.emplace_back("matmul", [](auto s) { return binary(s, {3, 4}, {4, 5}, [](auto& a, auto& b) { return matmul(a, b); }); });
    c.emplace_back("add", [](auto s) { return binary(s, {3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); }); });
    c.emplace_back("sub", [](auto s) { return binary(s, {3, 4}, {3, 4}, [](auto& a, auto& b) { return sub(a, b); }); });
    c.emplace_back("mul", [](auto s) { return binary(s, {3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); }); });
    c.emplace_back("add_row", [](auto s) { return binary(s, {3, 4}, {4}, [](auto& a, auto& b) { return add_row(a, b); }); });
    c.emplace_back("mse", [](auto s) { return binary(s, {3, 4}, {3, 4}, [](auto& a, auto& b) { return mse(a, b); }); });
    c.emplace_back("transpose", [](auto s) { return unary(s, {3, 5}, [](auto& x) { return transpose(x); }); });
    c.emplace_back("reshape", [](auto s) { return unary(s, {3, 4}, [](auto& x) { return reshape(x, {2, 6}); }); });
    c.emplace_back("scale", [](auto s) { return unary(s, {3, 4}, [](auto& x) { return scale(x, 0.37); }); });
    c.emplace_back("sum", [](auto s) { return unary(s, {3, 4}, [](auto& x) { return sum(x); }); });
    c.emplace_back("mean", [](auto s) { return unary(s, {3, 4}, [](auto& x) { return mean(x); }); });
    c.emplace_back("gelu", [](auto s) { return unary(s, {3, 4}, [](auto& x) { return gelu(x); }); });
    c.emplace_back("softmax_rows", [](auto s) { return unary(s, {3, 6}, [](auto& x) { return softmax_rows(x); }); });
    c.emplace_back("log_softmax_rows",
                   [](auto s) { return unary(s, {3, 6}, [](auto& x) { return log_softmax_rows(x); }); });
    c.emplace_back("slice_rows", [](auto s) { return unary(s, {5, 3}, [](auto& x) { return slice_rows(x, 1, 3); }); });
    c.emplace_back("slice_cols", [](auto s) { return unary(s, {3, 5}, [](auto& x) { return slice_cols(x, 2, 2); }); });
    c.emplace_back("concat_rows", [](auto s) {
        return binary(s, {2, 3}, {4, 3}, [](auto& a, auto& b) { return concat_rows<double>({a, b, a}); });
    });
    c.emplace_back("concat_cols", [](auto s) {
        return binary(s, {3, 2}, {3, 4}, [](auto& a, auto& b) { return concat_cols<double>({b, a}); });
    });
    c.emplace_back("layer_norm", [](auto seed) {
        std::mt19937_64 rng(seed);
        auto x = V::parameter(rand_t({3, 8}, rng));
        auto g = V::parameter(rand_t({8}, rng));
        auto b = V::parameter(rand_t({8}, rng));
        const auto r = rand_t({3, 8}, rng);
        return finite_diff_check([&] { return project(layer_norm(x, g, b), r); }, {x, g, b});
    });
    c.emplace_back("cross_entropy", [](auto seed) {
        std::mt19937_64 rng(seed);
        const std::vector<int> labels{0, 3, 2, 4};
        return finite_diff_check([&](const V& x) { return cross_entropy<double>(x, labels); }, rand_t({4, 5}, rng, 2.0));
    });
    c.emplace_back("soft_cross_entropy", [](auto seed) {
        std::mt19937_64 rng(seed);
        const auto teacher = rand_t({4, 5}, rng, 2.0);
        return finite_diff_check([&](const V& x) { return soft_cross_entropy<double>(teacher, x, 2.0); },
                                 rand_t({4, 5}, rng, 2.0));
    });
    return c;
}

/// Cross-entropy of a whole model with respect to every weight.
inline GradCheckReport vit_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& opt = {}) {
    auto m = init_vit<double>(cfg, seed);
    std::mt19937_64 rng(seed + 1);
    detail::jitter(m.named_parameters(), rng, 0.3);
    const auto x = Tensor<double>::randn({2, cfg.channels, cfg.image_size, cfg.image_size}, rng);
    const std::vector<int> labels{0, static_cast<int>(cfg.num_classes - 1)};
    return finite_diff_check([&] { return cross_entropy<double>(forward(m, x), labels); }, m.parameters(), opt);
}

/// The full training objective alpha L_cls + (1 - alpha) L_dis, differentiated
/// with respect to every auxiliary weight and every learnable W and M.
inline GradCheckReport objective_check(const ModelConfig& anc_cfg, const ModelConfig& aux_cfg, double alpha,
                                       double tau, std::uint64_t seed, const GradCheckOptions& opt = {}) {
    auto anc = init_vit<double>(anc_cfg, seed);
    anc.set_requires_grad(false);
    auto aux = init_vit<double>(aux_cfg, seed + 1);
    std::mt19937_64 rng(seed + 2);
    detail::jitter(aux.named_parameters(), rng, 0.3);
    const auto plan = make_dense_plan(anc_cfg.depth, aux_cfg.depth, anc_cfg.dim == aux_cfg.dim);
    const auto mats = make_transforms<double>(plan, anc_cfg.dim, aux_cfg.dim, seed + 3);
    const auto x = Tensor<double>::randn({2, anc_cfg.channels, anc_cfg.image_size, anc_cfg.image_size}, rng);
    const std::vector<int> labels{1, 0};
    const auto ta = forward_with_taps(anc, x);
    auto params = aux.parameters();
    for (const auto& m : mats.learnable_parameters()) params.push_back(m);
    return finite_diff_check(
        [&] {
            const auto tb = forward_with_taps(aux, x);
            const auto l = distill_losses(ta, tb, plan, mats, tau);
            return total_training_loss(cross_entropy<double>(tb.logits, labels), l.dis, alpha);
        },
        params, opt);
}

/// Model-scale settings: a five-point stencil with a wider step resolves the
/// many near-zero slopes of a deep model well below the tolerance, and a
/// fixed sample of coordinates per weight tensor keeps the run short.
inline GradCheckOptions model_options(std::uint64_t seed = 0) {
    GradCheckOptions o;
    o.h = 1e-3;
    o.stencil = 4;
    o.coords_per_param = 24;
    o.seed = seed;
    return o;
}

/// Every op over `op_seeds` seeds (worst case kept, every coordinate), then
/// the model and objective checks on the given configurations.
inline std::vector<CaseResult> run_suite(const ModelConfig& anc_cfg, const ModelConfig& aux_cfg, double alpha,
                                         double tau, std::size_t op_seeds = 20, std::uint64_t seed = 0,
                                         const GradCheckOptions& model_opt = model_options()) {
    std::vector<CaseResult> out;
    for (const auto& [name, f] : op_checks()) {
        CaseResult r{name};
        for (std::size_t s = 0; s < op_seeds; ++s) {
            const auto rep = f(seed + 100 + s);
            r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
            r.coordinates += rep.coordinates;
        }
        out.push_back(r);
    }
    const auto v = vit_check(aux_cfg, seed + 7, model_opt);
    out.push_back({"vit_forward", v.max_rel_error, v.coordinates});
    const auto o = objective_check(anc_cfg, aux_cfg, alpha, tau, seed + 11, model_opt);
    out.push_back({"full_objective", o.max_rel_error, o.coordinates});
    return out;
}

}  // namespace lgp::check
