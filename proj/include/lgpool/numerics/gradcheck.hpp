// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checks (double precision only).

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lgpool/numerics/autograd.hpp"

namespace lgp {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

inline double relative_gradient_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct GradCheckOptions {
    double h = 1e-5;
    /// 2: central difference. 4: fourth-order five-point stencil, which
    /// tolerates a larger h and so resolves much smaller slopes.
    int stencil = 2;
    /// 0 checks every coordinate; otherwise this many per leaf, drawn with `seed`.
    std::size_t coords_per_param = 0;
    std::uint64_t seed = 0;
};

/// Checks d(loss)/d(param) for the selected coordinates of every leaf in `params`.
/// `loss` must rebuild the graph from the current parameter values on each call.
inline GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> params,
                                         const GradCheckOptions& opt) {
    if (opt.stencil != 2 && opt.stencil != 4) throw ValidationError("finite_diff_check: stencil must be 2 or 4");
    if (!(opt.h > 0.0)) throw ValidationError("finite_diff_check: step must be positive");
    auto eval = [&] { return loss().value()[0]; };

    const double f0 = eval();
    if (eval() != f0) throw ValidationError("finite_diff_check: function is not deterministic");

    for (auto& p : params) p.zero_grad();
    backward(loss());
    std::vector<Tensor<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad());

    std::mt19937_64 rng(opt.seed);
    GradCheckReport report;
    const double h = opt.h, eps = std::numeric_limits<double>::epsilon();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& value = params[pi].mutable_value();
        std::vector<std::size_t> coords(value.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opt.coords_per_param > 0 && opt.coords_per_param < coords.size()) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t i : coords) {
            const double orig = value[i];
            auto at = [&](double step) {
                value[i] = orig + step;
                return eval();
            };
            double diff, scale_f, denom;
            if (opt.stencil == 2) {
                const double fp = at(h), fm = at(-h);
                diff = fp - fm;
                scale_f = std::max(std::abs(fp), std::abs(fm));
                denom = 2.0 * h;
            } else {
                const double fp2 = at(2 * h), fp = at(h), fm = at(-h), fm2 = at(-2 * h);
                diff = fm2 - 8.0 * fm + 8.0 * fp - fp2;
                scale_f = 9.0 * std::max({std::abs(fp2), std::abs(fp), std::abs(fm), std::abs(fm2)});
                denom = 12.0 * h;
            }
            value[i] = orig;
            // A difference of a few ulps of f is rounding, not slope.
            const double numeric = std::abs(diff) <= 4.0 * eps * scale_f ? 0.0 : diff / denom;
            const double err = relative_gradient_error(analytic[pi][i], numeric);
            ++report.coordinates;
            if (err > report.max_rel_error || report.coordinates == 1) {
                report.max_rel_error = std::max(report.max_rel_error, err);
                report.worst_param = pi;
                report.worst_index = i;
                report.analytic = analytic[pi][i];
                report.numeric = numeric;
            }
        }
    }
    return report;
}

inline GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> params,
                                         double h = 1e-5) {
    GradCheckOptions opt;
    opt.h = h;
    return finite_diff_check(loss, std::move(params), opt);
}

/// Single-input form: f maps a tensor to a scalar.
inline GradCheckReport finite_diff_check(const std::function<Var<double>(const Var<double>&)>& f,
                                         const Tensor<double>& x, double h = 1e-5) {
    auto leaf = Var<double>::parameter(x);
    return finite_diff_check([&] { return f(leaf); }, {leaf}, h);
}

}  // namespace lgp
