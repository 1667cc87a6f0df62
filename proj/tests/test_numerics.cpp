// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lgpool/distill/gradcheck_suite.hpp"
#include "lgpool/numerics/gradcheck.hpp"
#include "lgpool/numerics/linalg.hpp"
#include "lgpool/numerics/ops.hpp"
#include "lgpool/numerics/optim.hpp"

namespace lgp {
namespace {

using D = double;
using V = Var<D>;
using TD = Tensor<D>;

TD rand_t(Shape s, std::mt19937_64& rng, double sd = 1.0) { return TD::randn(std::move(s), rng, sd); }


TEST(Tensor, ShapeInvariants) {
    TD t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_THROW(TD({2, 0}), ShapeError);
    EXPECT_THROW(TD({2, 3}, std::vector<D>(5)), ShapeError);
    EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
    EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Ops, MatmulIdentity) {
    std::mt19937_64 rng(1);
    const auto a = rand_t({3, 3}, rng);
    const auto out = matmul(V::constant(TD::identity(3)), V::constant(a));
    EXPECT_TRUE(out.value() == a);
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
    try {
        matmul(V::constant(TD({2, 3})), V::constant(TD({4, 2})));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x2]"), std::string::npos);
    }
    EXPECT_THROW(add(V::constant(TD({2, 3})), V::constant(TD({3, 2}))), ShapeError);
}

TEST(Ops, NonFiniteOutputIsNumericError) {
    TD big({1, 2}, std::vector<D>{1e308, 1e308});
    EXPECT_THROW(add(V::constant(big), V::constant(big)), NumericError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
    std::mt19937_64 rng(2);
    const auto y = softmax_rows(V::constant(rand_t({5, 7}, rng, 3.0)));
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) s += y.value().at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Ops, LayerNormNormalizesRows) {
    std::mt19937_64 rng(3);
    const auto y = layer_norm(V::constant(rand_t({4, 32}, rng, 5.0)), V::constant(TD::ones({32})),
                              V::constant(TD::zeros({32})), 1e-12);
    for (std::size_t i = 0; i < 4; ++i) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 32; ++j) m += y.value().at(i, j);
        m /= 32;
        for (std::size_t j = 0; j < 32; ++j) v += (y.value().at(i, j) - m) * (y.value().at(i, j) - m);
        v /= 32;
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(Backward, LinearSumGivesBroadcastInput) {
    // loss = sum(x W): dL/dW[i][j] = sum over rows of x[:, i].
    std::mt19937_64 rng(4);
    const auto x = rand_t({3, 4}, rng);
    auto w = V::parameter(rand_t({4, 2}, rng));
    backward(sum(matmul(V::constant(x), w)));
    for (std::size_t i = 0; i < 4; ++i) {
        double col = 0;
        for (std::size_t r = 0; r < 3; ++r) col += x.at(r, i);
        for (std::size_t j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(w.grad().at(i, j), col);
    }
}

TEST(Backward, MseGradientClosedForm) {
    std::mt19937_64 rng(5);
    auto a = V::parameter(rand_t({2, 3}, rng));
    const auto b = rand_t({2, 3}, rng);
    backward(mse(a, V::constant(b)));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.grad()[i], 2.0 * (a.value()[i] - b[i]) / 6.0, 1e-15);
}

TEST(Backward, RejectsNonScalarAndRepeatedCalls) {
    auto a = V::parameter(TD({2, 2}, 1.0));
    EXPECT_THROW(backward(scale(a, 2.0)), ShapeError);
    const auto loss = sum(scale(a, 2.0));
    backward(loss);
    EXPECT_THROW(backward(loss), Error);
}

TEST(Backward, UntouchedLeavesKeepZeroGradient) {
    auto a = V::parameter(TD({2, 2}, 1.0));
    auto unused = V::parameter(TD({2, 2}, 1.0));
    backward(sum(a));
    EXPECT_FALSE(unused.has_grad());
    EXPECT_TRUE(unused.grad() == TD::zeros({2, 2}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
    // loss = sum(a * a) reached through two edges; d/da = 2a.
    auto a = V::parameter(TD({1, 3}, std::vector<D>{1.0, -2.0, 0.5}));
    backward(sum(mul(a, a)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], 2.0 * a.value()[i]);
}

TEST(Backward, TopologicalOrderVisitsEachNodeOnce) {
    auto a = V::parameter(TD({2, 2}, 1.0));
    const auto b = add(a, a);
    const auto c = add(b, b);
    const auto order = topological_order(sum(c));
    EXPECT_EQ(order.size(), 4u);  // a, b, c, sum
    EXPECT_EQ(order.front(), a.node());
}

TEST(GradCheck, SumOfSquaresIsExact) {
    std::mt19937_64 rng(6);
    const auto r = finite_diff_check([](const V& x) { return sum(mul(x, x)); }, rand_t({3, 4}, rng));
    EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradCheck, ConstantFunction) {
    std::mt19937_64 rng(7);
    auto leaf = V::parameter(rand_t({2, 2}, rng));
    const auto r = finite_diff_check([] { return V::constant(TD::scalar(3.0)); }, {leaf});
    EXPECT_EQ(r.analytic, 0.0);
    EXPECT_NEAR(r.numeric, 0.0, 1e-9);
    EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, RejectsNonDeterministicFunction) {
    int calls = 0;
    auto leaf = V::parameter(TD({1, 1}, 1.0));
    EXPECT_THROW(finite_diff_check([&] { return scale(sum(leaf), static_cast<D>(++calls)); }, {leaf}),
                 ValidationError);
}

TEST(GradCheck, CatchesWrongBackward) {
    // y = 3x with a backward that claims 3.001; also a tiny real slope.
    auto leaf = V::parameter(TD({1, 3}, 0.5));
    auto bad = [&] {
        TD out = leaf.value();
        for (auto& v : out.data()) v *= 3.0;
        return sum(make_op<D>("bad", std::move(out), {leaf}, [](Node<D>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * 3.001;
        }));
    };
    EXPECT_GT(finite_diff_check(bad, {leaf}).max_rel_error, 1e-4);
    auto small = [&] { return scale(sum(leaf), 1e-7); };
    EXPECT_LT(finite_diff_check(small, {leaf}).max_rel_error, 1e-4);
    auto shifted = [&] { return add(scale(sum(leaf), 1e-6), V::constant(TD::scalar(1.0))); };
    const auto r = finite_diff_check(shifted, {leaf});
    EXPECT_NE(r.numeric, 0.0);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, FivePointStencilAndSampling) {
    std::mt19937_64 rng(12);
    auto a = V::parameter(rand_t({4, 5}, rng));
    auto b = V::parameter(rand_t({3}, rng));
    auto f = [&] { return add(sum(mul(gelu(a), a)), sum(mul(b, b))); };
    GradCheckOptions o;
    o.stencil = 4;
    o.h = 1e-3;
    EXPECT_LT(finite_diff_check(f, {a, b}, o).max_rel_error, 1e-8);
    o.coords_per_param = 2;
    EXPECT_EQ(finite_diff_check(f, {a, b}, o).coordinates, 4u);
    o.coords_per_param = 10;
    EXPECT_EQ(finite_diff_check(f, {a, b}, o).coordinates, 13u);
    o.stencil = 3;
    EXPECT_THROW(finite_diff_check(f, {a, b}, o), ValidationError);

    auto leaf = V::parameter(TD({1, 3}, 0.5));
    auto bad = [&] {
        TD out = leaf.value();
        for (auto& v : out.data()) v *= 3.0;
        return sum(make_op<D>("bad", std::move(out), {leaf}, [](Node<D>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * 3.001;
        }));
    };
    o.stencil = 4;
    o.coords_per_param = 0;
    EXPECT_GT(finite_diff_check(bad, {leaf}, o).max_rel_error, 1e-4);
}

// Every op, checked against central differences on >= 20 random seeds.
TEST(GradCheck, EveryOpMatchesFiniteDifferencesOverSeeds) {
    for (const auto& [name, check] : check::op_checks()) {
        double worst = 0;
        for (std::uint64_t seed = 100; seed < 120; ++seed) worst = std::max(worst, check(seed).max_rel_error);
        EXPECT_LT(worst, 1e-4) << name;
    }
}

TEST(LeastSquares, RecoversPlantedSolution) {
    std::mt19937_64 rng(8);
    const auto a = rand_t({64, 8}, rng);
    const auto x_true = rand_t({8, 4}, rng);
    const auto b = matmul(V::constant(a), V::constant(x_true)).value();
    const auto res = least_squares_solve(a, b);
    EXPECT_FALSE(res.rank_deficient);
    EXPECT_LT(max_abs_diff(res.solution, x_true), 1e-6);
}

TEST(LeastSquares, IdentityAndZeroCases) {
    std::mt19937_64 rng(9);
    const auto b = rand_t({5, 3}, rng);
    EXPECT_LT(max_abs_diff(least_squares_solve(TD::identity(5), b).solution, b), 1e-12);
    const auto zero = least_squares_solve(rand_t({10, 4}, rng), TD::zeros({10, 2}));
    EXPECT_TRUE(zero.solution == TD::zeros({4, 2}));
}

TEST(LeastSquares, RankDeficientGivesMinimumNormSolution) {
    // Two identical columns: the minimum-norm solution splits the weight evenly.
    TD a({4, 2}, std::vector<D>{1, 1, 2, 2, 3, 3, 4, 4});
    TD b({4, 1}, std::vector<D>{2, 4, 6, 8});
    const auto res = least_squares_solve(a, b);
    EXPECT_TRUE(res.rank_deficient);
    EXPECT_EQ(res.rank, 1u);
    EXPECT_NEAR(res.solution[0], 1.0, 1e-10);
    EXPECT_NEAR(res.solution[1], 1.0, 1e-10);
}

TEST(LeastSquares, SolutionIsTheArgmin) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = rand_t({30, 5}, rng);
        const auto b = rand_t({30, 3}, rng);
        const auto x = least_squares_solve(a, b).solution;
        auto residual = [&](const TD& xx) {
            return mse(matmul(V::constant(a), V::constant(xx)), V::constant(b)).value()[0];
        };
        const double best = residual(x);
        auto dx = rand_t({5, 3}, rng, 1e-3);
        TD moved = x;
        for (std::size_t i = 0; i < moved.numel(); ++i) moved[i] += dx[i];
        EXPECT_GE(residual(moved), best);
    }
}

TEST(Determinism, ForwardOpsAreBitwiseReproducible) {
    auto run = [] {
        std::mt19937_64 rng(11);
        auto x = V::constant(Tensor<float>::randn({16, 32}, rng).cast<double>());
        auto w = V::constant(rand_t({32, 8}, rng));
        return softmax_rows(gelu(matmul(x, w))).value();
    };
    EXPECT_TRUE(run() == run());
}

TEST(Adam, UpdatesOnlyGivenParameters) {
    auto a = V::parameter(TD({2}, 1.0));
    auto b = V::parameter(TD({2}, 1.0));
    backward(sum(add(mul(a, a), mul(b, b))));
    Adam<D> opt;
    opt.step({a}, 0.1);
    EXPECT_LT(a.value()[0], 1.0);
    EXPECT_EQ(b.value()[0], 1.0);
}

TEST(Adam, CosineScheduleEndpoints) {
    EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0, 10), 1.0);
    EXPECT_NEAR(cosine_lr(1.0, 10, 10), 0.0, 1e-15);
    EXPECT_NEAR(cosine_lr(1.0, 5, 10), 0.5, 1e-15);
}

}  // namespace
}  // namespace lgp
