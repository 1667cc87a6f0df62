// SPDX-License-Identifier: Apache-2.0
//
// Dense least squares: X = argmin ||A X - B||_F via a complete orthogonal
// decomposition, which yields the minimum-norm solution when A is rank
// deficient. Always solved in double precision.

#pragma once

#include <Eigen/Dense>

#include "lgpool/numerics/tensor.hpp"

namespace lgp {

template <class T>
struct LeastSquaresResult {
    Tensor<T> solution;
    std::size_t rank = 0;
    bool rank_deficient = false;
};

template <class T>
LeastSquaresResult<T> least_squares_solve(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("least_squares_solve: expected matrices, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t n = a.dim(0), d = a.dim(1), dp = b.dim(1);
    if (b.dim(0) != n) {
        throw ShapeError("least_squares_solve: row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Mat am(n, d), bm(n, dp);
    for (std::size_t i = 0; i < n * d; ++i) am.data()[i] = static_cast<double>(a[i]);
    for (std::size_t i = 0; i < n * dp; ++i) bm.data()[i] = static_cast<double>(b[i]);

    Eigen::CompleteOrthogonalDecomposition<Mat> cod(am);
    const Mat x = cod.solve(bm);

    LeastSquaresResult<T> out;
    out.rank = static_cast<std::size_t>(cod.rank());
    out.rank_deficient = out.rank < d;
    out.solution = Tensor<T>({d, dp});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < dp; ++j) out.solution.at(i, j) = static_cast<T>(x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    if (!out.solution.all_finite()) throw NumericError("least_squares_solve: non-finite solution");
    return out;
}

/// Moore-Penrose pseudo-inverse of an m x n matrix, returned as n x m.
template <class T>
Tensor<T> pseudo_inverse(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("pseudo_inverse expects a matrix, got " + shape_str(a.shape()));
    return least_squares_solve(a, Tensor<T>::identity(a.dim(0))).solution;
}

}  // namespace lgp
