#pragma once

#include "morphnn/tensor.hpp"

namespace morphnn {

struct SvdResult {
    Tensor U;     // [n x n], orthonormal columns
    Tensor sigma; // [n], descending, nonnegative
    Tensor V;     // [n x n], orthonormal columns; A = U diag(sigma) V^T
};

/// One-sided Jacobi SVD for square matrices. Orthogonality of the factors is
/// accurate to ~1e-14, which the fixed-frame layers rely on. Throws
/// ValueError if the matrix is numerically rank-deficient (callers resample).
SvdResult jacobi_svd(const Tensor& A, int max_sweeps = 64);

/// max_ij |(M^T M - I)_ij|, the orthonormality defect.
double orthonormality_defect(const Tensor& M);

/// Operator norm induced by the l1 vector norm: max column abs sum.
double matrix_l1_norm(const Tensor& A);

} // namespace morphnn
