#include "morphnn/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace morphnn {

SvdResult jacobi_svd(const Tensor& A, int max_sweeps) {
    if (A.rank() != 2 || A.extent(0) != A.extent(1))
        throw ShapeError("jacobi_svd: square matrix required");
    std::size_t n = A.extent(0);
    Tensor B = A;
    Tensor V({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) V.at(i, i) = 1.0;
    const double tol = 1e-15;

    auto col_dot = [&](const Tensor& M, std::size_t p, std::size_t q) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += M.at(i, p) * M.at(i, q);
        return s;
    };
    auto rotate_cols = [&](Tensor& M, std::size_t p, std::size_t q, double c, double s) {
        for (std::size_t i = 0; i < n; ++i) {
            double mp = M.at(i, p), mq = M.at(i, q);
            M.at(i, p) = c * mp - s * mq;
            M.at(i, q) = s * mp + c * mq;
        }
    };

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = col_dot(B, p, p);
                double aqq = col_dot(B, q, q);
                double apq = col_dot(B, p, q);
                if (std::abs(apq) <= tol * std::sqrt(app * aqq)) continue;
                rotated = true;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                rotate_cols(B, p, q, c, s);
                rotate_cols(V, p, q, c, s);
            }
        }
        if (!rotated) break;
    }

    SvdResult r{Tensor({n, n}), Tensor({n}), std::move(V)};
    double sigma_max = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        double norm = std::sqrt(col_dot(B, j, j));
        r.sigma[j] = norm;
        sigma_max = std::max(sigma_max, norm);
    }
    for (std::size_t j = 0; j < n; ++j) {
        if (r.sigma[j] <= 1e-13 * std::max(sigma_max, 1.0))
            throw ValueError("jacobi_svd: numerically rank-deficient matrix");
        for (std::size_t i = 0; i < n; ++i) r.U.at(i, j) = B.at(i, j) / r.sigma[j];
    }

    // Descending singular values.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return r.sigma[a] > r.sigma[b]; });
    Tensor U2({n, n}), V2({n, n}), s2({n});
    for (std::size_t j = 0; j < n; ++j) {
        s2[j] = r.sigma[order[j]];
        for (std::size_t i = 0; i < n; ++i) {
            U2.at(i, j) = r.U.at(i, order[j]);
            V2.at(i, j) = r.V.at(i, order[j]);
        }
    }
    return {std::move(U2), std::move(s2), std::move(V2)};
}

double orthonormality_defect(const Tensor& M) {
    std::size_t n = M.extent(1);
    double worst = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t q = p; q < n; ++q) {
            double dot = 0.0;
            for (std::size_t i = 0; i < M.extent(0); ++i) dot += M.at(i, p) * M.at(i, q);
            double target = p == q ? 1.0 : 0.0;
            worst = std::max(worst, std::abs(dot - target));
        }
    }
    return worst;
}

double matrix_l1_norm(const Tensor& A) {
    double worst = 0.0;
    for (std::size_t j = 0; j < A.extent(1); ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < A.extent(0); ++i) col += std::abs(A.at(i, j));
        worst = std::max(worst, col);
    }
    return worst;
}

} // namespace morphnn
