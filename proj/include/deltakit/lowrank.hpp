#pragma once

#include <cstddef>
#include <vector>

#include "deltakit/matrix.hpp"

namespace deltakit {

// Thin SVD: m == u * diag(sigma) * vt with sigma non-increasing and
// non-negative. u is rows x k, vt is k x cols, k = min(rows, cols).
struct SvdResult {
    DenseMatrix u;
    std::vector<float> sigma;
    DenseMatrix vt;
};

// One-sided Jacobi, double precision internally. Throws errc::no_convergence
// if the sweep cap is hit (pathological input).
SvdResult svd(const DenseMatrix& m);

// Rank-r factorization of a delta: a = U_r sqrt(S_r), b = sqrt(S_r) V_r.
// Reconstruction a*b is the Frobenius-optimal rank-r approximation.
struct LowRankDelta {
    DenseMatrix a; // rows x r
    DenseMatrix b; // r x cols
    DenseMatrix reconstruct() const { return matmul(a, b); }
    std::size_t rank() const { return a.cols(); }
};

LowRankDelta truncate_delta(const DenseMatrix& base, const DenseMatrix& fine, std::size_t rank);

// Cumulative explained variance: entry k = sum_{i<=k} sigma_i^2 / sum sigma_i^2.
// An all-zero delta is flagged and reported as all ones.
struct CevResult {
    std::vector<double> cumulative;
    bool zero_delta = false;
};

CevResult cev(const DenseMatrix& base, const DenseMatrix& fine);

// Largest r with 32*r*(n+m) <= n*m bits, floored at 1. published_convention
// doubles the value (published numbers assume half-width factor storage).
std::size_t memory_equivalent_rank(std::size_t n, std::size_t m, bool published_convention = false);

} // namespace deltakit
