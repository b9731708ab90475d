#include "deltakit/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deltakit {

namespace {

// One-sided Jacobi on the columns of a tall matrix (rows >= cols), in double.
// Columns are orthogonalized pairwise; singular values are the final column
// norms and V accumulates the rotations.
struct JacobiResult {
    std::vector<double> a; // rows x cols, column-major, orthogonal columns
    std::vector<double> v; // cols x cols, column-major
    std::size_t rows, cols;
};

JacobiResult one_sided_jacobi(const DenseMatrix& m) {
    const std::size_t rows = m.rows(), cols = m.cols();
    JacobiResult r{std::vector<double>(rows * cols), std::vector<double>(cols * cols, 0.0), rows,
                   cols};
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) r.a[j * rows + i] = m(i, j);
    for (std::size_t j = 0; j < cols; ++j) r.v[j * cols + j] = 1.0;

    constexpr int kMaxSweeps = 60;
    constexpr double kTol = 1e-14;
    // columns this far below the dominant one count as zero; rank-deficient
    // inputs otherwise keep rotating numerical noise forever
    double max_col_sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        double norm = 0.0;
        for (std::size_t i = 0; i < rows; ++i) norm += r.a[j * rows + i] * r.a[j * rows + i];
        max_col_sq = std::max(max_col_sq, norm);
    }
    const double dead_floor = max_col_sq * 1e-30;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double* cp = r.a.data() + p * rows;
                double* cq = r.a.data() + q * rows;
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    app += cp[i] * cp[i];
                    aqq += cq[i] * cq[i];
                    apq += cp[i] * cq[i];
                }
                if (app <= dead_floor || aqq <= dead_floor) continue;
                if (std::fabs(apq) <= kTol * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = std::copysign(1.0, zeta) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double x = cp[i], y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
                double* vp = r.v.data() + p * cols;
                double* vq = r.v.data() + q * cols;
                for (std::size_t i = 0; i < cols; ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) return r;
    }
    fail(errc::no_convergence, "svd: Jacobi sweeps did not converge");
}

SvdResult svd_tall(const DenseMatrix& m) {
    JacobiResult jr = one_sided_jacobi(m);
    const std::size_t rows = jr.rows, cols = jr.cols;

    std::vector<double> sigma(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double norm = 0.0;
        const double* cj = jr.a.data() + j * rows;
        for (std::size_t i = 0; i < rows; ++i) norm += cj[i] * cj[i];
        sigma[j] = std::sqrt(norm);
    }

    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

    SvdResult out;
    out.u = DenseMatrix(rows, cols);
    out.vt = DenseMatrix(cols, cols);
    out.sigma.resize(cols);
    for (std::size_t k = 0; k < cols; ++k) {
        const std::size_t j = order[k];
        out.sigma[k] = static_cast<float>(sigma[j]);
        const double inv = sigma[j] > 0.0 ? 1.0 / sigma[j] : 0.0;
        const double* cj = jr.a.data() + j * rows;
        for (std::size_t i = 0; i < rows; ++i)
            out.u(i, k) = static_cast<float>(cj[i] * inv);
        const double* vj = jr.v.data() + j * cols;
        for (std::size_t i = 0; i < cols; ++i)
            out.vt(k, i) = static_cast<float>(vj[i]);
    }
    return out;
}

} // namespace

SvdResult svd(const DenseMatrix& m) {
    check(m.rows() >= 1 && m.cols() >= 1, errc::bad_argument, "svd: empty matrix");
    check(m.all_finite(), errc::non_finite, "svd: non-finite entries");
    if (m.rows() >= m.cols()) return svd_tall(m);
    // Wide input: factor the transpose and swap the roles of U and V.
    SvdResult t = svd_tall(transpose(m));
    SvdResult out;
    out.sigma = t.sigma;
    out.u = transpose(t.vt);
    out.vt = transpose(t.u);
    return out;
}

LowRankDelta truncate_delta(const DenseMatrix& base, const DenseMatrix& fine, std::size_t rank) {
    check(base.same_shape(fine), errc::shape_mismatch, "truncate_delta: shape mismatch");
    const std::size_t maxr = std::min(base.rows(), base.cols());
    check(rank >= 1, errc::bad_argument, "truncate_delta: rank must be >= 1");
    check(rank <= maxr, errc::bad_argument,
          "truncate_delta: rank " + std::to_string(rank) + " exceeds min(n,m) = " +
              std::to_string(maxr));
    const DenseMatrix delta = sub(fine, base);
    const SvdResult s = svd(delta);
    LowRankDelta out;
    out.a = DenseMatrix(delta.rows(), rank);
    out.b = DenseMatrix(rank, delta.cols());
    for (std::size_t k = 0; k < rank; ++k) {
        const float root = std::sqrt(s.sigma[k]);
        for (std::size_t i = 0; i < delta.rows(); ++i) out.a(i, k) = s.u(i, k) * root;
        for (std::size_t j = 0; j < delta.cols(); ++j) out.b(k, j) = s.vt(k, j) * root;
    }
    return out;
}

CevResult cev(const DenseMatrix& base, const DenseMatrix& fine) {
    const SvdResult s = svd(sub(fine, base));
    CevResult out;
    double total = 0.0;
    for (float v : s.sigma) total += static_cast<double>(v) * v;
    out.cumulative.resize(s.sigma.size());
    if (total == 0.0) {
        out.zero_delta = true;
        std::fill(out.cumulative.begin(), out.cumulative.end(), 1.0);
        return out;
    }
    double run = 0.0;
    for (std::size_t k = 0; k < s.sigma.size(); ++k) {
        run += static_cast<double>(s.sigma[k]) * s.sigma[k];
        out.cumulative[k] = run / total;
    }
    return out;
}

std::size_t memory_equivalent_rank(std::size_t n, std::size_t m, bool published_convention) {
    check(n >= 1 && m >= 1, errc::bad_argument, "memory_equivalent_rank: dims must be >= 1");
    const std::size_t r = (n * m) / (32 * (n + m));
    const std::size_t base = std::max<std::size_t>(r, 1);
    return published_convention ? 2 * base : base;
}

} // namespace deltakit
