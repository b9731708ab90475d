// Independent reference implementations used to freeze expected values.
// These deliberately avoid the library's own compute paths.
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "deltakit/matrix.hpp"

namespace oracle {

inline deltakit::DenseMatrix random_matrix(std::size_t rows, std::size_t cols,
                                           std::uint64_t seed, float sigma = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, sigma);
    deltakit::DenseMatrix m(rows, cols);
    for (float& v : m.values()) v = dist(rng);
    return m;
}

inline std::vector<float> random_vector(std::size_t n, std::uint64_t seed, float sigma = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, sigma);
    std::vector<float> v(n);
    for (float& x : v) x = dist(rng);
    return v;
}

// plain triple loop, double accumulation
inline deltakit::DenseMatrix naive_matmul(const deltakit::DenseMatrix& a,
                                          const deltakit::DenseMatrix& b) {
    deltakit::DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k)
                acc += static_cast<double>(a(i, k)) * b(k, j);
            out(i, j) = static_cast<float>(acc);
        }
    return out;
}

inline std::vector<float> naive_matvec(const deltakit::DenseMatrix& w,
                                       std::span<const float> x) {
    std::vector<float> y(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j)
            acc += static_cast<double>(w(i, j)) * x[j];
        y[i] = static_cast<float>(acc);
    }
    return y;
}

// sum over elements of (|x_ij| - a)^2, brute force in double
inline double abs_residual_objective(const deltakit::DenseMatrix& m, double a) {
    double acc = 0.0;
    for (float v : m.values()) {
        const double d = std::fabs(static_cast<double>(v)) - a;
        acc += d * d;
    }
    return acc;
}

inline double rel_frobenius_error(const deltakit::DenseMatrix& got,
                                  const deltakit::DenseMatrix& want) {
    const double denom = deltakit::frobenius_norm(want);
    return deltakit::frobenius_distance(got, want) / (denom > 0 ? denom : 1.0);
}

inline double rel_l2_error(std::span<const float> got, std::span<const float> want) {
    double num = 0.0, denom = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double d = static_cast<double>(got[i]) - want[i];
        num += d * d;
        denom += static_cast<double>(want[i]) * want[i];
    }
    return std::sqrt(num) / (denom > 0 ? std::sqrt(denom) : 1.0);
}

// cyclic Jacobi eigenvalues of a symmetric matrix, descending
inline std::vector<double> sym_eigenvalues(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i][i];
    std::sort(eig.begin(), eig.end(), std::greater<>());
    return eig;
}

// ten-line scalar Adam, the reference the optimizer must match to 1e-12
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    long t = 0;
    double step(double p, double g, double lr, double b1, double b2, double eps) {
        t += 1;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return p - lr * mh / (std::sqrt(vh) + eps);
    }
};

} // namespace oracle
