#include "deltakit/matrix.hpp"

#include <cmath>
#include <string>

namespace deltakit {

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.cols() == b.rows(), errc::shape_mismatch,
          "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
              std::to_string(b.rows()) + ")");
    DenseMatrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        float* out_row = out.row(i);
        const float* a_row = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const float aik = a_row[k];
            const float* b_row = b.row(k);
            for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.cols() == b.cols(), errc::shape_mismatch, "matmul_nt: inner dimensions differ");
    DenseMatrix out(a.rows(), b.rows());
    const std::size_t k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const float* a_row = a.row(i);
        float* out_row = out.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const float* b_row = b.row(j);
            float acc = 0.0f;
            for (std::size_t t = 0; t < k; ++t) acc += a_row[t] * b_row[t];
            out_row[j] = acc;
        }
    }
    return out;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.rows() == b.rows(), errc::shape_mismatch, "matmul_tn: inner dimensions differ");
    DenseMatrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const float* a_row = a.row(k);
        const float* b_row = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const float aki = a_row[i];
            float* out_row = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
        }
    }
    return out;
}

DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.same_shape(b), errc::shape_mismatch, "add: shape mismatch");
    DenseMatrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += b.values()[i];
    return out;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.same_shape(b), errc::shape_mismatch, "sub: shape mismatch");
    DenseMatrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] -= b.values()[i];
    return out;
}

void add_inplace(DenseMatrix& a, const DenseMatrix& b) {
    check(a.same_shape(b), errc::shape_mismatch, "add_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] += b.values()[i];
}

void scale_inplace(DenseMatrix& a, float s) {
    for (float& v : a.values()) v *= s;
}

std::vector<float> matvec(const DenseMatrix& w, std::span<const float> x) {
    check(w.cols() == x.size(), errc::length_mismatch, "matvec: length mismatch");
    std::vector<float> y(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const float* row = w.row(i);
        float acc = 0.0f;
        for (std::size_t j = 0; j < x.size(); ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    return y;
}

double frobenius_norm(const DenseMatrix& m) {
    double acc = 0.0;
    for (float v : m.values()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

double frobenius_distance(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.same_shape(b), errc::shape_mismatch, "frobenius_distance: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.values()[i]) - b.values()[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

} // namespace deltakit
