#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "deltakit/error.hpp"

namespace deltakit {

// Row-major 2-D array of 32-bit floats. 1-D tensors (norm weights, biases)
// are stored as 1 x n. Treated as immutable once built; all operations on it
// are pure functions.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), values_(rows * cols, 0.0f) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        check(values_.size() == rows_ * cols_, errc::length_mismatch,
              "DenseMatrix: data length does not equal rows*cols");
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    float operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
    float& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

    const float* row(std::size_t r) const { return values_.data() + r * cols_; }
    float* row(std::size_t r) { return values_.data() + r * cols_; }
    std::span<const float> row_span(std::size_t r) const { return {row(r), cols_}; }

    const std::vector<float>& values() const { return values_; }
    std::vector<float>& values() { return values_; }

    bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (float v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<float> values_;
};

// a (r x k) * b (k x c), f32 accumulation.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);

// a (s x k) * b(t x k)^T -> s x t. Row-by-row dot products; this is the shape
// linear layers want when weights are stored out x in.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);

// a(k x s)^T * b (k x t) -> s x t. Used by weight-gradient computations.
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);

DenseMatrix transpose(const DenseMatrix& m);
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);
void add_inplace(DenseMatrix& a, const DenseMatrix& b);
void scale_inplace(DenseMatrix& a, float s);

// W (r x c) * x (c) -> r, f32 accumulation.
std::vector<float> matvec(const DenseMatrix& w, std::span<const float> x);

double frobenius_norm(const DenseMatrix& m);
double frobenius_distance(const DenseMatrix& a, const DenseMatrix& b);

} // namespace deltakit
