#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace deltakit {

// Row-level primitives shared by the training forward pass and the serving
// decode loop so both paths compute identical math.

// y_i = w_i * x_i / rms, rms = sqrt(mean(x^2) + eps). Returns 1/rms.
// Row statistics in double so the pre-weight output has RMS 1 for any
// non-zero input.
inline double rmsnorm_row(std::span<const float> x, std::span<const float> w,
                          std::span<float> out) {
    constexpr double kEps = 1e-12;
    double msq = 0.0;
    for (float v : x) msq += static_cast<double>(v) * v;
    msq /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(msq + kEps);
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<float>(static_cast<double>(x[i]) * inv) * w[i];
    return inv;
}

// Interleaved-pair rotary embedding applied in place to one head slice.
// Backward is the same rotation with the angle negated.
inline void rope_row(std::span<float> head, std::size_t position, float theta_base,
                     bool invert = false) {
    const std::size_t half = head.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq =
            std::pow(static_cast<double>(theta_base),
                     -2.0 * static_cast<double>(i) / static_cast<double>(head.size()));
        double angle = static_cast<double>(position) * freq;
        if (invert) angle = -angle;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float a = head[2 * i];
        const float b = head[2 * i + 1];
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
    }
}

// Numerically stable softmax over the first `n` entries, in f32.
inline void softmax_row(std::span<float> row, std::size_t n) {
    float mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline float silu_grad(float x) {
    const float s = 1.0f / (1.0f + std::exp(-x));
    return s * (1.0f + x * (1.0f - s));
}

} // namespace deltakit
