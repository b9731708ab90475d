#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace deltakit {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    std::int64_t t = 0;
};

// Standard Adam with bias correction:
//   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
// Throws errc::non_finite (with the parameter index) on a non-finite
// gradient.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& cfg);

} // namespace deltakit
