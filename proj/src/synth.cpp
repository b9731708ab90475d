#include "deltakit/synth.hpp"

#include <random>

namespace deltakit {

ModelCheckpoint synth_base(const ToyArchConfig& cfg, std::uint64_t seed, float weight_scale) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, weight_scale);
    ModelCheckpoint ckpt;
    ckpt.config = cfg;
    for (const auto& spec : tensor_shapes(cfg)) {
        DenseMatrix m(spec.rows, spec.cols);
        const bool is_norm = spec.name == "final_norm" ||
                             spec.name.find(".norm") != std::string::npos;
        for (float& v : m.values()) v = is_norm ? 1.0f : dist(rng);
        ckpt.tensors.emplace(spec.name, std::move(m));
    }
    return ckpt;
}

ModelCheckpoint synth_fine(const ModelCheckpoint& base, PerturbKind kind, float magnitude,
                           std::uint64_t seed, const QuantizePolicy& policy) {
    std::mt19937_64 rng(seed);
    ModelCheckpoint fine;
    fine.config = base.config;
    fine.origin = base.origin;
    for (const auto& [name, bt] : base.tensors) {
        DenseMatrix m = bt;
        if (kind == PerturbKind::Signed) {
            // exactly representable 1-bit delta, quantized tensors only
            if (policy(name)) {
                std::bernoulli_distribution coin(0.5);
                for (float& v : m.values()) v += coin(rng) ? magnitude : -magnitude;
            }
        } else {
            std::normal_distribution<float> noise(0.0f, magnitude);
            for (float& v : m.values()) v += noise(rng);
        }
        fine.tensors.emplace(name, std::move(m));
    }
    return fine;
}

} // namespace deltakit
