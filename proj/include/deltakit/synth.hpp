#pragma once

#include <cstdint>
#include <string>

#include "deltakit/checkpoint.hpp"
#include "deltakit/delta.hpp"

namespace deltakit {

// Desk-scale stand-ins for real fine-tunes: a seeded random base checkpoint
// and a perturbed copy of it.
ModelCheckpoint synth_base(const ToyArchConfig& cfg, std::uint64_t seed,
                           float weight_scale = 0.08f);

enum class PerturbKind {
    Signed, // fine = base + c * random sign matrix, quantized tensors only
    Sigma,  // fine = base + N(0, c), every tensor
};

ModelCheckpoint synth_fine(const ModelCheckpoint& base, PerturbKind kind, float magnitude,
                           std::uint64_t seed, const QuantizePolicy& policy);

} // namespace deltakit
