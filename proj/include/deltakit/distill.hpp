#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "deltakit/checkpoint.hpp"
#include "deltakit/delta.hpp"
#include "deltakit/lowrank.hpp"

namespace deltakit {

// Defaults follow the published recipe: 200 steps of batch 4 over length-128
// sequences, Adam at lr 1e-4, betas (0.9, 0.999), eps 1e-8.
struct DistillConfig {
    std::size_t steps = 200;
    std::size_t batch = 4;
    std::size_t seq_len = 128;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
};

struct TokenStream {
    std::vector<std::vector<std::int32_t>> sequences;
    bool wrapped = false; // fewer windows than requested; selection cycled
};

// Little-endian u32 ids, seeded non-overlapping windows. Windows are drawn in
// a shuffled order; requesting more than the file holds cycles through the
// shuffle again and sets `wrapped`.
TokenStream load_tokens(const std::filesystem::path& path, std::size_t seq_len,
                        std::size_t count, std::uint64_t seed, std::size_t vocab);

// Byte-level tokenizer: id = byte value mod vocab.
std::vector<std::int32_t> bytes_to_tokens(const std::filesystem::path& path, std::size_t vocab);
void write_token_file(const std::filesystem::path& path, std::span<const std::int32_t> ids);

struct TensorScaleDrift {
    std::string name;
    std::vector<float> alpha_before, alpha_after;
};

struct DistillReport {
    double initial_loss = 0.0; // first-batch slice, before any update
    double final_loss = 0.0;   // same slice, after the last update
    std::size_t steps = 0;
    bool calib_wrapped = false;
    std::vector<TensorScaleDrift> per_tensor;
    std::string to_json() const;
};

// Stage-2 scale distillation: optimize the per-matrix (per-plane) scales to
// match the fine-tuned model's logits over the calibration stream. Sign bits
// stay frozen; the returned file differs from `delta` only in scales.
// Deterministic given the config seed.
DeltaFile distill_scales(const ModelCheckpoint& base, const ModelCheckpoint& fine,
                         const DeltaFile& delta, const TokenStream& calib,
                         const DistillConfig& cfg, DistillReport* report = nullptr);

// Same loop with every entry of the low-rank factors trainable. Tensors not
// in `factors` are carried exactly.
std::map<std::string, LowRankDelta> distill_lowrank(const ModelCheckpoint& base,
                                                    const ModelCheckpoint& fine,
                                                    const std::map<std::string, LowRankDelta>& factors,
                                                    const TokenStream& calib,
                                                    const DistillConfig& cfg,
                                                    DistillReport* report = nullptr);

} // namespace deltakit
