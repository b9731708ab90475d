#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "deltakit/arch.hpp"
#include "deltakit/checkpoint.hpp"
#include "deltakit/matrix.hpp"

namespace deltakit {

// +1 if x > 0, -1 otherwise (zero maps to -1).
inline int sign_of(float x) { return x > 0.0f ? 1 : -1; }

// One bit per element plus one scale. Bits are row-major element order,
// LSB-first within each byte; bit 1 means +1, bit 0 means -1. Unused trailing
// bits of the last byte are zero.
struct PackedSignMatrix {
    std::size_t rows = 0, cols = 0;
    float scale = 0.0f;
    std::vector<std::uint8_t> bits;

    static std::size_t packed_size(std::size_t rows, std::size_t cols) {
        return (rows * cols + 7) / 8;
    }
    bool bit_at(std::size_t r, std::size_t c) const {
        const std::size_t idx = r * cols + c;
        return (bits[idx >> 3] >> (idx & 7)) & 1u;
    }
    void set_bit(std::size_t r, std::size_t c, bool positive) {
        const std::size_t idx = r * cols + c;
        if (positive)
            bits[idx >> 3] |= static_cast<std::uint8_t>(1u << (idx & 7));
        else
            bits[idx >> 3] &= static_cast<std::uint8_t>(~(1u << (idx & 7)));
    }
    std::uint64_t payload_bytes() const { return bits.size() + 4; } // bits + scale
};

// scale * Sign(delta) with scale = mean|delta| (the L2-optimal choice for a
// fixed sign pattern).
PackedSignMatrix compress_delta(const DenseMatrix& delta);
PackedSignMatrix compress_tensor(const DenseMatrix& base, const DenseMatrix& fine);
DenseMatrix decompress_tensor(const PackedSignMatrix& p);

// Ordered sign planes approximating one delta; plane i fits the residual
// left by planes 0..i-1. Reconstruction is the sum of the planes.
struct DeltaStack {
    std::vector<PackedSignMatrix> planes;

    std::size_t rows() const { return planes.empty() ? 0 : planes.front().rows; }
    std::size_t cols() const { return planes.empty() ? 0 : planes.front().cols; }
    DenseMatrix reconstruct() const;
    std::uint64_t payload_bytes() const;
};

DeltaStack compress_stack(const DenseMatrix& base, const DenseMatrix& fine, std::size_t planes);

// Per-row signed accumulation over bit-set/bit-clear columns:
// y_i = scale * (2 * sum_{bit=1} x_j - sum_j x_j). Never materializes the
// dense matrix.
std::vector<float> packed_matvec(const PackedSignMatrix& p, std::span<const float> x);
// Unscaled variants used by the model's decomposed forward/backward.
void packed_signed_accumulate(const PackedSignMatrix& p, std::span<const float> x,
                              std::span<float> out);   // out_i = sum_j s_ij x_j
void packed_signed_accumulate_t(const PackedSignMatrix& p, std::span<const float> y,
                                std::span<float> out); // out_j = sum_i s_ij y_i

// Per-tensor payload: a sign-plane stack for quantized tensors, a raw F32
// delta for everything else (embeddings, LM head, norms).
struct DeltaEntry {
    enum class Kind { Packed, Raw };
    Kind kind = Kind::Raw;
    DeltaStack stack; // Kind::Packed
    DenseMatrix raw;  // Kind::Raw

    std::size_t rows() const { return kind == Kind::Packed ? stack.rows() : raw.rows(); }
    std::size_t cols() const { return kind == Kind::Packed ? stack.cols() : raw.cols(); }
    DenseMatrix reconstruct() const { return kind == Kind::Packed ? stack.reconstruct() : raw; }
    std::uint64_t payload_bytes() const;
};

struct DeltaFile {
    std::map<std::string, DeltaEntry> entries;

    std::vector<std::string> quantized_names() const;
    std::uint64_t payload_bytes() const; // resident bytes of all entries
};

using QuantizePolicy = std::function<bool(const std::string&)>;

// Attention and MLP projection matrices of the transformer blocks.
QuantizePolicy default_quantize_policy();
// "linear" (default policy), "none", or an ECMAScript regex over tensor names.
QuantizePolicy policy_from_spec(const std::string& spec);

DeltaFile build_delta_file(const ModelCheckpoint& base, const ModelCheckpoint& fine,
                           std::size_t planes, const QuantizePolicy& policy);
ModelCheckpoint apply_delta(const ModelCheckpoint& base, const DeltaFile& delta);

// .bdelta container: "BDLT", u32 LE version 1, u32 LE JSON header length,
// JSON array of {name, rows, cols, kind, planes, scales, payload_offset,
// payload_len}, then concatenated per-tensor payloads.
void write_delta_file(const DeltaFile& delta, const std::filesystem::path& path);
DeltaFile read_delta_file(const std::filesystem::path& path);

// Size accounting: quantized tensors cost 1 bit/param plus 4 bytes per plane
// scale; everything else costs bytes_per_dense_param (2 for F16 origin).
struct CompressionSummary {
    std::uint64_t base_bytes = 0;
    std::uint64_t delta_bytes = 0;
    double factor = 0.0;
};

CompressionSummary compression_report(std::span<const TensorSpec> shapes,
                                      const QuantizePolicy& policy, std::size_t planes,
                                      std::size_t bytes_per_dense_param);

} // namespace deltakit
