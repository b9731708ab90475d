#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deltakit/checkpoint.hpp"
#include "deltakit/delta.hpp"
#include "deltakit/matrix.hpp"
#include "deltakit/model.hpp"

namespace deltakit {

// Round-to-nearest INT8 with one symmetric scale per row. A row of zeros
// gets scale 0; every value lies in [-127, 127] and dequantization error is
// at most row_scale/2 per element.
struct Int8Tensor {
    std::size_t rows = 0, cols = 0;
    std::vector<std::int8_t> values;
    std::vector<float> row_scales;

    std::uint64_t payload_bytes() const { return values.size() + 4 * row_scales.size(); }
};

Int8Tensor rtn_quantize(const DenseMatrix& w);
DenseMatrix rtn_dequantize(const Int8Tensor& q);

// y = rows(q) . x with the row scale applied after integer-weight
// accumulation; never materializes the dense matrix.
std::vector<float> int8_matvec(const Int8Tensor& q, std::span<const float> x);
// a (s x in) * q^T -> s x rows(q)
DenseMatrix int8_matmul_nt(const DenseMatrix& a, const Int8Tensor& q);

// Base checkpoint with the policy-matched linear layers RTN-quantized and
// everything else dense.
struct QuantizedCheckpoint {
    std::map<std::string, Int8Tensor> int8_tensors;
    std::map<std::string, DenseMatrix> dense_tensors;
    std::optional<ToyArchConfig> config;

    std::uint64_t payload_bytes() const;
};

QuantizedCheckpoint rtn_quantize_checkpoint(const ModelCheckpoint& base,
                                            const QuantizePolicy& policy);
DenseMatrix dequantize_tensor(const QuantizedCheckpoint& q, const std::string& name);
ModelCheckpoint dequantize_checkpoint(const QuantizedCheckpoint& q);

// safetensors container with I8 payloads plus a sidecar JSON of row scales
// at <path>.scales.json. The plain checkpoint loader rejects I8 files.
void save_quantized_checkpoint(const QuantizedCheckpoint& q, const std::filesystem::path& path);
QuantizedCheckpoint load_quantized_checkpoint(const std::filesystem::path& path);

// Forward views computing dequant(base) + delta per linear layer. Inference
// only (the int8 paths carry no gradients). The returned model keeps
// pointers into `qbase`, which must outlive it.
ViewModel compose_quantized_base(const QuantizedCheckpoint& qbase, const DeltaFile& delta);

} // namespace deltakit
