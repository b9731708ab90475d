#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deltakit/arch.hpp"
#include "deltakit/matrix.hpp"

namespace deltakit {

enum class OriginDtype { F32, F16 };

// Named tensor map plus optional architecture config. Base or fine-tuned
// weights; 1-D tensors live as 1 x n matrices.
struct ModelCheckpoint {
    std::map<std::string, DenseMatrix> tensors;
    std::optional<ToyArchConfig> config;
    OriginDtype origin = OriginDtype::F32;

    const DenseMatrix& tensor(const std::string& name) const;
    // Checks that every tensor required by the config is present with the
    // config-implied shape.
    void validate_against_config() const;
    std::uint64_t payload_bytes() const; // in-memory tensor data, 4 bytes/value
};

// safetensors container: u64 LE header length, JSON header mapping tensor
// name -> {dtype, shape, data_offsets}, optional "__metadata__", then a raw
// byte buffer addressed by the offsets.
struct RawTensor {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;
};

struct RawSafetensors {
    std::map<std::string, RawTensor> tensors;
    std::map<std::string, std::string> metadata;
};

RawSafetensors read_safetensors(const std::filesystem::path& path);
void write_safetensors(const RawSafetensors& file, const std::filesystem::path& path);

// Typed layer: decodes F32 payloads directly and widens F16 exactly. Any
// other dtype is rejected with an error naming the tensor.
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);
// Always writes F32 payloads; round-trips tensor contents bit-exactly.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);

} // namespace deltakit
