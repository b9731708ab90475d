#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deltakit/checkpoint.hpp"
#include "deltakit/delta.hpp"
#include "deltakit/int8.hpp"
#include "deltakit/model.hpp"

namespace deltakit {

enum class ServeMode { Shared, Naive };

struct DecodeRequest {
    std::size_t request_id = 0;
    std::int32_t token = 0;
    std::size_t position = 0; // must equal the request cache's position
};

struct DecodeBatch {
    std::vector<DecodeRequest> requests;
};

// Byte accounting for a pool: shared(B) = backbone + B*per_delta +
// activations(B); naive(B) = B*naive_per_model + activations(B). KV caches
// count as activations and are excluded from the crossover.
struct MemoryModel {
    std::uint64_t backbone_bytes = 0;
    std::uint64_t backbone_linear_bytes = 0;
    std::uint64_t per_delta_bytes = 0;
    std::uint64_t naive_per_model_bytes = 0;
    std::uint64_t activation_bytes = 0;
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::size_t crossover_batch = 0; // smallest B with B*per_delta >= backbone_linear

    std::uint64_t shared_total() const { return backbone_bytes + batch * per_delta_bytes + activation_bytes; }
    std::uint64_t naive_total() const { return batch * naive_per_model_bytes + activation_bytes; }
    std::string to_json() const;

    // Pure shape arithmetic (no weights). bytes_per_dense_param is 4 for the
    // simulator's F32 residency; 2 models an F16-resident backbone.
    static MemoryModel from_shapes(std::span<const TensorSpec> shapes, const QuantizePolicy& policy,
                                   std::size_t planes, std::size_t bytes_per_dense_param,
                                   std::size_t batch, std::size_t seq, std::size_t n_layers,
                                   std::size_t dim);
};

// One resident backbone, N registered deltas, per-request KV caches. Shared
// mode runs the backbone GEMM once per decode step for the whole batch and
// applies each request's delta separately; naive mode materializes a merged
// model per request and evicts it after the step.
class ServingPool {
public:
    explicit ServingPool(ModelCheckpoint backbone);
    explicit ServingPool(QuantizedCheckpoint backbone);

    void register_delta(const std::string& id, const std::filesystem::path& path, bool resident);
    std::vector<std::string> delta_ids() const;
    std::size_t open_request(const std::string& delta_id);
    void close_request(std::size_t request_id);

    // Per-request next-token logits, in request order.
    std::vector<std::vector<float>> decode_step(const DecodeBatch& batch, ServeMode mode);

    MemoryModel memory_report(std::size_t batch, std::size_t seq) const;
    std::uint64_t resident_bytes() const; // backbone + resident deltas + caches
    const ToyArchConfig& config() const { return cfg_; }

    struct Stats {
        std::uint64_t backbone_passes = 0; // per decode step: 1 shared, B naive
        std::uint64_t cold_loads = 0;
        double last_cold_load_ms = 0.0;
    };
    const Stats& stats() const { return stats_; }

private:
    struct DeltaSlot {
        std::filesystem::path path;
        bool resident = false;
        std::optional<DeltaFile> file;
    };
    struct Request {
        std::string delta_id;
        KvCache cache;
        bool open = false;
    };

    const DeltaFile& delta_for(const std::string& id);
    const DenseMatrix& backbone_dense(const std::string& name) const;
    DenseMatrix backbone_linear_nt(const DenseMatrix& x, const std::string& name) const;
    std::vector<std::vector<float>> decode_shared(const DecodeBatch& batch);
    std::vector<std::vector<float>> decode_naive(const DecodeBatch& batch);
    void validate_batch(const DecodeBatch& batch);

    ToyArchConfig cfg_;
    ModelCheckpoint backbone_;            // dense backbone (empty if int8-backed)
    std::optional<QuantizedCheckpoint> qbackbone_;
    std::map<std::string, DeltaSlot> registry_;
    std::vector<Request> requests_;
    Stats stats_;
};

struct BenchRow {
    std::size_t batch = 0;
    std::string mode;
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    std::uint64_t bytes_touched = 0;
    std::uint64_t resident_bytes = 0;
};

// Decode-step latency sweep over batch sizes for both modes. Requests are
// assigned to registered deltas round-robin; warm-up steps are discarded.
std::vector<BenchRow> latency_bench(ServingPool& pool, std::span<const std::size_t> batches,
                                    std::size_t seq, std::size_t trials, std::uint64_t seed);

// Header: B,mode,mean_ms,p50_ms,bytes_touched,resident_bytes
std::string bench_csv(std::span<const BenchRow> rows);

} // namespace deltakit
