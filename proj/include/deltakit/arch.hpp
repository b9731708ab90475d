#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace deltakit {

// Shape of the toy Llama-style transformer. Serialized as JSON with these
// exact field names.
struct ToyArchConfig {
    std::size_t vocab = 256;
    std::size_t dim = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t intermediate = 172;
    std::size_t max_seq = 128;
    float rope_theta = 10000.0f;

    std::size_t head_dim() const { return dim / n_heads; }
    void validate() const;
    std::string to_json() const;
    static ToyArchConfig from_json(const std::string& text);
};

struct TensorSpec {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t count() const { return rows * cols; }
};

// Full tensor list implied by a config, in checkpoint naming convention:
// embed, layers.{i}.{attn_q,attn_k,attn_v,attn_o,mlp_gate,mlp_up,mlp_down,
// norm1,norm2}, final_norm, lm_head. Weights are out x in; norms 1 x dim.
std::vector<TensorSpec> tensor_shapes(const ToyArchConfig& cfg);

// Published model shapes used for size accounting without weights.
// kv_dim < dim encodes grouped-query attention (k/v projections are
// kv_dim x dim).
struct ArchPreset {
    std::string name;
    std::size_t vocab, dim, kv_dim, n_layers, intermediate;
};

const ArchPreset* find_preset(const std::string& name);
std::vector<std::string> preset_names();
std::vector<TensorSpec> preset_shapes(const ArchPreset& p);

} // namespace deltakit
