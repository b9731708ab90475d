#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deltakit/checkpoint.hpp"
#include "deltakit/delta.hpp"
#include "deltakit/lowrank.hpp"
#include "deltakit/matrix.hpp"

namespace deltakit {

struct Int8Tensor; // base-quant module

// One linear layer, either merged (a single weight matrix) or decomposed
// into a frozen base plus a delta. Both representations produce the same
// outputs up to f32 rounding. The plane scales / low-rank factors held here
// are the trainable parameters during distillation.
struct LinearView {
    enum class Kind { Merged, PackedDelta, LowRankDelta, Int8Merged, Int8PackedDelta };
    Kind kind = Kind::Merged;

    DenseMatrix dense_base;               // Merged: full weight; *Delta: base weight
    const Int8Tensor* int8_base = nullptr; // Int8*: quantized base, not owned
    std::vector<PackedSignMatrix> planes; // PackedDelta (embedded scales unused)
    std::vector<float> scales;            // per plane, current values
    DenseMatrix lr_a, lr_b;               // LowRankDelta factors

    std::size_t out_dim() const;
    std::size_t in_dim() const;
    bool trainable() const {
        return kind == Kind::PackedDelta || kind == Kind::LowRankDelta;
    }
};

// Activations recorded by one forward pass, enough to backprop a scalar loss
// into the flagged parameters. Replaying a tape's inputs reproduces its
// logits bit-identically.
struct LinearTape {
    std::vector<DenseMatrix> plane_u; // per plane: unscaled sign products, s x out
    DenseMatrix lowrank_p;            // x * b^T, s x r
};

struct LayerTape {
    DenseMatrix x_in;
    std::vector<double> rms1_inv;
    DenseMatrix normed1;
    DenseMatrix q, k, v; // post-rope
    std::vector<DenseMatrix> probs; // per head, s x s
    DenseMatrix attn_ctx;
    DenseMatrix x_mid;
    std::vector<double> rms2_inv;
    DenseMatrix normed2;
    DenseMatrix gate_pre, up_pre, act;
    LinearTape q_t, k_t, v_t, o_t, gate_t, up_t, down_t;
};

struct ForwardTape {
    std::vector<std::int32_t> tokens;
    DenseMatrix embedded;
    std::vector<LayerTape> layers;
    DenseMatrix final_x; // residual stream entering the final norm
    std::vector<double> rms_final_inv;
    DenseMatrix final_normed;
    DenseMatrix logits;
    LinearTape lm_head_t;
};

// Per-request attention cache for one-token-at-a-time decoding.
struct KvCache {
    std::size_t pos = 0;
    std::vector<std::vector<float>> k; // per layer, pos*dim floats
    std::vector<std::vector<float>> v;
    std::uint64_t bytes() const;
};

struct GradMap {
    // tensor name -> d(loss)/d(scale) per plane
    std::map<std::string, std::vector<double>> scale_grads;
    // tensor name -> (dA, dB)
    std::map<std::string, std::pair<DenseMatrix, DenseMatrix>> lowrank_grads;
};

// Minimal Llama-style transformer over LinearView weights: embedding ->
// n_layers x {RMSNorm, causal multi-head attention with rotary embeddings,
// RMSNorm, gated-SiLU MLP} -> final RMSNorm -> LM head.
class ViewModel {
public:
    struct Layer {
        LinearView q, k, v, o, gate, up, down;
        std::vector<float> norm1, norm2; // merged norm weights
    };

    static ViewModel from_checkpoint(const ModelCheckpoint& ckpt);
    static ViewModel from_delta(const ModelCheckpoint& base, const DeltaFile& delta);
    // Low-rank deltas on the given tensors, exact (fine - base) merges on the
    // rest. Factors become the trainable parameters.
    static ViewModel from_lowrank(const ModelCheckpoint& base, const ModelCheckpoint& fine,
                                  const std::map<std::string, LowRankDelta>& factors);

    const ToyArchConfig& config() const { return cfg_; }

    DenseMatrix forward(std::span<const std::int32_t> tokens, ForwardTape* tape = nullptr) const;

    // One token against a per-request cache; returns the logit row and
    // advances the cache by one position.
    std::vector<float> decode(KvCache& cache, std::int32_t token) const;
    KvCache make_cache() const;

    // Mean squared error over all positions and vocab entries, with gradients
    // for every trainable parameter (plane scales, low-rank factor entries).
    std::pair<double, GradMap> loss_and_grads(std::span<const std::int32_t> tokens,
                                              const DenseMatrix& target_logits) const;

    // Push updated trainable values into the views (ordering matches
    // trainable_scale_names / the low-rank factor map).
    void set_scales(const std::string& name, std::span<const float> scales);
    std::vector<float> get_scales(const std::string& name) const;
    void set_lowrank(const std::string& name, const DenseMatrix& a, const DenseMatrix& b);
    LowRankDelta get_lowrank(const std::string& name) const;
    std::vector<std::string> trainable_scale_names() const;
    std::vector<std::string> trainable_lowrank_names() const;

    const Layer& layer(std::size_t i) const { return layers_[i]; }
    const DenseMatrix& embed() const { return embed_; }

    // internal: also used when a quantized base backs the linear layers
    static ViewModel from_parts(ToyArchConfig cfg,
                                std::map<std::string, LinearView> linear_views,
                                DenseMatrix embed, std::vector<float> final_norm,
                                std::vector<std::vector<float>> norms1,
                                std::vector<std::vector<float>> norms2);

private:
    ToyArchConfig cfg_;
    DenseMatrix embed_; // vocab x dim, always merged
    std::vector<Layer> layers_;
    LinearView lm_head_;
    std::vector<float> final_norm_;

    // Resolves "lm_head" / "layers.{i}.{role}" to the linear view; nullptr
    // for non-linear names. Pointer-map-free so the model stays movable.
    LinearView* find_view(const std::string& name);
    const LinearView* find_view(const std::string& name) const;
};

double mse_loss(const DenseMatrix& logits, const DenseMatrix& target);

} // namespace deltakit
