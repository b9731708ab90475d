#include "deltakit/arch.hpp"

#include <json.hpp>

#include "deltakit/error.hpp"

namespace deltakit {

using nlohmann::json;

void ToyArchConfig::validate() const {
    check(vocab >= 1 && dim >= 1 && n_layers >= 1 && n_heads >= 1 && intermediate >= 1 &&
              max_seq >= 1,
          errc::bad_argument, "config: all counts must be >= 1");
    check(dim % n_heads == 0, errc::bad_argument, "config: dim must be divisible by n_heads");
    check(head_dim() % 2 == 0, errc::bad_argument,
          "config: head dimension must be even for rotary embeddings");
}

std::string ToyArchConfig::to_json() const {
    json j;
    j["vocab"] = vocab;
    j["dim"] = dim;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["intermediate"] = intermediate;
    j["max_seq"] = max_seq;
    j["rope_theta"] = rope_theta;
    return j.dump();
}

ToyArchConfig ToyArchConfig::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    check(!j.is_discarded(), errc::json_parse, "config: invalid JSON");
    ToyArchConfig cfg;
    try {
        cfg.vocab = j.at("vocab").get<std::size_t>();
        cfg.dim = j.at("dim").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.intermediate = j.at("intermediate").get<std::size_t>();
        cfg.max_seq = j.at("max_seq").get<std::size_t>();
        if (j.contains("rope_theta")) cfg.rope_theta = j.at("rope_theta").get<float>();
    } catch (const json::exception& e) {
        fail(errc::json_parse, std::string("config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::vector<TensorSpec> tensor_shapes(const ToyArchConfig& cfg) {
    std::vector<TensorSpec> out;
    out.push_back({"embed", cfg.vocab, cfg.dim});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        out.push_back({p + "attn_q", cfg.dim, cfg.dim});
        out.push_back({p + "attn_k", cfg.dim, cfg.dim});
        out.push_back({p + "attn_v", cfg.dim, cfg.dim});
        out.push_back({p + "attn_o", cfg.dim, cfg.dim});
        out.push_back({p + "mlp_gate", cfg.intermediate, cfg.dim});
        out.push_back({p + "mlp_up", cfg.intermediate, cfg.dim});
        out.push_back({p + "mlp_down", cfg.dim, cfg.intermediate});
        out.push_back({p + "norm1", 1, cfg.dim});
        out.push_back({p + "norm2", 1, cfg.dim});
    }
    out.push_back({"final_norm", 1, cfg.dim});
    out.push_back({"lm_head", cfg.vocab, cfg.dim});
    return out;
}

namespace {
const ArchPreset kPresets[] = {
    {"llama2-7b", 32000, 4096, 4096, 32, 11008},
    {"llama2-13b", 32000, 5120, 5120, 40, 13824},
    {"llama2-70b", 32000, 8192, 1024, 80, 28672},
    {"mistral-7b", 32000, 4096, 1024, 32, 14336},
};
} // namespace

const ArchPreset* find_preset(const std::string& name) {
    for (const auto& p : kPresets)
        if (p.name == name) return &p;
    return nullptr;
}

std::vector<std::string> preset_names() {
    std::vector<std::string> out;
    for (const auto& p : kPresets) out.push_back(p.name);
    return out;
}

std::vector<TensorSpec> preset_shapes(const ArchPreset& p) {
    std::vector<TensorSpec> out;
    out.push_back({"embed", p.vocab, p.dim});
    for (std::size_t i = 0; i < p.n_layers; ++i) {
        const std::string pre = "layers." + std::to_string(i) + ".";
        out.push_back({pre + "attn_q", p.dim, p.dim});
        out.push_back({pre + "attn_k", p.kv_dim, p.dim});
        out.push_back({pre + "attn_v", p.kv_dim, p.dim});
        out.push_back({pre + "attn_o", p.dim, p.dim});
        out.push_back({pre + "mlp_gate", p.intermediate, p.dim});
        out.push_back({pre + "mlp_up", p.intermediate, p.dim});
        out.push_back({pre + "mlp_down", p.dim, p.intermediate});
        out.push_back({pre + "norm1", 1, p.dim});
        out.push_back({pre + "norm2", 1, p.dim});
    }
    out.push_back({"final_norm", 1, p.dim});
    out.push_back({"lm_head", p.vocab, p.dim});
    return out;
}

} // namespace deltakit
