#include "deltakit/int8.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include <json.hpp>

#include "deltakit/util.hpp"

namespace deltakit {

using nlohmann::json;

Int8Tensor rtn_quantize(const DenseMatrix& w) {
    check(w.all_finite(), errc::non_finite, "rtn_quantize: non-finite entries");
    Int8Tensor q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.values.resize(w.size());
    q.row_scales.resize(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const float* row = w.row(r);
        float amax = 0.0f;
        for (std::size_t c = 0; c < w.cols(); ++c) amax = std::max(amax, std::fabs(row[c]));
        const float s = amax / 127.0f;
        q.row_scales[r] = s;
        std::int8_t* out = q.values.data() + r * w.cols();
        if (s == 0.0f) {
            std::fill(out, out + w.cols(), static_cast<std::int8_t>(0));
            continue;
        }
        const double sd = static_cast<double>(s);
        for (std::size_t c = 0; c < w.cols(); ++c) {
            // double quotient + ties-to-even keeps |w - s*q| <= s/2 exactly
            double v = std::nearbyint(static_cast<double>(row[c]) / sd);
            v = std::clamp(v, -127.0, 127.0);
            out[c] = static_cast<std::int8_t>(v);
        }
    }
    return q;
}

DenseMatrix rtn_dequantize(const Int8Tensor& q) {
    DenseMatrix out(q.rows, q.cols);
    for (std::size_t r = 0; r < q.rows; ++r) {
        const float s = q.row_scales[r];
        const std::int8_t* row = q.values.data() + r * q.cols;
        float* dst = out.row(r);
        for (std::size_t c = 0; c < q.cols; ++c) dst[c] = static_cast<float>(row[c]) * s;
    }
    return out;
}

std::vector<float> int8_matvec(const Int8Tensor& q, std::span<const float> x) {
    check(x.size() == q.cols, errc::length_mismatch, "int8_matvec: length mismatch");
    std::vector<float> y(q.rows);
    for (std::size_t r = 0; r < q.rows; ++r) {
        const std::int8_t* row = q.values.data() + r * q.cols;
        float acc = 0.0f;
        for (std::size_t c = 0; c < q.cols; ++c) acc += static_cast<float>(row[c]) * x[c];
        y[r] = acc * q.row_scales[r];
    }
    return y;
}

DenseMatrix int8_matmul_nt(const DenseMatrix& a, const Int8Tensor& q) {
    check(a.cols() == q.cols, errc::shape_mismatch, "int8_matmul_nt: inner dimensions differ");
    DenseMatrix out(a.rows(), q.rows);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const float* arow = a.row(i);
        float* orow = out.row(i);
        for (std::size_t r = 0; r < q.rows; ++r) {
            const std::int8_t* row = q.values.data() + r * q.cols;
            float acc = 0.0f;
            for (std::size_t c = 0; c < q.cols; ++c) acc += static_cast<float>(row[c]) * arow[c];
            orow[r] = acc * q.row_scales[r];
        }
    }
    return out;
}

std::uint64_t QuantizedCheckpoint::payload_bytes() const {
    std::uint64_t total = 0;
    for (const auto& [name, t] : int8_tensors) total += t.payload_bytes();
    for (const auto& [name, t] : dense_tensors) total += 4ull * t.size();
    return total;
}

QuantizedCheckpoint rtn_quantize_checkpoint(const ModelCheckpoint& base,
                                            const QuantizePolicy& policy) {
    QuantizedCheckpoint out;
    out.config = base.config;
    for (const auto& [name, t] : base.tensors) {
        if (policy(name))
            out.int8_tensors.emplace(name, rtn_quantize(t));
        else
            out.dense_tensors.emplace(name, t);
    }
    return out;
}

DenseMatrix dequantize_tensor(const QuantizedCheckpoint& q, const std::string& name) {
    auto it = q.int8_tensors.find(name);
    if (it != q.int8_tensors.end()) return rtn_dequantize(it->second);
    auto dt = q.dense_tensors.find(name);
    check(dt != q.dense_tensors.end(), errc::name_mismatch,
          "quantized checkpoint: missing tensor '" + name + "'");
    return dt->second;
}

ModelCheckpoint dequantize_checkpoint(const QuantizedCheckpoint& q) {
    ModelCheckpoint out;
    out.config = q.config;
    for (const auto& [name, t] : q.int8_tensors) out.tensors.emplace(name, rtn_dequantize(t));
    for (const auto& [name, t] : q.dense_tensors) out.tensors.emplace(name, t);
    return out;
}

void save_quantized_checkpoint(const QuantizedCheckpoint& q, const std::filesystem::path& path) {
    RawSafetensors raw;
    json scales = json::object();
    for (const auto& [name, t] : q.int8_tensors) {
        RawTensor rt;
        rt.dtype = "I8";
        rt.shape = {t.rows, t.cols};
        rt.bytes.assign(reinterpret_cast<const std::uint8_t*>(t.values.data()),
                        reinterpret_cast<const std::uint8_t*>(t.values.data()) + t.values.size());
        raw.tensors.emplace(name, std::move(rt));
        json arr = json::array();
        for (float s : t.row_scales) arr.push_back(static_cast<double>(s));
        scales[name] = arr;
    }
    for (const auto& [name, t] : q.dense_tensors) {
        RawTensor rt;
        rt.dtype = "F32";
        rt.shape = {t.rows(), t.cols()};
        rt.bytes.resize(4 * t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            const std::uint32_t u = std::bit_cast<std::uint32_t>(t.values()[i]);
            rt.bytes[4 * i] = static_cast<std::uint8_t>(u);
            rt.bytes[4 * i + 1] = static_cast<std::uint8_t>(u >> 8);
            rt.bytes[4 * i + 2] = static_cast<std::uint8_t>(u >> 16);
            rt.bytes[4 * i + 3] = static_cast<std::uint8_t>(u >> 24);
        }
        raw.tensors.emplace(name, std::move(rt));
    }
    if (q.config) raw.metadata["arch"] = q.config->to_json();
    write_safetensors(raw, path);
    write_file_text(path.string() + ".scales.json", scales.dump());
}

QuantizedCheckpoint load_quantized_checkpoint(const std::filesystem::path& path) {
    const RawSafetensors raw = read_safetensors(path);
    const auto scales_bytes = read_file_bytes(path.string() + ".scales.json");
    json scales = json::parse(scales_bytes.begin(), scales_bytes.end(), nullptr, false);
    check(!scales.is_discarded() && scales.is_object(), errc::json_parse,
          path.string() + ".scales.json: invalid JSON");

    QuantizedCheckpoint out;
    for (const auto& [name, t] : raw.tensors) {
        check(t.shape.size() == 2 || t.shape.size() == 1, errc::shape_mismatch,
              "tensor '" + name + "': only 1-D/2-D tensors supported");
        const std::size_t rows = t.shape.size() == 2 ? t.shape[0] : 1;
        const std::size_t cols = t.shape.size() == 2 ? t.shape[1] : t.shape[0];
        if (t.dtype == "I8") {
            Int8Tensor q;
            q.rows = rows;
            q.cols = cols;
            q.values.assign(reinterpret_cast<const std::int8_t*>(t.bytes.data()),
                            reinterpret_cast<const std::int8_t*>(t.bytes.data()) + t.bytes.size());
            check(scales.contains(name), errc::json_parse,
                  "tensor '" + name + "': missing row scales in sidecar");
            for (const auto& s : scales[name]) q.row_scales.push_back(s.get<float>());
            check(q.row_scales.size() == rows, errc::length_mismatch,
                  "tensor '" + name + "': row scale count mismatch");
            out.int8_tensors.emplace(name, std::move(q));
        } else if (t.dtype == "F32") {
            std::vector<float> values(rows * cols);
            for (std::size_t i = 0; i < values.size(); ++i)
                values[i] = std::bit_cast<float>(get_u32_le(t.bytes.data() + 4 * i));
            out.dense_tensors.emplace(name, DenseMatrix(rows, cols, std::move(values)));
        } else {
            fail(errc::unsupported_dtype, "tensor '" + name + "': unsupported dtype " + t.dtype);
        }
    }
    auto meta = raw.metadata.find("arch");
    if (meta != raw.metadata.end()) out.config = ToyArchConfig::from_json(meta->second);
    return out;
}

ViewModel compose_quantized_base(const QuantizedCheckpoint& qbase, const DeltaFile& delta) {
    check(qbase.config.has_value(), errc::bad_argument, "quantized base has no arch config");
    const ToyArchConfig& cfg = *qbase.config;

    auto entry_for = [&](const std::string& name) -> const DeltaEntry* {
        auto it = delta.entries.find(name);
        check(it != delta.entries.end(), errc::name_mismatch,
              "compose: tensor '" + name + "' missing from delta");
        return &it->second;
    };
    auto linear_view = [&](const std::string& name) {
        LinearView v;
        const DeltaEntry* e = entry_for(name);
        auto qt = qbase.int8_tensors.find(name);
        if (qt != qbase.int8_tensors.end()) {
            check(qt->second.rows == e->rows() && qt->second.cols == e->cols(),
                  errc::shape_mismatch, "compose: tensor '" + name + "' shape mismatch");
            v.int8_base = &qt->second;
            if (e->kind == DeltaEntry::Kind::Packed) {
                v.kind = LinearView::Kind::Int8PackedDelta;
                v.planes = e->stack.planes;
                for (const auto& pl : v.planes) v.scales.push_back(pl.scale);
            } else {
                // raw delta over an int8 base: merge densely
                v.kind = LinearView::Kind::Merged;
                v.dense_base = add(rtn_dequantize(qt->second), e->raw);
                v.int8_base = nullptr;
            }
            return v;
        }
        const DenseMatrix base = dequantize_tensor(qbase, name);
        if (e->kind == DeltaEntry::Kind::Packed) {
            v.kind = LinearView::Kind::PackedDelta;
            v.dense_base = base;
            v.planes = e->stack.planes;
            for (const auto& pl : v.planes) v.scales.push_back(pl.scale);
        } else {
            v.kind = LinearView::Kind::Merged;
            v.dense_base = add(base, e->raw);
        }
        return v;
    };
    auto merged_values = [&](const std::string& name) {
        return add(dequantize_tensor(qbase, name), entry_for(name)->reconstruct());
    };

    std::map<std::string, LinearView> views;
    views.emplace("lm_head", linear_view("lm_head"));
    std::vector<std::vector<float>> norms1(cfg.n_layers), norms2(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        for (const char* role : {"attn_q", "attn_k", "attn_v", "attn_o", "mlp_gate", "mlp_up",
                                 "mlp_down"})
            views.emplace(p + role, linear_view(p + role));
        const DenseMatrix n1 = merged_values(p + "norm1");
        const DenseMatrix n2 = merged_values(p + "norm2");
        norms1[i].assign(n1.values().begin(), n1.values().end());
        norms2[i].assign(n2.values().begin(), n2.values().end());
    }
    const DenseMatrix fn = merged_values("final_norm");
    return ViewModel::from_parts(cfg, std::move(views), merged_values("embed"),
                                 std::vector<float>(fn.values().begin(), fn.values().end()),
                                 std::move(norms1), std::move(norms2));
}

} // namespace deltakit
