#include "deltakit/delta.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <regex>

#include <json.hpp>

#include "deltakit/util.hpp"

namespace deltakit {

using nlohmann::json;

PackedSignMatrix compress_delta(const DenseMatrix& delta) {
    PackedSignMatrix p;
    p.rows = delta.rows();
    p.cols = delta.cols();
    p.bits.assign(PackedSignMatrix::packed_size(p.rows, p.cols), 0);
    double abs_sum = 0.0;
    const auto& v = delta.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] > 0.0f) p.bits[i >> 3] |= static_cast<std::uint8_t>(1u << (i & 7));
        abs_sum += std::fabs(static_cast<double>(v[i]));
    }
    p.scale = v.empty() ? 0.0f : static_cast<float>(abs_sum / static_cast<double>(v.size()));
    return p;
}

PackedSignMatrix compress_tensor(const DenseMatrix& base, const DenseMatrix& fine) {
    check(base.same_shape(fine), errc::shape_mismatch, "compress_tensor: shape mismatch");
    return compress_delta(sub(fine, base));
}

DenseMatrix decompress_tensor(const PackedSignMatrix& p) {
    DenseMatrix out(p.rows, p.cols);
    auto& v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = ((p.bits[i >> 3] >> (i & 7)) & 1u) ? p.scale : -p.scale;
    return out;
}

DenseMatrix DeltaStack::reconstruct() const {
    check(!planes.empty(), errc::bad_argument, "DeltaStack: no planes");
    DenseMatrix out = decompress_tensor(planes.front());
    for (std::size_t i = 1; i < planes.size(); ++i) add_inplace(out, decompress_tensor(planes[i]));
    return out;
}

std::uint64_t DeltaStack::payload_bytes() const {
    std::uint64_t total = 0;
    for (const auto& p : planes) total += p.payload_bytes();
    return total;
}

DeltaStack compress_stack(const DenseMatrix& base, const DenseMatrix& fine, std::size_t planes) {
    check(planes >= 1, errc::bad_argument, "compress_stack: plane count must be >= 1");
    check(base.same_shape(fine), errc::shape_mismatch, "compress_stack: shape mismatch");
    DeltaStack stack;
    DenseMatrix residual = sub(fine, base);
    for (std::size_t i = 0; i < planes; ++i) {
        PackedSignMatrix p = compress_delta(residual);
        const DenseMatrix recon = decompress_tensor(p);
        for (std::size_t j = 0; j < residual.size(); ++j)
            residual.values()[j] -= recon.values()[j];
        stack.planes.push_back(std::move(p));
    }
    return stack;
}

std::vector<float> packed_matvec(const PackedSignMatrix& p, std::span<const float> x) {
    check(x.size() == p.cols, errc::length_mismatch, "packed_matvec: length mismatch");
    std::vector<float> y(p.rows, 0.0f);
    packed_signed_accumulate(p, x, y);
    for (float& v : y) v *= p.scale;
    return y;
}

void packed_signed_accumulate(const PackedSignMatrix& p, std::span<const float> x,
                              std::span<float> out) {
    check(x.size() == p.cols && out.size() == p.rows, errc::length_mismatch,
          "packed_signed_accumulate: length mismatch");
    double total = 0.0;
    for (float v : x) total += v;
    for (std::size_t r = 0; r < p.rows; ++r) {
        // row result = 2 * sum of bit-set columns - sum of all columns
        double set_sum = 0.0;
        std::size_t idx = r * p.cols;
        std::size_t c = 0;
        while (c < p.cols) {
            std::uint8_t byte = static_cast<std::uint8_t>(p.bits[idx >> 3] >> (idx & 7));
            const std::size_t take = std::min<std::size_t>(8 - (idx & 7), p.cols - c);
            for (std::size_t b = 0; b < take; ++b) {
                if (byte & 1u) set_sum += x[c + b];
                byte >>= 1;
            }
            c += take;
            idx += take;
        }
        out[r] += static_cast<float>(2.0 * set_sum - total);
    }
}

void packed_signed_accumulate_t(const PackedSignMatrix& p, std::span<const float> y,
                                std::span<float> out) {
    check(y.size() == p.rows && out.size() == p.cols, errc::length_mismatch,
          "packed_signed_accumulate_t: length mismatch");
    // out_j = sum_i s_ij y_i = 2 * sum_{bit=1} y_i - sum_i y_i, per column.
    std::vector<double> acc(p.cols, 0.0);
    double total = 0.0;
    for (float v : y) total += v;
    for (std::size_t r = 0; r < p.rows; ++r) {
        const double yr = y[r];
        if (yr == 0.0) continue;
        std::size_t idx = r * p.cols;
        std::size_t c = 0;
        while (c < p.cols) {
            std::uint8_t byte = static_cast<std::uint8_t>(p.bits[idx >> 3] >> (idx & 7));
            const std::size_t take = std::min<std::size_t>(8 - (idx & 7), p.cols - c);
            for (std::size_t b = 0; b < take; ++b) {
                if (byte & 1u) acc[c + b] += yr;
                byte >>= 1;
            }
            c += take;
            idx += take;
        }
    }
    for (std::size_t j = 0; j < p.cols; ++j)
        out[j] += static_cast<float>(2.0 * acc[j] - total);
}

std::uint64_t DeltaEntry::payload_bytes() const {
    return kind == Kind::Packed ? stack.payload_bytes() : 4ull * raw.size();
}

std::vector<std::string> DeltaFile::quantized_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries)
        if (e.kind == DeltaEntry::Kind::Packed) out.push_back(name);
    return out;
}

std::uint64_t DeltaFile::payload_bytes() const {
    std::uint64_t total = 0;
    for (const auto& [name, e] : entries) total += e.payload_bytes();
    return total;
}

QuantizePolicy default_quantize_policy() {
    return [](const std::string& name) {
        if (name.rfind("layers.", 0) != 0) return false;
        static const char* roles[] = {".attn_q", ".attn_k", ".attn_v", ".attn_o",
                                      ".mlp_gate", ".mlp_up", ".mlp_down"};
        for (const char* r : roles) {
            const std::size_t n = std::string(r).size();
            if (name.size() > n && name.compare(name.size() - n, n, r) == 0) return true;
        }
        return false;
    };
}

QuantizePolicy policy_from_spec(const std::string& spec) {
    if (spec.empty() || spec == "linear") return default_quantize_policy();
    if (spec == "none") return [](const std::string&) { return false; };
    try {
        std::regex re(spec);
        return [re](const std::string& name) { return std::regex_search(name, re); };
    } catch (const std::regex_error& e) {
        fail(errc::bad_argument, "policy: invalid regex '" + spec + "': " + e.what());
    }
}

DeltaFile build_delta_file(const ModelCheckpoint& base, const ModelCheckpoint& fine,
                           std::size_t planes, const QuantizePolicy& policy) {
    check(planes >= 1, errc::bad_argument, "build_delta_file: plane count must be >= 1");
    for (const auto& [name, t] : fine.tensors)
        check(base.tensors.count(name) != 0, errc::name_mismatch,
              "build_delta_file: tensor '" + name + "' missing from base");
    DeltaFile out;
    for (const auto& [name, bt] : base.tensors) {
        auto it = fine.tensors.find(name);
        check(it != fine.tensors.end(), errc::name_mismatch,
              "build_delta_file: tensor '" + name + "' missing from fine");
        check(bt.same_shape(it->second), errc::shape_mismatch,
              "build_delta_file: tensor '" + name + "' shape mismatch");
        DeltaEntry e;
        if (policy(name)) {
            e.kind = DeltaEntry::Kind::Packed;
            e.stack = compress_stack(bt, it->second, planes);
        } else {
            e.kind = DeltaEntry::Kind::Raw;
            e.raw = sub(it->second, bt);
        }
        out.entries.emplace(name, std::move(e));
    }
    return out;
}

ModelCheckpoint apply_delta(const ModelCheckpoint& base, const DeltaFile& delta) {
    ModelCheckpoint out;
    out.config = base.config;
    out.origin = base.origin;
    for (const auto& [name, e] : delta.entries)
        check(base.tensors.count(name) != 0, errc::name_mismatch,
              "apply_delta: tensor '" + name + "' missing from base");
    for (const auto& [name, bt] : base.tensors) {
        auto it = delta.entries.find(name);
        check(it != delta.entries.end(), errc::name_mismatch,
              "apply_delta: tensor '" + name + "' missing from delta");
        check(it->second.rows() == bt.rows() && it->second.cols() == bt.cols(),
              errc::shape_mismatch, "apply_delta: tensor '" + name + "' shape mismatch");
        out.tensors.emplace(name, add(bt, it->second.reconstruct()));
    }
    return out;
}

namespace {
constexpr char kMagic[4] = {'B', 'D', 'L', 'T'};
constexpr std::uint32_t kVersion = 1;
} // namespace

void write_delta_file(const DeltaFile& delta, const std::filesystem::path& path) {
    json header = json::array();
    std::vector<std::uint8_t> payload;
    for (const auto& [name, e] : delta.entries) {
        json entry;
        entry["name"] = name;
        entry["rows"] = e.rows();
        entry["cols"] = e.cols();
        entry["payload_offset"] = payload.size();
        if (e.kind == DeltaEntry::Kind::Packed) {
            entry["kind"] = "packed";
            entry["planes"] = e.stack.planes.size();
            json scales = json::array();
            std::size_t len = 0;
            for (const auto& p : e.stack.planes) {
                scales.push_back(static_cast<double>(p.scale)); // exact f32 -> decimal round-trip
                payload.insert(payload.end(), p.bits.begin(), p.bits.end());
                len += p.bits.size();
            }
            entry["scales"] = scales;
            entry["payload_len"] = len;
        } else {
            entry["kind"] = "raw";
            entry["planes"] = 0;
            entry["scales"] = json::array();
            entry["payload_len"] = 4 * e.raw.size();
            for (float v : e.raw.values()) put_u32_le(payload, std::bit_cast<std::uint32_t>(v));
        }
        header.push_back(entry);
    }
    const std::string header_text = header.dump();

    std::vector<std::uint8_t> bytes;
    bytes.reserve(12 + header_text.size() + payload.size());
    bytes.insert(bytes.end(), kMagic, kMagic + 4);
    put_u32_le(bytes, kVersion);
    put_u32_le(bytes, static_cast<std::uint32_t>(header_text.size()));
    bytes.insert(bytes.end(), header_text.begin(), header_text.end());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
    write_file_bytes(path, bytes);
}

DeltaFile read_delta_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    check(bytes.size() >= 12, errc::malformed_header, path.string() + ": truncated .bdelta");
    check(std::memcmp(bytes.data(), kMagic, 4) == 0, errc::malformed_header,
          path.string() + ": bad magic");
    check(get_u32_le(bytes.data() + 4) == kVersion, errc::malformed_header,
          path.string() + ": unsupported version");
    const std::uint32_t header_len = get_u32_le(bytes.data() + 8);
    check(header_len <= bytes.size() - 12, errc::malformed_header,
          path.string() + ": header overruns file");
    const char* hbegin = reinterpret_cast<const char*>(bytes.data() + 12);
    json header = json::parse(hbegin, hbegin + header_len, nullptr, false);
    check(!header.is_discarded() && header.is_array(), errc::json_parse,
          path.string() + ": header is not a JSON array");

    const std::uint8_t* payload = bytes.data() + 12 + header_len;
    const std::size_t payload_len = bytes.size() - 12 - header_len;

    DeltaFile out;
    for (const auto& entry : header) {
        const std::string name = entry.at("name").get<std::string>();
        check(out.entries.count(name) == 0, errc::duplicate_id,
              path.string() + ": duplicate tensor '" + name + "'");
        const std::size_t rows = entry.at("rows").get<std::size_t>();
        const std::size_t cols = entry.at("cols").get<std::size_t>();
        const std::size_t offset = entry.at("payload_offset").get<std::size_t>();
        const std::size_t len = entry.at("payload_len").get<std::size_t>();
        check(offset <= payload_len && len <= payload_len - offset, errc::bad_offsets,
              "tensor '" + name + "': payload out of range");
        const std::string kind = entry.at("kind").get<std::string>();
        DeltaEntry e;
        if (kind == "packed") {
            e.kind = DeltaEntry::Kind::Packed;
            const std::size_t planes = entry.at("planes").get<std::size_t>();
            const auto& scales = entry.at("scales");
            check(scales.is_array() && scales.size() == planes, errc::json_parse,
                  "tensor '" + name + "': scales/planes mismatch");
            const std::size_t plane_bytes = PackedSignMatrix::packed_size(rows, cols);
            check(len == planes * plane_bytes, errc::bad_offsets,
                  "tensor '" + name + "': payload length does not match planes");
            for (std::size_t k = 0; k < planes; ++k) {
                PackedSignMatrix p;
                p.rows = rows;
                p.cols = cols;
                p.scale = static_cast<float>(scales[k].get<double>());
                check(p.scale >= 0.0f, errc::bad_argument,
                      "tensor '" + name + "': negative scale");
                const std::uint8_t* src = payload + offset + k * plane_bytes;
                p.bits.assign(src, src + plane_bytes);
                const std::size_t tail = rows * cols % 8;
                if (tail != 0 && plane_bytes > 0)
                    check((p.bits.back() >> tail) == 0, errc::bad_argument,
                          "tensor '" + name + "': nonzero trailing bits");
                e.stack.planes.push_back(std::move(p));
            }
        } else if (kind == "raw") {
            e.kind = DeltaEntry::Kind::Raw;
            check(len == 4 * rows * cols, errc::bad_offsets,
                  "tensor '" + name + "': payload length does not match shape");
            std::vector<float> values(rows * cols);
            for (std::size_t i = 0; i < values.size(); ++i)
                values[i] = std::bit_cast<float>(get_u32_le(payload + offset + 4 * i));
            e.raw = DenseMatrix(rows, cols, std::move(values));
        } else {
            fail(errc::json_parse, "tensor '" + name + "': unknown kind '" + kind + "'");
        }
        out.entries.emplace(name, std::move(e));
    }
    return out;
}

CompressionSummary compression_report(std::span<const TensorSpec> shapes,
                                      const QuantizePolicy& policy, std::size_t planes,
                                      std::size_t bytes_per_dense_param) {
    CompressionSummary s;
    double delta_bytes = 0.0;
    for (const auto& spec : shapes) {
        const std::uint64_t params = spec.count();
        s.base_bytes += params * bytes_per_dense_param;
        if (policy(spec.name))
            delta_bytes += static_cast<double>(params) * planes / 8.0 + 4.0 * planes;
        else
            delta_bytes += static_cast<double>(params) * bytes_per_dense_param;
    }
    s.delta_bytes = static_cast<std::uint64_t>(std::ceil(delta_bytes));
    s.factor = delta_bytes > 0.0 ? static_cast<double>(s.base_bytes) / delta_bytes : 0.0;
    return s;
}

} // namespace deltakit
