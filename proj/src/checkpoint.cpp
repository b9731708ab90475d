#include "deltakit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include <json.hpp>

#include "deltakit/f16.hpp"
#include "deltakit/util.hpp"

namespace deltakit {

using nlohmann::json;

const DenseMatrix& ModelCheckpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    check(it != tensors.end(), errc::name_mismatch, "checkpoint: missing tensor '" + name + "'");
    return it->second;
}

void ModelCheckpoint::validate_against_config() const {
    if (!config) return;
    for (const auto& spec : tensor_shapes(*config)) {
        auto it = tensors.find(spec.name);
        check(it != tensors.end(), errc::name_mismatch,
              "checkpoint: config requires tensor '" + spec.name + "'");
        check(it->second.rows() == spec.rows && it->second.cols() == spec.cols,
              errc::shape_mismatch,
              "checkpoint: tensor '" + spec.name + "' has shape " +
                  std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                  ", config implies " + std::to_string(spec.rows) + "x" +
                  std::to_string(spec.cols));
    }
}

std::uint64_t ModelCheckpoint::payload_bytes() const {
    std::uint64_t total = 0;
    for (const auto& [name, t] : tensors) total += 4ull * t.size();
    return total;
}

namespace {

std::size_t dtype_size(const std::string& dtype, const std::string& tensor_name) {
    if (dtype == "F32") return 4;
    if (dtype == "F16") return 2;
    if (dtype == "I8") return 1;
    fail(errc::unsupported_dtype, "tensor '" + tensor_name + "': unsupported dtype " + dtype);
}

} // namespace

RawSafetensors read_safetensors(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    check(bytes.size() >= 8, errc::malformed_header, path.string() + ": header overruns file");
    const std::uint64_t header_len = get_u64_le(bytes.data());
    check(header_len <= bytes.size() - 8, errc::malformed_header,
          path.string() + ": header overruns file");

    const char* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);
    json header = json::parse(header_begin, header_begin + header_len, nullptr, false);
    check(!header.is_discarded() && header.is_object(), errc::json_parse,
          path.string() + ": header is not valid JSON");

    const std::uint8_t* buffer = bytes.data() + 8 + header_len;
    const std::size_t buffer_len = bytes.size() - 8 - static_cast<std::size_t>(header_len);

    RawSafetensors out;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        if (name == "__metadata__") {
            check(it.value().is_object(), errc::json_parse, "__metadata__ must be an object");
            for (auto m = it.value().begin(); m != it.value().end(); ++m)
                out.metadata[m.key()] = m.value().get<std::string>();
            continue;
        }
        const json& entry = it.value();
        check(entry.is_object() && entry.contains("dtype") && entry.contains("shape") &&
                  entry.contains("data_offsets"),
              errc::json_parse, "tensor '" + name + "': malformed header entry");
        RawTensor t;
        t.dtype = entry["dtype"].get<std::string>();
        const std::size_t elem = dtype_size(t.dtype, name);
        std::size_t count = 1;
        for (const auto& d : entry["shape"]) {
            t.shape.push_back(d.get<std::size_t>());
            count *= t.shape.back();
        }
        const auto& off = entry["data_offsets"];
        check(off.is_array() && off.size() == 2, errc::bad_offsets,
              "tensor '" + name + "': data_offsets must have two entries");
        const std::size_t begin = off[0].get<std::size_t>();
        const std::size_t end = off[1].get<std::size_t>();
        check(begin <= end && end <= buffer_len, errc::bad_offsets,
              "tensor '" + name + "': data offsets out of range");
        check(end - begin == count * elem, errc::bad_offsets,
              "tensor '" + name + "': payload length does not match shape");
        t.bytes.assign(buffer + begin, buffer + end);
        ranges.emplace_back(begin, end);
        out.tensors.emplace(name, std::move(t));
    }

    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
        check(ranges[i].first >= ranges[i - 1].second, errc::bad_offsets,
              path.string() + ": overlapping tensor data offsets");
    return out;
}

void write_safetensors(const RawSafetensors& file, const std::filesystem::path& path) {
    json header = json::object();
    std::size_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        json entry;
        entry["dtype"] = t.dtype;
        entry["shape"] = t.shape;
        entry["data_offsets"] = {offset, offset + t.bytes.size()};
        header[name] = entry;
        offset += t.bytes.size();
    }
    if (!file.metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : file.metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    const std::string header_text = header.dump();

    std::vector<std::uint8_t> bytes;
    bytes.reserve(8 + header_text.size() + offset);
    put_u64_le(bytes, header_text.size());
    bytes.insert(bytes.end(), header_text.begin(), header_text.end());
    for (const auto& [name, t] : file.tensors)
        bytes.insert(bytes.end(), t.bytes.begin(), t.bytes.end());
    write_file_bytes(path, bytes);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const RawSafetensors raw = read_safetensors(path);
    ModelCheckpoint ckpt;
    bool any_f16 = false;
    for (const auto& [name, t] : raw.tensors) {
        check(t.dtype == "F32" || t.dtype == "F16", errc::unsupported_dtype,
              "tensor '" + name + "': unsupported dtype " + t.dtype);
        std::size_t rows, cols;
        if (t.shape.size() == 1) {
            rows = 1;
            cols = t.shape[0];
        } else if (t.shape.size() == 2) {
            rows = t.shape[0];
            cols = t.shape[1];
        } else {
            fail(errc::shape_mismatch, "tensor '" + name + "': only 1-D/2-D tensors supported");
        }
        const std::size_t count = rows * cols;
        std::vector<float> values(count);
        if (t.dtype == "F32") {
            for (std::size_t i = 0; i < count; ++i)
                values[i] = std::bit_cast<float>(get_u32_le(t.bytes.data() + 4 * i));
        } else {
            any_f16 = true;
            for (std::size_t i = 0; i < count; ++i) {
                const std::uint16_t h = static_cast<std::uint16_t>(
                    t.bytes[2 * i] | (static_cast<std::uint16_t>(t.bytes[2 * i + 1]) << 8));
                values[i] = f16_to_f32(h);
            }
        }
        DenseMatrix m(rows, cols, std::move(values));
        check(m.all_finite(), errc::non_finite, "tensor '" + name + "': non-finite values");
        ckpt.tensors.emplace(name, std::move(m));
    }

    auto meta_origin = raw.metadata.find("origin_dtype");
    if (meta_origin != raw.metadata.end())
        ckpt.origin = meta_origin->second == "F16" ? OriginDtype::F16 : OriginDtype::F32;
    else
        ckpt.origin = any_f16 ? OriginDtype::F16 : OriginDtype::F32;

    auto meta_arch = raw.metadata.find("arch");
    if (meta_arch != raw.metadata.end()) {
        ckpt.config = ToyArchConfig::from_json(meta_arch->second);
        ckpt.validate_against_config();
    }
    return ckpt;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
    RawSafetensors raw;
    for (const auto& [name, m] : ckpt.tensors) {
        RawTensor t;
        t.dtype = "F32";
        t.shape = {m.rows(), m.cols()};
        t.bytes.resize(4 * m.size());
        for (std::size_t i = 0; i < m.size(); ++i) {
            const std::uint32_t u = std::bit_cast<std::uint32_t>(m.values()[i]);
            t.bytes[4 * i] = static_cast<std::uint8_t>(u);
            t.bytes[4 * i + 1] = static_cast<std::uint8_t>(u >> 8);
            t.bytes[4 * i + 2] = static_cast<std::uint8_t>(u >> 16);
            t.bytes[4 * i + 3] = static_cast<std::uint8_t>(u >> 24);
        }
        raw.tensors.emplace(name, std::move(t));
    }
    raw.metadata["origin_dtype"] = ckpt.origin == OriginDtype::F16 ? "F16" : "F32";
    if (ckpt.config) raw.metadata["arch"] = ckpt.config->to_json();
    write_safetensors(raw, path);
}

} // namespace deltakit
