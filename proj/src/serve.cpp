#include "deltakit/serve.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include <json.hpp>

#include "deltakit/nn_ops.hpp"

namespace deltakit {

using nlohmann::json;

namespace {

// Adds the delta's contribution to y for one linear application y += D*x.
void apply_delta_correction(const DeltaEntry& e, std::span<const float> x, std::span<float> y) {
    if (e.kind == DeltaEntry::Kind::Packed) {
        std::vector<float> tmp(e.rows(), 0.0f);
        for (const auto& plane : e.stack.planes) {
            std::fill(tmp.begin(), tmp.end(), 0.0f);
            packed_signed_accumulate(plane, x, tmp);
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += plane.scale * tmp[i];
        }
    } else {
        const DenseMatrix& d = e.raw;
        for (std::size_t r = 0; r < d.rows(); ++r) {
            const float* row = d.row(r);
            float acc = 0.0f;
            for (std::size_t c = 0; c < d.cols(); ++c) acc += row[c] * x[c];
            y[r] += acc;
        }
    }
}

// Adds row `r` of the reconstructed delta to out (embedding rows, norm rows).
void add_delta_row(const DeltaEntry& e, std::size_t r, std::span<float> out) {
    if (e.kind == DeltaEntry::Kind::Packed) {
        for (const auto& plane : e.stack.planes)
            for (std::size_t c = 0; c < plane.cols; ++c)
                out[c] += plane.bit_at(r, c) ? plane.scale : -plane.scale;
    } else {
        const float* row = e.raw.row(r);
        for (std::size_t c = 0; c < e.raw.cols(); ++c) out[c] += row[c];
    }
}

} // namespace

std::string MemoryModel::to_json() const {
    json j;
    j["backbone_bytes"] = backbone_bytes;
    j["backbone_linear_bytes"] = backbone_linear_bytes;
    j["per_delta_bytes"] = per_delta_bytes;
    j["naive_per_model_bytes"] = naive_per_model_bytes;
    j["activation_bytes"] = activation_bytes;
    j["batch"] = batch;
    j["seq"] = seq;
    j["shared_total_bytes"] = shared_total();
    j["naive_total_bytes"] = naive_total();
    j["crossover_batch"] = crossover_batch;
    return j.dump(2);
}

MemoryModel MemoryModel::from_shapes(std::span<const TensorSpec> shapes,
                                     const QuantizePolicy& policy, std::size_t planes,
                                     std::size_t bytes_per_dense_param, std::size_t batch,
                                     std::size_t seq, std::size_t n_layers, std::size_t dim) {
    MemoryModel mm;
    mm.batch = batch;
    mm.seq = seq;
    for (const auto& spec : shapes) {
        const std::uint64_t params = spec.count();
        mm.backbone_bytes += params * bytes_per_dense_param;
        mm.naive_per_model_bytes += params * bytes_per_dense_param;
        if (policy(spec.name)) {
            mm.backbone_linear_bytes += params * bytes_per_dense_param;
            mm.per_delta_bytes +=
                PackedSignMatrix::packed_size(spec.rows, spec.cols) * planes + 4ull * planes;
        } else {
            mm.per_delta_bytes += params * 4ull; // raw deltas resident in F32
        }
    }
    mm.activation_bytes = 4ull * batch * 2 * n_layers * seq * dim;
    if (mm.per_delta_bytes > 0)
        mm.crossover_batch = static_cast<std::size_t>(
            (mm.backbone_linear_bytes + mm.per_delta_bytes - 1) / mm.per_delta_bytes);
    return mm;
}

ServingPool::ServingPool(ModelCheckpoint backbone) : backbone_(std::move(backbone)) {
    check(backbone_.config.has_value(), errc::bad_argument, "backbone has no arch config");
    backbone_.validate_against_config();
    cfg_ = *backbone_.config;
}

ServingPool::ServingPool(QuantizedCheckpoint backbone) : qbackbone_(std::move(backbone)) {
    check(qbackbone_->config.has_value(), errc::bad_argument, "backbone has no arch config");
    cfg_ = *qbackbone_->config;
    for (const auto& spec : tensor_shapes(cfg_)) {
        const bool is_linear = default_quantize_policy()(spec.name) || spec.name == "lm_head";
        if (!is_linear)
            check(qbackbone_->dense_tensors.count(spec.name) != 0, errc::unsupported_dtype,
                  "int8 backbone: tensor '" + spec.name + "' must be dense");
    }
}

const DenseMatrix& ServingPool::backbone_dense(const std::string& name) const {
    if (qbackbone_) {
        auto it = qbackbone_->dense_tensors.find(name);
        check(it != qbackbone_->dense_tensors.end(), errc::name_mismatch,
              "backbone: missing dense tensor '" + name + "'");
        return it->second;
    }
    return backbone_.tensor(name);
}

DenseMatrix ServingPool::backbone_linear_nt(const DenseMatrix& x, const std::string& name) const {
    if (qbackbone_) {
        auto it = qbackbone_->int8_tensors.find(name);
        if (it != qbackbone_->int8_tensors.end()) return int8_matmul_nt(x, it->second);
        return matmul_nt(x, backbone_dense(name));
    }
    return matmul_nt(x, backbone_.tensor(name));
}

void ServingPool::register_delta(const std::string& id, const std::filesystem::path& path,
                                 bool resident) {
    check(registry_.count(id) == 0, errc::duplicate_id, "delta id already registered: " + id);
    DeltaFile file = read_delta_file(path); // validate even when cold

    // Every backbone tensor must be covered with matching shape.
    for (const auto& spec : tensor_shapes(cfg_)) {
        auto it = file.entries.find(spec.name);
        check(it != file.entries.end(), errc::name_mismatch,
              "delta '" + id + "': missing tensor '" + spec.name + "'");
        check(it->second.rows() == spec.rows && it->second.cols() == spec.cols,
              errc::shape_mismatch,
              "delta '" + id + "': tensor '" + spec.name + "' has shape " +
                  std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                  ", backbone expects " + std::to_string(spec.rows) + "x" +
                  std::to_string(spec.cols));
    }

    DeltaSlot slot;
    slot.path = path;
    slot.resident = resident;
    if (resident) slot.file = std::move(file);
    registry_.emplace(id, std::move(slot));
}

const DeltaFile& ServingPool::delta_for(const std::string& id) {
    auto it = registry_.find(id);
    check(it != registry_.end(), errc::unknown_id, "unknown delta id: " + id);
    if (!it->second.file) {
        const auto t0 = std::chrono::steady_clock::now();
        it->second.file = read_delta_file(it->second.path);
        const auto t1 = std::chrono::steady_clock::now();
        it->second.resident = true; // hot-swapped in, counted from now on
        stats_.cold_loads += 1;
        stats_.last_cold_load_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    return *it->second.file;
}

std::size_t ServingPool::open_request(const std::string& delta_id) {
    check(registry_.count(delta_id) != 0, errc::unknown_id, "unknown delta id: " + delta_id);
    Request r;
    r.delta_id = delta_id;
    r.cache.k.resize(cfg_.n_layers);
    r.cache.v.resize(cfg_.n_layers);
    r.open = true;
    requests_.push_back(std::move(r));
    return requests_.size() - 1;
}

void ServingPool::close_request(std::size_t request_id) {
    check(request_id < requests_.size() && requests_[request_id].open, errc::unknown_id,
          "close_request: unknown request");
    requests_[request_id].open = false;
    requests_[request_id].cache = KvCache{};
}

void ServingPool::validate_batch(const DecodeBatch& batch) {
    for (const auto& req : batch.requests) {
        check(req.request_id < requests_.size() && requests_[req.request_id].open,
              errc::unknown_id, "decode: unknown request id");
        const Request& r = requests_[req.request_id];
        check(req.position == r.cache.pos, errc::bad_argument,
              "decode: request position does not match cache position");
        check(r.cache.pos < cfg_.max_seq, errc::bad_argument, "decode: context exceeds max_seq");
        check(req.token >= 0 && static_cast<std::size_t>(req.token) < cfg_.vocab,
              errc::bad_token, "decode: token id out of range");
    }
}

std::vector<std::vector<float>> ServingPool::decode_step(const DecodeBatch& batch,
                                                         ServeMode mode) {
    validate_batch(batch);
    return mode == ServeMode::Shared ? decode_shared(batch) : decode_naive(batch);
}

std::vector<std::vector<float>> ServingPool::decode_shared(const DecodeBatch& batch) {
    const std::size_t B = batch.requests.size();
    const std::size_t dim = cfg_.dim;
    const std::size_t hd = cfg_.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    stats_.backbone_passes += 1;

    std::vector<const DeltaFile*> deltas(B);
    std::vector<KvCache*> caches(B);
    std::vector<std::size_t> pos(B);
    for (std::size_t r = 0; r < B; ++r) {
        deltas[r] = &delta_for(requests_[batch.requests[r].request_id].delta_id);
        caches[r] = &requests_[batch.requests[r].request_id].cache;
        pos[r] = batch.requests[r].position;
    }
    auto entry = [&](std::size_t r, const std::string& name) -> const DeltaEntry& {
        return deltas[r]->entries.at(name);
    };
    // per-tenant effective norm weights: backbone row plus delta row
    auto effective_norm = [&](std::size_t r, const std::string& name, std::vector<float>& out) {
        const DenseMatrix& base = backbone_dense(name);
        out.assign(base.row(0), base.row(0) + base.cols());
        add_delta_row(entry(r, name), 0, out);
    };

    DenseMatrix x(B, dim);
    for (std::size_t r = 0; r < B; ++r) {
        const std::size_t tok = static_cast<std::size_t>(batch.requests[r].token);
        const DenseMatrix& emb = backbone_dense("embed");
        std::copy(emb.row(tok), emb.row(tok) + dim, x.row(r));
        add_delta_row(entry(r, "embed"), tok, {x.row(r), dim});
    }

    std::vector<float> norm_w(dim);
    DenseMatrix normed(B, dim);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        for (std::size_t r = 0; r < B; ++r) {
            effective_norm(r, p + "norm1", norm_w);
            rmsnorm_row(x.row_span(r), norm_w, {normed.row(r), dim});
        }
        // one stacked backbone GEMM per projection, per-request delta fixups
        DenseMatrix q = backbone_linear_nt(normed, p + "attn_q");
        DenseMatrix k = backbone_linear_nt(normed, p + "attn_k");
        DenseMatrix v = backbone_linear_nt(normed, p + "attn_v");
        for (std::size_t r = 0; r < B; ++r) {
            apply_delta_correction(entry(r, p + "attn_q"), normed.row_span(r), {q.row(r), dim});
            apply_delta_correction(entry(r, p + "attn_k"), normed.row_span(r), {k.row(r), dim});
            apply_delta_correction(entry(r, p + "attn_v"), normed.row_span(r), {v.row(r), dim});
        }
        DenseMatrix ctx(B, dim);
        for (std::size_t r = 0; r < B; ++r) {
            for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
                rope_row({q.row(r) + h * hd, hd}, pos[r], cfg_.rope_theta);
                rope_row({k.row(r) + h * hd, hd}, pos[r], cfg_.rope_theta);
            }
            auto& ck = caches[r]->k[l];
            auto& cv = caches[r]->v[l];
            ck.insert(ck.end(), k.row(r), k.row(r) + dim);
            cv.insert(cv.end(), v.row(r), v.row(r) + dim);
            const std::size_t n_ctx = pos[r] + 1;
            std::vector<float> scores(n_ctx);
            for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
                const float* qh = q.row(r) + h * hd;
                for (std::size_t j = 0; j < n_ctx; ++j) {
                    const float* kj = ck.data() + j * dim + h * hd;
                    float acc = 0.0f;
                    for (std::size_t d = 0; d < hd; ++d) acc += qh[d] * kj[d];
                    scores[j] = acc * inv_sqrt_hd;
                }
                softmax_row(scores, n_ctx);
                float* ch = ctx.row(r) + h * hd;
                for (std::size_t j = 0; j < n_ctx; ++j) {
                    const float* vj = cv.data() + j * dim + h * hd;
                    for (std::size_t d = 0; d < hd; ++d) ch[d] += scores[j] * vj[d];
                }
            }
        }
        DenseMatrix o = backbone_linear_nt(ctx, p + "attn_o");
        for (std::size_t r = 0; r < B; ++r) {
            apply_delta_correction(entry(r, p + "attn_o"), ctx.row_span(r), {o.row(r), dim});
            float* xr = x.row(r);
            for (std::size_t i = 0; i < dim; ++i) xr[i] += o(r, i);
        }

        for (std::size_t r = 0; r < B; ++r) {
            effective_norm(r, p + "norm2", norm_w);
            rmsnorm_row(x.row_span(r), norm_w, {normed.row(r), dim});
        }
        DenseMatrix g = backbone_linear_nt(normed, p + "mlp_gate");
        DenseMatrix u = backbone_linear_nt(normed, p + "mlp_up");
        for (std::size_t r = 0; r < B; ++r) {
            apply_delta_correction(entry(r, p + "mlp_gate"), normed.row_span(r),
                                   {g.row(r), cfg_.intermediate});
            apply_delta_correction(entry(r, p + "mlp_up"), normed.row_span(r),
                                   {u.row(r), cfg_.intermediate});
        }
        for (std::size_t i = 0; i < g.size(); ++i)
            g.values()[i] = silu(g.values()[i]) * u.values()[i];
        DenseMatrix down = backbone_linear_nt(g, p + "mlp_down");
        for (std::size_t r = 0; r < B; ++r) {
            apply_delta_correction(entry(r, p + "mlp_down"), g.row_span(r), {down.row(r), dim});
            float* xr = x.row(r);
            for (std::size_t i = 0; i < dim; ++i) xr[i] += down(r, i);
        }
    }

    for (std::size_t r = 0; r < B; ++r) {
        effective_norm(r, "final_norm", norm_w);
        rmsnorm_row(x.row_span(r), norm_w, {normed.row(r), dim});
    }
    DenseMatrix logits = backbone_linear_nt(normed, "lm_head");
    std::vector<std::vector<float>> out(B);
    for (std::size_t r = 0; r < B; ++r) {
        apply_delta_correction(entry(r, "lm_head"), normed.row_span(r),
                               {logits.row(r), cfg_.vocab});
        out[r].assign(logits.row(r), logits.row(r) + cfg_.vocab);
        caches[r]->pos += 1;
    }
    return out;
}

std::vector<std::vector<float>> ServingPool::decode_naive(const DecodeBatch& batch) {
    const std::size_t B = batch.requests.size();
    stats_.backbone_passes += B;
    std::vector<std::vector<float>> out(B);
    const ModelCheckpoint dense_backbone =
        qbackbone_ ? dequantize_checkpoint(*qbackbone_) : ModelCheckpoint{};
    const ModelCheckpoint& bb = qbackbone_ ? dense_backbone : backbone_;
    for (std::size_t r = 0; r < B; ++r) {
        Request& req = requests_[batch.requests[r].request_id];
        // one full merged model per tenant, evicted after the step
        const ModelCheckpoint merged = apply_delta(bb, delta_for(req.delta_id));
        const ViewModel model = ViewModel::from_checkpoint(merged);
        out[r] = model.decode(req.cache, batch.requests[r].token);
    }
    return out;
}

MemoryModel ServingPool::memory_report(std::size_t batch, std::size_t seq) const {
    MemoryModel mm;
    mm.batch = batch;
    mm.seq = seq;
    if (qbackbone_) {
        mm.backbone_bytes = qbackbone_->payload_bytes();
        for (const auto& [name, t] : qbackbone_->int8_tensors)
            mm.backbone_linear_bytes += t.payload_bytes();
    } else {
        mm.backbone_bytes = backbone_.payload_bytes();
        const auto policy = default_quantize_policy();
        for (const auto& [name, t] : backbone_.tensors)
            if (policy(name)) mm.backbone_linear_bytes += 4ull * t.size();
    }
    for (const auto& spec : tensor_shapes(cfg_))
        mm.naive_per_model_bytes += 4ull * spec.count();

    std::uint64_t delta_total = 0;
    std::size_t resident_count = 0;
    for (const auto& [id, slot] : registry_) {
        if (slot.resident && slot.file) {
            delta_total += slot.file->payload_bytes();
            resident_count += 1;
        }
    }
    mm.per_delta_bytes = resident_count > 0 ? delta_total / resident_count : 0;
    mm.activation_bytes = 4ull * batch * 2 * cfg_.n_layers * seq * cfg_.dim;
    if (mm.per_delta_bytes > 0)
        mm.crossover_batch = static_cast<std::size_t>(
            (mm.backbone_linear_bytes + mm.per_delta_bytes - 1) / mm.per_delta_bytes);
    return mm;
}

std::uint64_t ServingPool::resident_bytes() const {
    std::uint64_t total =
        qbackbone_ ? qbackbone_->payload_bytes() : backbone_.payload_bytes();
    for (const auto& [id, slot] : registry_)
        if (slot.resident && slot.file) total += slot.file->payload_bytes();
    for (const auto& r : requests_)
        if (r.open) total += r.cache.bytes();
    return total;
}

std::vector<std::string> ServingPool::delta_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, slot] : registry_) out.push_back(id);
    return out;
}

std::vector<BenchRow> latency_bench(ServingPool& pool, std::span<const std::size_t> batches,
                                    std::size_t seq, std::size_t trials, std::uint64_t seed) {
    check(trials >= 3, errc::bad_argument, "latency_bench: trials must be >= 3");
    const std::vector<std::string> ids = pool.delta_ids();
    check(!ids.empty(), errc::bad_argument, "latency_bench: no deltas registered");
    const std::size_t vocab = pool.config().vocab;
    constexpr std::size_t kWarmup = 2;
    check(seq + trials + kWarmup <= pool.config().max_seq, errc::bad_argument,
          "latency_bench: seq + trials + warmup exceeds max_seq");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(vocab) - 1);
    std::vector<BenchRow> rows;
    for (std::size_t B : batches) {
        for (ServeMode mode : {ServeMode::Shared, ServeMode::Naive}) {
            std::vector<std::size_t> req_ids;
            for (std::size_t r = 0; r < B; ++r)
                req_ids.push_back(pool.open_request(ids[r % ids.size()]));
            std::vector<std::size_t> positions(B, 0);
            auto step = [&]() {
                DecodeBatch batch;
                for (std::size_t r = 0; r < B; ++r)
                    batch.requests.push_back({req_ids[r], tok(rng), positions[r]});
                pool.decode_step(batch, mode);
                for (auto& p : positions) ++p;
            };
            // build context, then warm up
            for (std::size_t i = 0; i + 1 < seq; ++i) step();
            for (std::size_t i = 0; i < kWarmup; ++i) step();

            std::vector<double> ms;
            for (std::size_t t = 0; t < trials; ++t) {
                const auto t0 = std::chrono::steady_clock::now();
                step();
                const auto t1 = std::chrono::steady_clock::now();
                ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            std::sort(ms.begin(), ms.end());
            double mean = 0.0;
            for (double v : ms) mean += v;
            mean /= static_cast<double>(ms.size());

            const MemoryModel mm = pool.memory_report(B, seq);
            BenchRow row;
            row.batch = B;
            row.mode = mode == ServeMode::Shared ? "shared" : "naive";
            row.mean_ms = mean;
            row.p50_ms = ms[ms.size() / 2];
            row.bytes_touched = mode == ServeMode::Shared
                                    ? mm.backbone_bytes + B * mm.per_delta_bytes
                                    : B * mm.naive_per_model_bytes;
            row.resident_bytes = pool.resident_bytes();
            rows.push_back(std::move(row));
            for (std::size_t r : req_ids) pool.close_request(r);
        }
    }
    return rows;
}

std::string bench_csv(std::span<const BenchRow> rows) {
    std::string out = "B,mode,mean_ms,p50_ms,bytes_touched,resident_bytes\n";
    char buf[192];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%.4f,%.4f,%llu,%llu\n", r.batch, r.mode.c_str(),
                      r.mean_ms, r.p50_ms, static_cast<unsigned long long>(r.bytes_touched),
                      static_cast<unsigned long long>(r.resident_bytes));
        out += buf;
    }
    return out;
}

} // namespace deltakit
