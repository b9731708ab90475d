#include <doctest.h>

#include <filesystem>
#include <random>

#include "deltakit/serve.hpp"
#include "deltakit/synth.hpp"
#include "deltakit/util.hpp"
#include "oracles.hpp"

using namespace deltakit;
namespace fs = std::filesystem;

namespace {

const ToyArchConfig kCfg{.vocab = 48, .dim = 32, .n_layers = 2, .n_heads = 4,
                         .intermediate = 40, .max_seq = 32};

struct Universe {
    fs::path dir;
    ModelCheckpoint backbone;
    std::vector<fs::path> delta_paths;
    std::vector<std::uint64_t> delta_bytes; // payload bytes per file
};

const Universe& universe() {
    static const Universe u = [] {
        Universe out;
        out.dir = fs::temp_directory_path() / "deltakit_serve_tests";
        fs::create_directories(out.dir);
        out.backbone = synth_base(kCfg, 1001, 0.08f);
        for (int i = 0; i < 4; ++i) {
            const ModelCheckpoint fine = synth_fine(out.backbone, PerturbKind::Sigma, 0.03f,
                                                    2000 + i, default_quantize_policy());
            const DeltaFile delta =
                build_delta_file(out.backbone, fine, 1, default_quantize_policy());
            const fs::path p = out.dir / ("tenant" + std::to_string(i) + ".bdelta");
            write_delta_file(delta, p);
            out.delta_paths.push_back(p);
            out.delta_bytes.push_back(delta.payload_bytes());
        }
        return out;
    }();
    return u;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int32_t> d(0, static_cast<std::int32_t>(kCfg.vocab) - 1);
    std::vector<std::int32_t> out(n);
    for (auto& t : out) t = d(rng);
    return out;
}

} // namespace

TEST_CASE("resident registration is counted; duplicate ids rejected") {
    const Universe& u = universe();
    ServingPool pool(u.backbone);
    const std::uint64_t backbone_bytes = pool.resident_bytes();
    CHECK(backbone_bytes == u.backbone.payload_bytes());
    for (int i = 0; i < 4; ++i)
        pool.register_delta("t" + std::to_string(i), u.delta_paths[i], /*resident=*/true);
    std::uint64_t want = backbone_bytes;
    for (auto b : u.delta_bytes) want += b;
    CHECK(pool.resident_bytes() == want);
    CHECK_THROWS_AS(pool.register_delta("t0", u.delta_paths[0], true), Error);
}

TEST_CASE("cold registration stays off the books until first use") {
    const Universe& u = universe();
    ServingPool pool(u.backbone);
    pool.register_delta("cold", u.delta_paths[0], /*resident=*/false);
    CHECK(pool.resident_bytes() == u.backbone.payload_bytes());
    CHECK(pool.stats().cold_loads == 0);

    const std::size_t r = pool.open_request("cold");
    DecodeBatch batch;
    batch.requests.push_back({r, 3, 0});
    pool.decode_step(batch, ServeMode::Shared);
    CHECK(pool.stats().cold_loads == 1);
    CHECK(pool.resident_bytes() >= u.backbone.payload_bytes() + u.delta_bytes[0]);
}

TEST_CASE("registration rejects shape mismatches naming the tensor") {
    const ToyArchConfig other{.vocab = 48, .dim = 16, .n_layers = 2, .n_heads = 4,
                              .intermediate = 40, .max_seq = 32};
    const ModelCheckpoint ob = synth_base(other, 1, 0.08f);
    const DeltaFile delta = build_delta_file(ob, ob, 1, default_quantize_policy());
    const fs::path p = universe().dir / "wrong_arch.bdelta";
    write_delta_file(delta, p);
    ServingPool pool(universe().backbone);
    try {
        pool.register_delta("bad", p, true);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == errc::shape_mismatch);
        // names the first offending tensor ("embed" sorts first here)
        CHECK(std::string(e.what()).find("'embed'") != std::string::npos);
    }
}

TEST_CASE("shared and naive modes agree within 1e-4 for B in {1,2,4}") {
    const Universe& u = universe();
    for (std::size_t B : {1u, 2u, 4u}) {
        ServingPool shared_pool(u.backbone);
        ServingPool naive_pool(u.backbone);
        std::vector<std::size_t> sr, nr;
        for (std::size_t i = 0; i < B; ++i) {
            const std::string id = "t" + std::to_string(i % u.delta_paths.size());
            if (i < u.delta_paths.size()) {
                shared_pool.register_delta(id, u.delta_paths[i], true);
                naive_pool.register_delta(id, u.delta_paths[i], true);
            }
            sr.push_back(shared_pool.open_request(id));
            nr.push_back(naive_pool.open_request(id));
        }
        const std::vector<std::int32_t> stream = random_tokens(6, 42 + B);
        std::vector<std::vector<float>> zs, zn;
        for (std::size_t pos = 0; pos < stream.size(); ++pos) {
            DecodeBatch bs, bn;
            for (std::size_t i = 0; i < B; ++i) {
                bs.requests.push_back({sr[i], stream[pos], pos});
                bn.requests.push_back({nr[i], stream[pos], pos});
            }
            zs = shared_pool.decode_step(bs, ServeMode::Shared);
            zn = naive_pool.decode_step(bn, ServeMode::Naive);
        }
        for (std::size_t i = 0; i < B; ++i)
            CHECK(oracle::rel_l2_error(zs[i], zn[i]) <= 1e-4);
    }
}

TEST_CASE("identical contexts on one delta id give identical outputs") {
    const Universe& u = universe();
    ServingPool pool(u.backbone);
    pool.register_delta("t0", u.delta_paths[0], true);
    const std::size_t a = pool.open_request("t0");
    const std::size_t b = pool.open_request("t0");
    DecodeBatch batch;
    batch.requests.push_back({a, 7, 0});
    batch.requests.push_back({b, 7, 0});
    const auto out = pool.decode_step(batch, ServeMode::Shared);
    CHECK(out[0] == out[1]);
}

TEST_CASE("zero delta decodes exactly like the plain backbone") {
    const Universe& u = universe();
    const DeltaFile zero = build_delta_file(u.backbone, u.backbone, 1, default_quantize_policy());
    const fs::path p = u.dir / "zero.bdelta";
    write_delta_file(zero, p);
    ServingPool pool(u.backbone);
    pool.register_delta("zero", p, true);
    const std::size_t r = pool.open_request("zero");

    const ViewModel plain = ViewModel::from_checkpoint(u.backbone);
    KvCache cache = plain.make_cache();
    const std::vector<std::int32_t> stream = random_tokens(5, 77);
    std::vector<float> want, got;
    for (std::size_t pos = 0; pos < stream.size(); ++pos) {
        DecodeBatch batch;
        batch.requests.push_back({r, stream[pos], pos});
        got = pool.decode_step(batch, ServeMode::Shared)[0];
        want = plain.decode(cache, stream[pos]);
    }
    CHECK(oracle::rel_l2_error(got, want) <= 1e-5);
}

TEST_CASE("permuting the batch permutes outputs bit-identically") {
    const Universe& u = universe();
    auto run = [&](const std::vector<std::size_t>& order) {
        ServingPool pool(u.backbone);
        for (int i = 0; i < 3; ++i)
            pool.register_delta("t" + std::to_string(i), u.delta_paths[i], true);
        std::vector<std::size_t> reqs;
        for (int i = 0; i < 3; ++i) reqs.push_back(pool.open_request("t" + std::to_string(i)));
        // two steps so caches matter
        std::vector<std::vector<float>> out;
        for (std::size_t pos = 0; pos < 2; ++pos) {
            DecodeBatch batch;
            for (std::size_t idx : order)
                batch.requests.push_back({reqs[idx], static_cast<std::int32_t>(5 + idx), pos});
            out = pool.decode_step(batch, ServeMode::Shared);
        }
        return out;
    };
    const auto fwd = run({0, 1, 2});
    const auto rev = run({2, 1, 0});
    for (int i = 0; i < 3; ++i) CHECK(fwd[i] == rev[2 - i]);
}

TEST_CASE("backbone pass counter: 1 per shared step regardless of B, B for naive") {
    const Universe& u = universe();
    ServingPool pool(u.backbone);
    for (int i = 0; i < 4; ++i)
        pool.register_delta("t" + std::to_string(i), u.delta_paths[i], true);
    std::vector<std::size_t> reqs;
    for (int i = 0; i < 4; ++i) reqs.push_back(pool.open_request("t" + std::to_string(i)));

    DecodeBatch batch;
    for (std::size_t i = 0; i < 4; ++i) batch.requests.push_back({reqs[i], 1, 0});
    pool.decode_step(batch, ServeMode::Shared);
    CHECK(pool.stats().backbone_passes == 1);
    for (auto& r : batch.requests) r.position = 1;
    pool.decode_step(batch, ServeMode::Shared);
    CHECK(pool.stats().backbone_passes == 2);
    for (auto& r : batch.requests) r.position = 2;
    pool.decode_step(batch, ServeMode::Naive);
    CHECK(pool.stats().backbone_passes == 2 + 4);
}

TEST_CASE("memory accounting is exact against serialized sizes") {
    const Universe& u = universe();
    ServingPool pool(u.backbone);
    for (int i = 0; i < 2; ++i)
        pool.register_delta("t" + std::to_string(i), u.delta_paths[i], true);
    const std::size_t r0 = pool.open_request("t0");
    const std::size_t r1 = pool.open_request("t1");

    const std::size_t steps = 3;
    const std::vector<std::int32_t> stream = random_tokens(steps, 91);
    for (std::size_t pos = 0; pos < steps; ++pos) {
        DecodeBatch batch;
        batch.requests.push_back({r0, stream[pos], pos});
        batch.requests.push_back({r1, stream[pos], pos});
        pool.decode_step(batch, ServeMode::Shared);
    }

    const MemoryModel mm = pool.memory_report(2, steps);
    CHECK(mm.shared_total() == pool.resident_bytes());

    // per-delta bytes equal the serialized payload: recompute from the files
    std::uint64_t from_files = 0;
    for (int i = 0; i < 2; ++i) from_files += read_delta_file(u.delta_paths[i]).payload_bytes();
    CHECK(2 * mm.per_delta_bytes == from_files);

    // shared beats naive whenever a delta is smaller than a merged model
    CHECK(mm.per_delta_bytes < mm.naive_per_model_bytes);
    CHECK(mm.shared_total() < mm.naive_total());
}

TEST_CASE("from_shapes: F16 all-linear crossover lands at B=16") {
    std::vector<TensorSpec> shapes{{"layers.0.attn_q", 512, 512}};
    const MemoryModel mm = MemoryModel::from_shapes(shapes, default_quantize_policy(), 1,
                                                    /*bytes_per_dense_param=*/2, 1, 1, 1, 512);
    CHECK(mm.per_delta_bytes == 512 * 512 / 8 + 4);
    CHECK(mm.crossover_batch == 16);
}

TEST_CASE("from_shapes: linear-dominant toy config byte ratio under 0.15 at B=16") {
    // dim large relative to vocab so the packed planes dominate the delta
    const ToyArchConfig cfg{.vocab = 16, .dim = 256, .n_layers = 4, .n_heads = 4,
                            .intermediate = 688, .max_seq = 64};
    const auto shapes = tensor_shapes(cfg);
    const MemoryModel mm = MemoryModel::from_shapes(shapes, default_quantize_policy(), 1, 4, 16,
                                                    64, cfg.n_layers, cfg.dim);
    const double ratio = static_cast<double>(mm.backbone_bytes + 16 * mm.per_delta_bytes) /
                         static_cast<double>(16 * mm.naive_per_model_bytes);
    CHECK(ratio < 0.15);
}

TEST_CASE("latency bench: row schema, analytic bytes, resident stability") {
    const Universe& u = universe();
    ServingPool pool(u.backbone);
    for (int i = 0; i < 4; ++i)
        pool.register_delta("t" + std::to_string(i), u.delta_paths[i], true);
    const std::vector<std::size_t> batches{1, 2, 4};
    const auto rows = latency_bench(pool, batches, /*seq=*/8, /*trials=*/3, /*seed=*/5);
    REQUIRE(rows.size() == 6);
    const MemoryModel mm = pool.memory_report(1, 8);
    std::uint64_t prev_shared = 0;
    for (const auto& row : rows) {
        if (row.mode == "shared") {
            CHECK(row.bytes_touched == mm.backbone_bytes + row.batch * mm.per_delta_bytes);
            CHECK(row.bytes_touched >= prev_shared); // monotone in B
            prev_shared = row.bytes_touched;
        } else {
            CHECK(row.bytes_touched == row.batch * mm.naive_per_model_bytes);
        }
        CHECK(row.mean_ms > 0.0);
    }
    const std::string csv = bench_csv(rows);
    CHECK(csv.rfind("B,mode,mean_ms,p50_ms,bytes_touched,resident_bytes\n", 0) == 0);
}

TEST_CASE("int8-backed pool matches its composed dense equivalent at B=1") {
    const Universe& u = universe();
    const QuantizedCheckpoint qb = rtn_quantize_checkpoint(u.backbone, default_quantize_policy());
    ServingPool pool(qb);
    pool.register_delta("t0", u.delta_paths[0], true);
    const std::size_t r = pool.open_request("t0");

    const DeltaFile delta = read_delta_file(u.delta_paths[0]);
    const ViewModel composed = compose_quantized_base(qb, delta);
    KvCache cache = composed.make_cache();

    const std::vector<std::int32_t> stream = random_tokens(4, 93);
    std::vector<float> got, want;
    for (std::size_t pos = 0; pos < stream.size(); ++pos) {
        DecodeBatch batch;
        batch.requests.push_back({r, stream[pos], pos});
        got = pool.decode_step(batch, ServeMode::Shared)[0];
        want = composed.decode(cache, stream[pos]);
    }
    CHECK(oracle::rel_l2_error(got, want) <= 1e-4);
    // int8 residency is smaller than the dense backbone
    CHECK(pool.memory_report(1, 4).backbone_bytes < u.backbone.payload_bytes());
}
