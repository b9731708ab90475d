#include <doctest.h>

#include <filesystem>
#include <random>

#include "deltakit/delta.hpp"
#include "deltakit/synth.hpp"
#include "deltakit/util.hpp"
#include "oracles.hpp"

using namespace deltakit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path p = fs::temp_directory_path() / "deltakit_delta_tests";
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("sign convention: zero maps to -1") {
    CHECK(sign_of(3.2f) == 1);
    CHECK(sign_of(0.0f) == -1);
    CHECK(sign_of(-0.0f) == -1);
    CHECK(sign_of(-1e-30f) == -1);
    CHECK(sign_of(1e-30f) == 1);
}

TEST_CASE("compress: signs and mean-absolute scale") {
    const DenseMatrix base(2, 2);
    const DenseMatrix fine(2, 2, {1, -2, 3, -4});
    const PackedSignMatrix p = compress_tensor(base, fine);
    CHECK(p.scale == doctest::Approx(2.5).epsilon(1e-7));
    CHECK(p.bit_at(0, 0));
    CHECK_FALSE(p.bit_at(0, 1));
    CHECK(p.bit_at(1, 0));
    CHECK_FALSE(p.bit_at(1, 1));
}

TEST_CASE("compress of zero delta has zero scale and reconstructs zero") {
    const DenseMatrix m = oracle::random_matrix(6, 5, 3);
    const PackedSignMatrix p = compress_tensor(m, m);
    CHECK(p.scale == 0.0f);
    const DenseMatrix rec = decompress_tensor(p);
    for (float v : rec.values()) CHECK(v == 0.0f);
}

TEST_CASE("bit layout: row-major, LSB-first, zero trailing bits") {
    // 9 elements: + - + + - - + -   +  ->  bytes 0x4D, 0x01
    const DenseMatrix delta(3, 3, {1, -1, 1, 1, -1, -1, 1, -1, 1});
    const PackedSignMatrix p = compress_delta(delta);
    REQUIRE(p.bits.size() == 2);
    CHECK(p.bits[0] == 0x4D);
    CHECK(p.bits[1] == 0x01);
}

TEST_CASE("alpha = mean|delta| beats every grid value (Eq. 3 grid-scan oracle)") {
    const DenseMatrix delta = oracle::random_matrix(64, 64, 42);
    const PackedSignMatrix p = compress_delta(delta);
    const double best = oracle::abs_residual_objective(delta, p.scale);
    float max_abs = 0.0f;
    for (float v : delta.values()) max_abs = std::max(max_abs, std::fabs(v));
    for (int i = 0; i < 1000; ++i) {
        const double a = 2.0 * max_abs * i / 999.0;
        CHECK(best <= oracle::abs_residual_objective(delta, a));
    }
}

TEST_CASE("alpha optimality: derivative sign change around the mean") {
    const DenseMatrix delta = oracle::random_matrix(16, 16, 7);
    const PackedSignMatrix p = compress_delta(delta);
    const double at = oracle::abs_residual_objective(delta, p.scale);
    CHECK(oracle::abs_residual_objective(delta, p.scale * 0.99) > at);
    CHECK(oracle::abs_residual_objective(delta, p.scale * 1.01) > at);
}

TEST_CASE("decompress applies +/- alpha per element; round-trip keeps signs") {
    const DenseMatrix delta = oracle::random_matrix(5, 9, 17);
    const PackedSignMatrix p = compress_delta(delta);
    const DenseMatrix rec = decompress_tensor(p);
    for (std::size_t i = 0; i < delta.size(); ++i) {
        CHECK(std::fabs(rec.values()[i]) == p.scale);
        if (delta.values()[i] != 0.0f)
            CHECK(sign_of(rec.values()[i]) == sign_of(delta.values()[i]));
    }
    // compress of its own output is idempotent in sign pattern and scale
    const PackedSignMatrix p2 = compress_delta(rec);
    CHECK(p2.scale == doctest::Approx(p.scale).epsilon(1e-6));
    CHECK(p2.bits == p.bits);
}

TEST_CASE("pack/unpack bijection on random patterns including ragged sizes") {
    std::mt19937_64 rng(99);
    for (int iter = 0; iter < 300; ++iter) {
        const std::size_t rows = 1 + rng() % 12;
        const std::size_t cols = 1 + rng() % 23;
        DenseMatrix delta(rows, cols);
        for (float& v : delta.values()) v = (rng() & 1) ? 1.0f : -1.0f;
        const PackedSignMatrix p = compress_delta(delta);
        // trailing bits zero
        const std::size_t tail = (rows * cols) % 8;
        if (tail != 0) CHECK((p.bits.back() >> tail) == 0);
        const DenseMatrix rec = decompress_tensor(p);
        for (std::size_t i = 0; i < delta.size(); ++i)
            CHECK(sign_of(rec.values()[i]) == sign_of(delta.values()[i]));
    }
}

TEST_CASE("compress_stack: exactly representable delta zeroes out in one plane") {
    std::mt19937_64 rng(5);
    const std::size_t n = 16;
    DenseMatrix base(n, n);
    DenseMatrix fine(n, n);
    const float c = 0.25f;
    for (std::size_t i = 0; i < fine.size(); ++i)
        fine.values()[i] = (rng() & 1) ? c : -c;
    const DeltaStack stack = compress_stack(base, fine, 1);
    const DenseMatrix rec = stack.reconstruct();
    CHECK(oracle::rel_frobenius_error(rec, fine) <= 1e-6);
}

TEST_CASE("compress_stack: residual norm strictly decreases while nonzero") {
    const DenseMatrix base(32, 32);
    const DenseMatrix fine = oracle::random_matrix(32, 32, 123);
    double prev = frobenius_norm(fine);
    DenseMatrix residual = fine;
    const DeltaStack stack = compress_stack(base, fine, 6);
    for (const auto& plane : stack.planes) {
        residual = sub(residual, decompress_tensor(plane));
        const double now = frobenius_norm(residual);
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("compress_stack: k=2 beats k=1 on Gaussian deltas") {
    const DenseMatrix base(128, 128);
    const DenseMatrix fine = oracle::random_matrix(128, 128, 321);
    const DeltaStack s1 = compress_stack(base, fine, 1);
    const DeltaStack s2 = compress_stack(base, fine, 2);
    const double e1 = frobenius_distance(s1.reconstruct(), fine);
    const double e2 = frobenius_distance(s2.reconstruct(), fine);
    CHECK(e2 < e1);
}

TEST_CASE("1-bit relative squared error near 1 - 2/pi for iid Gaussian") {
    const DenseMatrix base(256, 256);
    const DenseMatrix fine = oracle::random_matrix(256, 256, 555);
    const DeltaStack s1 = compress_stack(base, fine, 1);
    const double err = frobenius_distance(s1.reconstruct(), fine);
    const double total = frobenius_norm(fine);
    const double rel_sq = (err * err) / (total * total);
    CHECK(rel_sq > 0.33);
    CHECK(rel_sq < 0.40);
    // eight planes land well below the one-plane error
    const DeltaStack s8 = compress_stack(base, fine, 8);
    const double err8 = frobenius_distance(s8.reconstruct(), fine);
    CHECK((err8 * err8) / (total * total) < rel_sq);
}

TEST_CASE("packed_matvec hand examples") {
    // all-bits-set single row, alpha 1
    DenseMatrix d1(1, 3, {1, 1, 1});
    PackedSignMatrix p1 = compress_delta(d1);
    p1.scale = 1.0f;
    const std::vector<float> x1{1, 2, 3};
    CHECK(packed_matvec(p1, x1)[0] == doctest::Approx(6.0f));

    // alpha=2, signs [+,-], x=[3,1] -> 2*(3-1) = 4
    DenseMatrix d2(1, 2, {1, -1});
    PackedSignMatrix p2 = compress_delta(d2);
    p2.scale = 2.0f;
    const std::vector<float> x2{3, 1};
    CHECK(packed_matvec(p2, x2)[0] == doctest::Approx(4.0f));
}

TEST_CASE("packed_matvec matches dense oracle on random 256x256") {
    const DenseMatrix delta = oracle::random_matrix(256, 256, 777);
    const PackedSignMatrix p = compress_delta(delta);
    const std::vector<float> x = oracle::random_vector(256, 778);
    const std::vector<float> got = packed_matvec(p, x);
    const std::vector<float> want = oracle::naive_matvec(decompress_tensor(p), x);
    CHECK(oracle::rel_l2_error(got, want) <= 1e-5);
}

TEST_CASE("packed_matvec linearity") {
    const DenseMatrix delta = oracle::random_matrix(40, 64, 800);
    const PackedSignMatrix p = compress_delta(delta);
    const std::vector<float> x = oracle::random_vector(64, 801);
    const std::vector<float> y = oracle::random_vector(64, 802);
    std::vector<float> xy(64);
    for (std::size_t i = 0; i < 64; ++i) xy[i] = x[i] + y[i];
    const auto fx = packed_matvec(p, x);
    const auto fy = packed_matvec(p, y);
    const auto fxy = packed_matvec(p, xy);
    std::vector<float> sum(fx.size());
    for (std::size_t i = 0; i < fx.size(); ++i) sum[i] = fx[i] + fy[i];
    CHECK(oracle::rel_l2_error(fxy, sum) <= 1e-5);

    std::vector<float> cx(64);
    for (std::size_t i = 0; i < 64; ++i) cx[i] = 3.0f * x[i];
    const auto fcx = packed_matvec(p, cx);
    std::vector<float> cfx(fx.size());
    for (std::size_t i = 0; i < fx.size(); ++i) cfx[i] = 3.0f * fx[i];
    CHECK(oracle::rel_l2_error(fcx, cfx) <= 1e-6);
}

TEST_CASE("packed transpose accumulate matches dense transpose oracle") {
    const DenseMatrix delta = oracle::random_matrix(48, 56, 810);
    const PackedSignMatrix p = compress_delta(delta);
    const std::vector<float> y = oracle::random_vector(48, 811);
    std::vector<float> got(56, 0.0f);
    packed_signed_accumulate_t(p, y, got);
    DenseMatrix signs = decompress_tensor(p);
    scale_inplace(signs, p.scale > 0 ? 1.0f / p.scale : 0.0f); // unit signs
    const std::vector<float> want = oracle::naive_matvec(transpose(signs), y);
    CHECK(oracle::rel_l2_error(got, want) <= 1e-5);
}

namespace {

ModelCheckpoint toy_pair_base() {
    const ToyArchConfig cfg{.vocab = 32, .dim = 16, .n_layers = 2, .n_heads = 2,
                            .intermediate = 20, .max_seq = 16};
    return synth_base(cfg, 1);
}

} // namespace

TEST_CASE("build_delta_file: lossless policy reproduces fine bit-exactly") {
    const ModelCheckpoint base = toy_pair_base();
    const ModelCheckpoint fine =
        synth_fine(base, PerturbKind::Sigma, 0.02f, 2, default_quantize_policy());
    const DeltaFile delta = build_delta_file(base, fine, 1, policy_from_spec("none"));
    CHECK(delta.quantized_names().empty());
    const ModelCheckpoint applied = apply_delta(base, delta);
    for (const auto& [name, t] : fine.tensors) {
        const DenseMatrix& got = applied.tensor(name);
        for (std::size_t i = 0; i < t.size(); ++i)
            CHECK(got.values()[i] == doctest::Approx(t.values()[i]).epsilon(1e-7));
    }
}

TEST_CASE("default policy quantizes exactly the 7 block projections per layer") {
    const ModelCheckpoint base = toy_pair_base();
    const ModelCheckpoint fine =
        synth_fine(base, PerturbKind::Sigma, 0.02f, 3, default_quantize_policy());
    const DeltaFile delta = build_delta_file(base, fine, 1, default_quantize_policy());
    CHECK(delta.quantized_names().size() == 2 * 7);
    // union of quantized and raw equals the checkpoint names
    CHECK(delta.entries.size() == base.tensors.size());
}

TEST_CASE("fine == base gives zero scales and zero raw deltas") {
    const ModelCheckpoint base = toy_pair_base();
    const DeltaFile delta = build_delta_file(base, base, 1, default_quantize_policy());
    for (const auto& [name, e] : delta.entries) {
        if (e.kind == DeltaEntry::Kind::Packed)
            for (const auto& plane : e.stack.planes) CHECK(plane.scale == 0.0f);
        else
            for (float v : e.raw.values()) CHECK(v == 0.0f);
    }
    const ModelCheckpoint applied = apply_delta(base, delta);
    for (const auto& [name, t] : base.tensors)
        for (std::size_t i = 0; i < t.size(); ++i)
            CHECK(applied.tensor(name).values()[i] == t.values()[i]);
}

TEST_CASE("bdelta disk round-trip is bit-exact on scales and planes") {
    const ModelCheckpoint base = toy_pair_base();
    const ModelCheckpoint fine =
        synth_fine(base, PerturbKind::Sigma, 0.02f, 4, default_quantize_policy());
    const DeltaFile delta = build_delta_file(base, fine, 3, default_quantize_policy());
    const fs::path p = temp_dir() / "roundtrip.bdelta";
    write_delta_file(delta, p);
    const DeltaFile back = read_delta_file(p);
    REQUIRE(back.entries.size() == delta.entries.size());
    for (const auto& [name, e] : delta.entries) {
        const DeltaEntry& b = back.entries.at(name);
        REQUIRE(b.kind == e.kind);
        if (e.kind == DeltaEntry::Kind::Packed) {
            REQUIRE(b.stack.planes.size() == e.stack.planes.size());
            for (std::size_t k = 0; k < e.stack.planes.size(); ++k) {
                CHECK(std::bit_cast<std::uint32_t>(b.stack.planes[k].scale) ==
                      std::bit_cast<std::uint32_t>(e.stack.planes[k].scale));
                CHECK(b.stack.planes[k].bits == e.stack.planes[k].bits);
            }
        } else {
            for (std::size_t i = 0; i < e.raw.size(); ++i)
                CHECK(std::bit_cast<std::uint32_t>(b.raw.values()[i]) ==
                      std::bit_cast<std::uint32_t>(e.raw.values()[i]));
        }
    }
    // serialization is deterministic
    const fs::path p2 = temp_dir() / "roundtrip2.bdelta";
    write_delta_file(back, p2);
    CHECK(file_hash_hex(p) == file_hash_hex(p2));
}

TEST_CASE("build and apply reject mismatched checkpoints") {
    const ModelCheckpoint base = toy_pair_base();
    ModelCheckpoint missing = base;
    missing.tensors.erase("lm_head");
    try {
        build_delta_file(base, missing, 1, default_quantize_policy());
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == errc::name_mismatch);
        CHECK(std::string(e.what()).find("lm_head") != std::string::npos);
    }

    ModelCheckpoint bent = base;
    bent.tensors.at("embed") = DenseMatrix(2, 2);
    bent.config.reset();
    CHECK_THROWS_AS(build_delta_file(base, bent, 1, default_quantize_policy()), Error);

    const DeltaFile delta = build_delta_file(base, base, 1, default_quantize_policy());
    CHECK_THROWS_AS(apply_delta(bent, delta), Error);
}

TEST_CASE("compress_stack rejects zero planes") {
    const DenseMatrix m(4, 4);
    CHECK_THROWS_AS(compress_stack(m, m, 0), Error);
}

TEST_CASE("bdelta rejects corrupted containers") {
    const fs::path p = temp_dir() / "bad.bdelta";
    write_file_bytes(p, std::vector<std::uint8_t>{'X', 'X', 'X', 'X', 0, 0, 0, 0, 0, 0, 0, 0});
    CHECK_THROWS_AS(read_delta_file(p), Error);
}

TEST_CASE("compression factors match published numbers within 10%") {
    const auto policy = default_quantize_policy();
    struct Row {
        const char* preset;
        double factor;
    };
    // size | delta size | factor: 13.48 GB | 1.24 GB | 10.87, etc.
    const Row rows[] = {{"llama2-7b", 10.87},
                        {"llama2-13b", 12.45},
                        {"llama2-70b", 15.41},
                        {"mistral-7b", 11.14}};
    for (const Row& r : rows) {
        const ArchPreset* p = find_preset(r.preset);
        REQUIRE(p != nullptr);
        const auto shapes = preset_shapes(*p);
        const CompressionSummary s = compression_report(shapes, policy, 1, 2);
        CHECK(std::fabs(s.factor - r.factor) / r.factor <= 0.10);
    }
}

TEST_CASE("all-linear config compresses ~16x from F16") {
    std::vector<TensorSpec> shapes{{"layers.0.attn_q", 4096, 4096}};
    const CompressionSummary s =
        compression_report(shapes, default_quantize_policy(), 1, 2);
    CHECK(s.factor == doctest::Approx(16.0).epsilon(0.001));
}

TEST_CASE("policy spec parsing") {
    const auto linear = policy_from_spec("linear");
    CHECK(linear("layers.3.mlp_up"));
    CHECK_FALSE(linear("embed"));
    CHECK_FALSE(linear("layers.0.norm1"));
    const auto none = policy_from_spec("none");
    CHECK_FALSE(none("layers.3.mlp_up"));
    const auto re = policy_from_spec("attn_[qk]$");
    CHECK(re("layers.0.attn_q"));
    CHECK_FALSE(re("layers.0.attn_v"));
    CHECK_THROWS_AS(policy_from_spec("["), Error);
}
