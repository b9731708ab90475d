#include <doctest.h>

#include <filesystem>

#include "deltakit/int8.hpp"
#include "deltakit/synth.hpp"
#include "oracles.hpp"

using namespace deltakit;
namespace fs = std::filesystem;

TEST_CASE("rtn endpoints: max magnitude maps to +-127") {
    const DenseMatrix w(1, 2, {1.27f, -1.27f});
    const Int8Tensor q = rtn_quantize(w);
    CHECK(q.row_scales[0] == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(q.values[0] == 127);
    CHECK(q.values[1] == -127);
    const DenseMatrix back = rtn_dequantize(q);
    CHECK(back(0, 0) == doctest::Approx(1.27f).epsilon(1e-6));
    CHECK(back(0, 1) == doctest::Approx(-1.27f).epsilon(1e-6));
}

TEST_CASE("rtn zero matrix: zero codes, zero scales, exact round-trip") {
    const DenseMatrix w(3, 4);
    const Int8Tensor q = rtn_quantize(w);
    for (auto v : q.values) CHECK(v == 0);
    for (float s : q.row_scales) CHECK(s == 0.0f);
    const DenseMatrix back = rtn_dequantize(q);
    for (float v : back.values()) CHECK(v == 0.0f);
}

TEST_CASE("rtn per-element error bounded by row_scale/2") {
    const DenseMatrix w = oracle::random_matrix(64, 64, 7);
    const Int8Tensor q = rtn_quantize(w);
    const DenseMatrix back = rtn_dequantize(q);
    for (std::size_t r = 0; r < 64; ++r) {
        const double bound = q.row_scales[r] / 2.0;
        for (std::size_t c = 0; c < 64; ++c) {
            const double err = std::fabs(static_cast<double>(w(r, c)) - back(r, c));
            CHECK(err <= bound);
        }
    }
}

TEST_CASE("rtn is idempotent") {
    const DenseMatrix w = oracle::random_matrix(24, 40, 8);
    const Int8Tensor q1 = rtn_quantize(w);
    const Int8Tensor q2 = rtn_quantize(rtn_dequantize(q1));
    CHECK(q1.values == q2.values);
    for (std::size_t r = 0; r < q1.row_scales.size(); ++r)
        CHECK(q1.row_scales[r] == doctest::Approx(q2.row_scales[r]).epsilon(1e-6));
}

TEST_CASE("delta addition commutes with dequantization") {
    const DenseMatrix w = oracle::random_matrix(12, 12, 9);
    const DenseMatrix d = oracle::random_matrix(12, 12, 10, 0.05f);
    const Int8Tensor q = rtn_quantize(w);
    const DenseMatrix a = add(rtn_dequantize(q), d);
    DenseMatrix b = rtn_dequantize(q);
    add_inplace(b, d);
    CHECK(oracle::rel_frobenius_error(a, b) <= 1e-6);
}

namespace {
const ToyArchConfig kCfg{.vocab = 48, .dim = 32, .n_layers = 2, .n_heads = 4,
                         .intermediate = 40, .max_seq = 32};
}

TEST_CASE("quantized checkpoint round-trips through safetensors + sidecar") {
    const ModelCheckpoint base = synth_base(kCfg, 11, 0.08f);
    const QuantizedCheckpoint q = rtn_quantize_checkpoint(base, default_quantize_policy());
    CHECK(q.int8_tensors.size() == 2 * 7);
    const fs::path dir = fs::temp_directory_path() / "deltakit_int8_tests";
    fs::create_directories(dir);
    const fs::path p = dir / "qbase.safetensors";
    save_quantized_checkpoint(q, p);
    const QuantizedCheckpoint back = load_quantized_checkpoint(p);
    REQUIRE(back.int8_tensors.size() == q.int8_tensors.size());
    for (const auto& [name, t] : q.int8_tensors) {
        const Int8Tensor& bt = back.int8_tensors.at(name);
        CHECK(bt.values == t.values);
        CHECK(bt.row_scales == t.row_scales);
    }
    REQUIRE(back.config.has_value());

    // the plain loader rejects I8 payloads
    try {
        load_checkpoint(p);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == errc::unsupported_dtype);
    }
}

TEST_CASE("compose: zero delta equals plain RTN-base logits exactly") {
    const ModelCheckpoint base = synth_base(kCfg, 21, 0.08f);
    const QuantizedCheckpoint qbase = rtn_quantize_checkpoint(base, default_quantize_policy());
    const DeltaFile zero = build_delta_file(base, base, 1, default_quantize_policy());
    const ViewModel composed = compose_quantized_base(qbase, zero);
    const ViewModel plain = ViewModel::from_checkpoint(dequantize_checkpoint(qbase));

    const std::vector<std::int32_t> tokens{1, 5, 9, 3};
    const DenseMatrix a = composed.forward(tokens);
    const DenseMatrix b = plain.forward(tokens);
    // zero packed scales add exactly zero to every product
    CHECK(oracle::rel_l2_error(a.values(), b.values()) <= 1e-6);
}

TEST_CASE("compose: lossless raw delta over RTN base matches merged oracle") {
    const ModelCheckpoint base = synth_base(kCfg, 31, 0.08f);
    const ModelCheckpoint fine =
        synth_fine(base, PerturbKind::Sigma, 0.04f, 32, default_quantize_policy());
    const QuantizedCheckpoint qbase = rtn_quantize_checkpoint(base, default_quantize_policy());
    const DeltaFile raw = build_delta_file(base, fine, 1, policy_from_spec("none"));

    const ViewModel composed = compose_quantized_base(qbase, raw);
    // merged oracle: dequantized base + raw delta, all dense
    const ModelCheckpoint merged = apply_delta(dequantize_checkpoint(qbase), raw);
    const ViewModel plain = ViewModel::from_checkpoint(merged);

    const std::vector<std::int32_t> tokens{7, 2, 11, 30, 4};
    const DenseMatrix a = composed.forward(tokens);
    const DenseMatrix b = plain.forward(tokens);
    CHECK(oracle::rel_l2_error(a.values(), b.values()) <= 1e-4);
}

TEST_CASE("greedy decoding over the quantized base mostly matches full precision") {
    const ModelCheckpoint base = synth_base(kCfg, 41, 0.08f);
    const ModelCheckpoint fine =
        synth_fine(base, PerturbKind::Sigma, 0.04f, 42, default_quantize_policy());
    const DeltaFile delta = build_delta_file(base, fine, 1, default_quantize_policy());
    const QuantizedCheckpoint qbase = rtn_quantize_checkpoint(base, default_quantize_policy());

    const ViewModel quant_model = compose_quantized_base(qbase, delta);
    const ViewModel full_model = ViewModel::from_delta(base, delta);

    std::mt19937_64 rng(43);
    std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(kCfg.vocab) - 1);
    int agree = 0;
    const int prompts = 32;
    for (int p = 0; p < prompts; ++p) {
        std::vector<std::int32_t> prompt(8);
        for (auto& t : prompt) t = tok(rng);
        const DenseMatrix zq = quant_model.forward(prompt);
        const DenseMatrix zf = full_model.forward(prompt);
        const std::size_t last = prompt.size() - 1;
        std::size_t aq = 0, af = 0;
        for (std::size_t j = 1; j < kCfg.vocab; ++j) {
            if (zq(last, j) > zq(last, aq)) aq = j;
            if (zf(last, j) > zf(last, af)) af = j;
        }
        if (aq == af) ++agree;
    }
    CHECK(agree >= prompts * 9 / 10);
}
