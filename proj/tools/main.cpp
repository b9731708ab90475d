// deltakit: compress fine-tune weight deltas to 1-bit sign planes, refine the
// scales by logit distillation, and serve many fine-tunes from one backbone.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltakit/checkpoint.hpp"
#include "deltakit/delta.hpp"
#include "deltakit/distill.hpp"
#include "deltakit/int8.hpp"
#include "deltakit/lowrank.hpp"
#include "deltakit/model.hpp"
#include "deltakit/serve.hpp"
#include "deltakit/synth.hpp"
#include "deltakit/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deltakit;

namespace {

constexpr const char* kVersion = "0.1.0";

// exit codes: 0 success, 1 internal, 2 bad input, 3 artifact incompatibility
int exit_code_for(errc code) {
    switch (code) {
        case errc::io:
        case errc::malformed_header:
        case errc::json_parse:
        case errc::bad_offsets:
        case errc::unsupported_dtype:
        case errc::bad_argument:
        case errc::bad_token:
            return 2;
        case errc::shape_mismatch:
        case errc::name_mismatch:
        case errc::length_mismatch:
        case errc::duplicate_id:
        case errc::unknown_id:
            return 3;
        default:
            return 1;
    }
}

// Every artifact-producing command records how it was run next to its first
// output, including input and output hashes, so a run can be replayed and
// checked.
struct Manifest {
    std::string command;
    std::uint64_t seed = 0;
    json parameters = json::object();
    json input_hashes = json::object();
    std::vector<std::string> outputs;

    void add_input(const fs::path& p) { input_hashes[p.string()] = file_hash_hex(p); }
    void write() const {
        json j;
        j["command"] = command;
        j["tool_version"] = kVersion;
        j["seed"] = seed;
        j["parameters"] = parameters;
        j["inputs"] = input_hashes;
        json outs = json::object();
        for (const auto& o : outputs) outs[o] = file_hash_hex(o);
        j["outputs"] = outs;
        write_file_text(outputs.front() + ".manifest.json", j.dump(2));
    }
};

std::size_t origin_width(const ModelCheckpoint& ckpt) {
    return ckpt.origin == OriginDtype::F16 ? 2 : 4;
}

std::vector<TensorSpec> checkpoint_shapes(const ModelCheckpoint& ckpt) {
    std::vector<TensorSpec> shapes;
    for (const auto& [name, t] : ckpt.tensors) shapes.push_back({name, t.rows(), t.cols()});
    return shapes;
}

// ---------------------------------------------------------------------------
// compress

int cmd_compress(const std::string& base_path, const std::string& fine_path,
                 const std::string& out_path, std::size_t bits, const std::string& policy_spec) {
    const ModelCheckpoint base = load_checkpoint(base_path);
    const ModelCheckpoint fine = load_checkpoint(fine_path);
    const QuantizePolicy policy = policy_from_spec(policy_spec);
    const DeltaFile delta = build_delta_file(base, fine, bits, policy);
    write_delta_file(delta, out_path);

    const CompressionSummary s =
        compression_report(checkpoint_shapes(base), policy, bits, origin_width(fine));
    json summary;
    summary["out"] = out_path;
    summary["quantized_tensors"] = delta.quantized_names().size();
    summary["planes"] = bits;
    summary["base_bytes"] = s.base_bytes;
    summary["delta_bytes"] = s.delta_bytes;
    summary["compression_factor"] = s.factor;
    std::printf("%s\n", summary.dump(2).c_str());

    Manifest m;
    m.command = "compress";
    m.parameters = {{"base", base_path}, {"fine", fine_path}, {"bits", bits},
                    {"policy", policy_spec}};
    m.add_input(base_path);
    m.add_input(fine_path);
    m.outputs = {out_path};
    m.write();
    return 0;
}

// ---------------------------------------------------------------------------
// distill

int cmd_distill(const std::string& base_path, const std::string& fine_path,
                const std::string& delta_path, const std::string& calib_path,
                const std::string& out_path, const std::string& report_path,
                const DistillConfig& cfg) {
    const ModelCheckpoint base = load_checkpoint(base_path);
    const ModelCheckpoint fine = load_checkpoint(fine_path);
    check(fine.config.has_value(), errc::bad_argument,
          fine_path + ": checkpoint has no arch config");
    const DeltaFile delta = read_delta_file(delta_path);
    const TokenStream calib = load_tokens(calib_path, cfg.seq_len, cfg.steps * cfg.batch,
                                          cfg.seed, fine.config->vocab);

    DistillReport report;
    const DeltaFile refined = distill_scales(base, fine, delta, calib, cfg, &report);
    write_delta_file(refined, out_path);
    const std::string rp = report_path.empty() ? out_path + ".report.json" : report_path;
    write_file_text(rp, report.to_json());
    std::printf(
        "{\"initial_loss\": %.8g, \"final_loss\": %.8g, \"steps\": %zu, \"report\": \"%s\"}\n",
        report.initial_loss, report.final_loss, report.steps, rp.c_str());

    Manifest m;
    m.command = "distill";
    m.seed = cfg.seed;
    m.parameters = {{"base", base_path},   {"fine", fine_path},  {"delta", delta_path},
                    {"calib", calib_path}, {"steps", cfg.steps}, {"batch", cfg.batch},
                    {"seq", cfg.seq_len},  {"lr", cfg.lr}};
    m.add_input(base_path);
    m.add_input(fine_path);
    m.add_input(delta_path);
    m.add_input(calib_path);
    m.outputs = {out_path};
    m.write();
    return 0;
}

// ---------------------------------------------------------------------------
// apply / eval

int cmd_apply(const std::string& base_path, const std::string& delta_path,
              const std::string& out_path) {
    const ModelCheckpoint base = load_checkpoint(base_path);
    const DeltaFile delta = read_delta_file(delta_path);
    const ModelCheckpoint merged = apply_delta(base, delta);
    save_checkpoint(merged, out_path);
    std::printf("{\"out\": \"%s\", \"tensors\": %zu}\n", out_path.c_str(),
                merged.tensors.size());

    Manifest m;
    m.command = "apply";
    m.parameters = {{"base", base_path}, {"delta", delta_path}};
    m.add_input(base_path);
    m.add_input(delta_path);
    m.outputs = {out_path};
    m.write();
    return 0;
}

json eval_metrics(const ModelCheckpoint& base, const DeltaFile& delta,
                  const ModelCheckpoint& fine, const TokenStream& calib) {
    const ViewModel candidate = ViewModel::from_delta(base, delta);
    const ViewModel reference = ViewModel::from_checkpoint(fine);

    double mse_sum = 0.0;
    std::size_t agree = 0, positions = 0;
    for (const auto& seq : calib.sequences) {
        const DenseMatrix zc = candidate.forward(seq);
        const DenseMatrix zf = reference.forward(seq);
        mse_sum += mse_loss(zc, zf);
        for (std::size_t t = 0; t < zc.rows(); ++t) {
            std::size_t ac = 0, af = 0;
            for (std::size_t j = 1; j < zc.cols(); ++j) {
                if (zc(t, j) > zc(t, ac)) ac = j;
                if (zf(t, j) > zf(t, af)) af = j;
            }
            agree += ac == af;
            positions += 1;
        }
    }

    json per_tensor = json::object();
    const ModelCheckpoint merged = apply_delta(base, delta);
    for (const auto& [name, t] : fine.tensors)
        per_tensor[name] = frobenius_distance(merged.tensor(name), t);

    json out;
    out["logit_mse"] = mse_sum / static_cast<double>(calib.sequences.size());
    out["greedy_agreement"] = static_cast<double>(agree) / static_cast<double>(positions);
    out["per_tensor_l2"] = per_tensor;
    return out;
}

int cmd_eval(const std::string& base_path, const std::string& delta_path,
             const std::string& fine_path, const std::string& calib_path, std::size_t count,
             std::size_t seq_len, std::uint64_t seed, const std::string& out_path) {
    const ModelCheckpoint base = load_checkpoint(base_path);
    const ModelCheckpoint fine = load_checkpoint(fine_path);
    check(fine.config.has_value(), errc::bad_argument,
          fine_path + ": checkpoint has no arch config");
    const DeltaFile delta = read_delta_file(delta_path);
    const TokenStream calib = load_tokens(calib_path, seq_len, count, seed, fine.config->vocab);
    const json metrics = eval_metrics(base, delta, fine, calib);
    std::printf("%s\n", metrics.dump(2).c_str());
    if (!out_path.empty()) write_file_text(out_path, metrics.dump(2));
    return 0;
}

// ---------------------------------------------------------------------------
// svd / cev

int cmd_svd(const std::string& base_path, const std::string& fine_path,
            const std::string& rank_spec, const std::string& policy_spec,
            const std::string& out_path) {
    const ModelCheckpoint base = load_checkpoint(base_path);
    const ModelCheckpoint fine = load_checkpoint(fine_path);
    const QuantizePolicy policy = policy_from_spec(policy_spec);

    RawSafetensors raw;
    auto put_f32 = [&](const std::string& name, const DenseMatrix& m) {
        RawTensor t;
        t.dtype = "F32";
        t.shape = {m.rows(), m.cols()};
        t.bytes.resize(4 * m.size());
        for (std::size_t i = 0; i < m.size(); ++i) {
            const std::uint32_t u = std::bit_cast<std::uint32_t>(m.values()[i]);
            for (int b = 0; b < 4; ++b)
                t.bytes[4 * i + b] = static_cast<std::uint8_t>(u >> (8 * b));
        }
        raw.tensors.emplace(name, std::move(t));
    };

    json report = json::object();
    for (const auto& [name, bt] : base.tensors) {
        const DenseMatrix& ft = fine.tensor(name);
        if (!policy(name)) {
            put_f32(name + ".raw", sub(ft, bt));
            continue;
        }
        std::size_t rank;
        const std::size_t maxr = std::min(bt.rows(), bt.cols());
        if (rank_spec == "full")
            rank = maxr;
        else if (rank_spec == "mem")
            rank = memory_equivalent_rank(bt.rows(), bt.cols());
        else
            rank = static_cast<std::size_t>(std::stoul(rank_spec));
        const LowRankDelta lr = truncate_delta(bt, ft, rank);
        put_f32(name + ".A", lr.a);
        put_f32(name + ".B", lr.b);
        const DenseMatrix delta = sub(ft, bt);
        const double denom = frobenius_norm(delta);
        report[name] = frobenius_distance(lr.reconstruct(), delta) / (denom > 0 ? denom : 1.0);
    }
    raw.metadata["kind"] = "lowrank-delta";
    raw.metadata["rank"] = rank_spec;
    write_safetensors(raw, out_path);
    std::printf("%s\n", json{{"out", out_path}, {"relative_residual", report}}.dump(2).c_str());

    Manifest m;
    m.command = "svd";
    m.parameters = {{"base", base_path}, {"fine", fine_path}, {"rank", rank_spec},
                    {"policy", policy_spec}};
    m.add_input(base_path);
    m.add_input(fine_path);
    m.outputs = {out_path};
    m.write();
    return 0;
}

int cmd_cev(const std::string& base_path, const std::string& fine_path,
            const std::string& tensor, const std::string& out_path) {
    const ModelCheckpoint base = load_checkpoint(base_path);
    const ModelCheckpoint fine = load_checkpoint(fine_path);
    const CevResult r = cev(base.tensor(tensor), fine.tensor(tensor));
    std::string csv = "k,cev\n";
    for (std::size_t k = 0; k < r.cumulative.size(); ++k)
        csv += std::to_string(k + 1) + "," + std::to_string(r.cumulative[k]) + "\n";
    write_file_text(out_path, csv);
    std::printf("{\"out\": \"%s\", \"entries\": %zu, \"zero_delta\": %s}\n", out_path.c_str(),
                r.cumulative.size(), r.zero_delta ? "true" : "false");

    Manifest m;
    m.command = "cev";
    m.parameters = {{"base", base_path}, {"fine", fine_path}, {"tensor", tensor}};
    m.add_input(base_path);
    m.add_input(fine_path);
    m.outputs = {out_path};
    m.write();
    return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const std::string& base_path, const std::vector<std::string>& delta_specs,
              const std::string& batch_list, std::size_t seq, std::size_t trials,
              std::uint64_t seed, const std::string& out_path, const std::string& memory_out) {
    ServingPool pool(load_checkpoint(base_path));
    for (const auto& spec : delta_specs) {
        const auto eq = spec.find('=');
        check(eq != std::string::npos, errc::bad_argument,
              "--deltas expects id=path, got: " + spec);
        pool.register_delta(spec.substr(0, eq), spec.substr(eq + 1), /*resident=*/true);
    }
    std::vector<std::size_t> batches;
    std::size_t at = 0;
    while (at < batch_list.size()) {
        const auto comma = batch_list.find(',', at);
        const std::string tok =
            batch_list.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
        batches.push_back(static_cast<std::size_t>(std::stoul(tok)));
        if (comma == std::string::npos) break;
        at = comma + 1;
    }
    check(!batches.empty(), errc::bad_argument, "--batch-list is empty");

    const auto rows = latency_bench(pool, batches, seq, trials, seed);
    write_file_text(out_path, bench_csv(rows));

    json reports = json::array();
    for (std::size_t b : batches)
        reports.push_back(json::parse(pool.memory_report(b, seq).to_json()));
    if (!memory_out.empty()) write_file_text(memory_out, reports.dump(2));
    std::printf("{\"out\": \"%s\", \"rows\": %zu}\n", out_path.c_str(), rows.size());
    return 0;
}

// ---------------------------------------------------------------------------
// size

int cmd_size(const std::string& preset_name, const std::string& config_path, std::size_t bits) {
    std::vector<TensorSpec> shapes;
    std::string label;
    if (!preset_name.empty()) {
        const ArchPreset* p = find_preset(preset_name);
        if (p == nullptr) {
            std::string known;
            for (const auto& n : preset_names()) known += n + " ";
            fail(errc::bad_argument,
                 "unknown preset '" + preset_name + "' (known: " + known + ")");
        }
        shapes = preset_shapes(*p);
        label = preset_name;
    } else {
        const auto bytes = read_file_bytes(config_path);
        const ToyArchConfig cfg =
            ToyArchConfig::from_json(std::string(bytes.begin(), bytes.end()));
        shapes = tensor_shapes(cfg);
        label = config_path;
    }
    const CompressionSummary s =
        compression_report(shapes, default_quantize_policy(), bits, /*F16 origin*/ 2);
    json out;
    out["model"] = label;
    out["planes"] = bits;
    out["base_bytes"] = s.base_bytes;
    out["delta_bytes"] = s.delta_bytes;
    out["compression_factor"] = s.factor;
    std::printf("%s\n", out.dump(2).c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const std::string& config_path, std::uint64_t seed,
              const std::vector<std::string>& perturb, const std::string& out_base,
              const std::string& out_fine) {
    ToyArchConfig cfg; // desk-scale default
    if (!config_path.empty() && config_path != "default") {
        const auto bytes = read_file_bytes(config_path);
        cfg = ToyArchConfig::from_json(std::string(bytes.begin(), bytes.end()));
    }
    check(perturb.size() == 2, errc::bad_argument, "--perturb expects: signed|sigma <magnitude>");
    PerturbKind kind;
    if (perturb[0] == "signed")
        kind = PerturbKind::Signed;
    else if (perturb[0] == "sigma")
        kind = PerturbKind::Sigma;
    else
        fail(errc::bad_argument, "--perturb kind must be 'signed' or 'sigma', got " + perturb[0]);
    const float magnitude = std::stof(perturb[1]);

    const ModelCheckpoint base = synth_base(cfg, seed);
    const ModelCheckpoint fine =
        synth_fine(base, kind, magnitude, seed + 1, default_quantize_policy());
    save_checkpoint(base, out_base);
    save_checkpoint(fine, out_fine);
    std::printf("{\"base\": \"%s\", \"fine\": \"%s\", \"tensors\": %zu}\n", out_base.c_str(),
                out_fine.c_str(), base.tensors.size());

    Manifest m;
    m.command = "synth";
    m.seed = seed;
    m.parameters = {{"config", config_path.empty() ? "default" : config_path},
                    {"perturb_kind", perturb[0]},
                    {"perturb_magnitude", perturb[1]}};
    m.outputs = {out_base, out_fine};
    m.write();
    return 0;
}

// ---------------------------------------------------------------------------
// tokens

int cmd_tokens(const std::string& in_path, const std::string& out_path, std::size_t vocab) {
    const auto ids = bytes_to_tokens(in_path, vocab);
    write_token_file(out_path, ids);
    std::printf("{\"out\": \"%s\", \"tokens\": %zu, \"vocab\": %zu}\n", out_path.c_str(),
                ids.size(), vocab);

    Manifest m;
    m.command = "tokens";
    m.parameters = {{"in", in_path}, {"vocab", vocab}};
    m.add_input(in_path);
    m.outputs = {out_path};
    m.write();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"1-bit weight-delta compression, scale distillation, and multi-tenant serving"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    // compress
    std::string base_path, fine_path, out_path, policy_spec = "linear";
    std::size_t bits = 1;
    auto* compress = app.add_subcommand("compress", "quantize fine - base to sign planes");
    compress->add_option("--base", base_path)->required();
    compress->add_option("--fine", fine_path)->required();
    compress->add_option("--out", out_path)->required();
    compress->add_option("--bits", bits, "sign planes per quantized tensor");
    compress->add_option("--policy", policy_spec, "linear | none | <regex>");

    // distill
    DistillConfig dcfg;
    std::string delta_path, calib_path, report_path;
    auto* distill = app.add_subcommand("distill", "refine scales by logit matching");
    distill->add_option("--base", base_path)->required();
    distill->add_option("--fine", fine_path)->required();
    distill->add_option("--delta", delta_path)->required();
    distill->add_option("--calib", calib_path)->required();
    distill->add_option("--out", out_path)->required();
    distill->add_option("--report", report_path);
    distill->add_option("--steps", dcfg.steps);
    distill->add_option("--batch", dcfg.batch);
    distill->add_option("--seq", dcfg.seq_len);
    distill->add_option("--lr", dcfg.lr);
    distill->add_option("--seed", dcfg.seed);

    // apply
    auto* apply = app.add_subcommand("apply", "base + delta -> merged checkpoint");
    apply->add_option("--base", base_path)->required();
    apply->add_option("--delta", delta_path)->required();
    apply->add_option("--out", out_path)->required();

    // eval
    std::size_t eval_count = 8, eval_seq = 32;
    std::uint64_t eval_seed = 0;
    std::string eval_out;
    auto* eval = app.add_subcommand("eval", "logit and greedy agreement vs the fine model");
    eval->add_option("--base", base_path)->required();
    eval->add_option("--delta", delta_path)->required();
    eval->add_option("--fine", fine_path)->required();
    eval->add_option("--calib", calib_path)->required();
    eval->add_option("--count", eval_count);
    eval->add_option("--seq", eval_seq);
    eval->add_option("--seed", eval_seed);
    eval->add_option("--out", eval_out);

    // svd
    std::string rank_spec = "mem";
    auto* svd_cmd = app.add_subcommand("svd", "low-rank delta factorization baseline");
    svd_cmd->add_option("--base", base_path)->required();
    svd_cmd->add_option("--fine", fine_path)->required();
    svd_cmd->add_option("--rank", rank_spec, "integer | mem | full");
    svd_cmd->add_option("--policy", policy_spec);
    svd_cmd->add_option("--out", out_path)->required();

    // cev
    std::string tensor_name;
    auto* cev_cmd = app.add_subcommand("cev", "cumulative explained variance of one delta");
    cev_cmd->add_option("--base", base_path)->required();
    cev_cmd->add_option("--fine", fine_path)->required();
    cev_cmd->add_option("--tensor", tensor_name)->required();
    cev_cmd->add_option("--out", out_path)->required();

    // bench
    std::vector<std::string> delta_specs;
    std::string batch_list = "1,2,4,8,16", memory_out;
    std::size_t bench_seq = 16, trials = 5;
    std::uint64_t bench_seed = 0;
    auto* bench = app.add_subcommand("bench", "decode-latency and memory sweep");
    bench->add_option("--base", base_path)->required();
    bench->add_option("--deltas", delta_specs, "id=path, repeatable")->required();
    bench->add_option("--batch-list", batch_list);
    bench->add_option("--seq", bench_seq);
    bench->add_option("--trials", trials);
    bench->add_option("--seed", bench_seed);
    bench->add_option("--out", out_path)->required();
    bench->add_option("--memory-out", memory_out);

    // size
    std::string preset_name, config_path;
    auto* size = app.add_subcommand("size", "compression factor from shape arithmetic");
    size->add_option("--preset", preset_name, "llama2-7b | llama2-13b | llama2-70b | mistral-7b");
    size->add_option("--config", config_path);
    size->add_option("--bits", bits);

    // synth
    std::uint64_t synth_seed = 0;
    std::vector<std::string> perturb;
    std::string out_base, out_fine;
    auto* synth = app.add_subcommand("synth", "seeded base/fine checkpoint pair");
    synth->add_option("--config", config_path, "config JSON path or 'default'");
    synth->add_option("--seed", synth_seed);
    synth->add_option("--perturb", perturb, "signed|sigma <magnitude>")->expected(2)->required();
    synth->add_option("--out-base", out_base)->required();
    synth->add_option("--out-fine", out_fine)->required();

    // tokens
    std::string tokens_in;
    std::size_t vocab = 256;
    auto* tokens = app.add_subcommand("tokens", "byte-level token file from any input file");
    tokens->add_option("--in", tokens_in)->required();
    tokens->add_option("--out", out_path)->required();
    tokens->add_option("--vocab", vocab);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e); // prints help or the parse error
        return rc == 0 ? 0 : 2;
    }

    try {
        if (compress->parsed())
            return cmd_compress(base_path, fine_path, out_path, bits, policy_spec);
        if (distill->parsed())
            return cmd_distill(base_path, fine_path, delta_path, calib_path, out_path,
                               report_path, dcfg);
        if (apply->parsed()) return cmd_apply(base_path, delta_path, out_path);
        if (eval->parsed())
            return cmd_eval(base_path, delta_path, fine_path, calib_path, eval_count, eval_seq,
                            eval_seed, eval_out);
        if (svd_cmd->parsed())
            return cmd_svd(base_path, fine_path, rank_spec, policy_spec, out_path);
        if (cev_cmd->parsed()) return cmd_cev(base_path, fine_path, tensor_name, out_path);
        if (bench->parsed())
            return cmd_bench(base_path, delta_specs, batch_list, bench_seq, trials, bench_seed,
                             out_path, memory_out);
        if (size->parsed()) {
            check(!preset_name.empty() || !config_path.empty(), errc::bad_argument,
                  "size: provide --preset or --config");
            return cmd_size(preset_name, config_path, bits);
        }
        if (synth->parsed())
            return cmd_synth(config_path, synth_seed, perturb, out_base, out_fine);
        if (tokens->parsed()) return cmd_tokens(tokens_in, out_path, vocab);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 1;
}
