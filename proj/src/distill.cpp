#include "deltakit/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "deltakit/adam.hpp"
#include "deltakit/model.hpp"
#include "deltakit/util.hpp"

namespace deltakit {

using nlohmann::json;

TokenStream load_tokens(const std::filesystem::path& path, std::size_t seq_len,
                        std::size_t count, std::uint64_t seed, std::size_t vocab) {
    check(seq_len >= 1, errc::bad_argument, "load_tokens: seq_len must be >= 1");
    const auto bytes = read_file_bytes(path);
    check(bytes.size() % 4 == 0, errc::bad_argument,
          path.string() + ": token file length not a multiple of 4");
    const std::size_t total = bytes.size() / 4;
    check(total >= seq_len, errc::bad_argument,
          path.string() + ": file holds fewer tokens than one window");

    std::vector<std::int32_t> ids(total);
    for (std::size_t i = 0; i < total; ++i) {
        const std::uint32_t u = get_u32_le(bytes.data() + 4 * i);
        check(u < vocab, errc::bad_token,
              path.string() + ": token id " + std::to_string(u) + " >= vocab " +
                  std::to_string(vocab));
        ids[i] = static_cast<std::int32_t>(u);
    }

    const std::size_t n_windows = total / seq_len;
    std::vector<std::size_t> order(n_windows);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    TokenStream out;
    out.wrapped = count > n_windows;
    out.sequences.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t w = order[i % n_windows];
        out.sequences.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(w * seq_len),
                                   ids.begin() + static_cast<std::ptrdiff_t>((w + 1) * seq_len));
    }
    return out;
}

std::vector<std::int32_t> bytes_to_tokens(const std::filesystem::path& path, std::size_t vocab) {
    check(vocab >= 1, errc::bad_argument, "bytes_to_tokens: vocab must be >= 1");
    const auto bytes = read_file_bytes(path);
    std::vector<std::int32_t> ids(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        ids[i] = static_cast<std::int32_t>(bytes[i] % vocab);
    return ids;
}

void write_token_file(const std::filesystem::path& path, std::span<const std::int32_t> ids) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(4 * ids.size());
    for (std::int32_t id : ids) put_u32_le(bytes, static_cast<std::uint32_t>(id));
    write_file_bytes(path, bytes);
}

std::string DistillReport::to_json() const {
    json j;
    j["initial_loss"] = initial_loss;
    j["final_loss"] = final_loss;
    j["steps"] = steps;
    j["calib_wrapped"] = calib_wrapped;
    json per = json::array();
    for (const auto& t : per_tensor) {
        json e;
        e["name"] = t.name;
        e["alpha_before"] = t.alpha_before;
        e["alpha_after"] = t.alpha_after;
        per.push_back(e);
    }
    j["per_tensor"] = per;
    return j.dump(2);
}

namespace {

// Shared driver: per step, forward the frozen fine model for targets, then
// backprop the decomposed model's MSE into its trainable parameters.
// `pull`/`push` move parameters between the flat double vector and the view;
// reduce extracts the per-parameter gradients in the same order.
struct TrainHooks {
    std::function<std::vector<double>()> pull;
    std::function<void(std::span<const double>)> push;
    std::function<std::vector<double>(const GradMap&)> reduce;
};

double run_distill_loop(ViewModel& bin, const ViewModel& fine, const TokenStream& calib,
                        const DistillConfig& cfg, const TrainHooks& hooks,
                        DistillReport* report) {
    check(!calib.sequences.empty(), errc::bad_argument, "distill: empty calibration stream");
    check(cfg.batch >= 1 && cfg.steps >= 1, errc::bad_argument,
          "distill: steps and batch must be >= 1");

    std::vector<double> params = hooks.pull();
    AdamState state;
    const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};

    // fixed evaluation slice: the first batch of the schedule
    const std::size_t n_seq = calib.sequences.size();
    auto seq_at = [&](std::size_t i) -> const std::vector<std::int32_t>& {
        return calib.sequences[i % n_seq];
    };
    auto eval_slice = [&]() {
        double total = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto& toks = seq_at(b);
            const DenseMatrix target = fine.forward(toks);
            total += mse_loss(bin.forward(toks), target);
        }
        return total / static_cast<double>(cfg.batch);
    };

    const double initial_loss = eval_slice();
    check(std::isfinite(initial_loss), errc::non_finite, "distill: non-finite initial loss");

    std::size_t cursor = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<double> grad_sum;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto& toks = seq_at(cursor++);
            const DenseMatrix target = fine.forward(toks);
            auto [loss, grads] = bin.loss_and_grads(toks, target);
            check(std::isfinite(loss), errc::non_finite,
                  "distill: non-finite loss at step " + std::to_string(step));
            std::vector<double> flat = hooks.reduce(grads);
            if (grad_sum.empty())
                grad_sum = std::move(flat);
            else
                for (std::size_t i = 0; i < flat.size(); ++i) grad_sum[i] += flat[i];
        }
        for (double& g : grad_sum) g /= static_cast<double>(cfg.batch);
        adam_step(params, grad_sum, state, adam);
        hooks.push(params);
    }

    const double final_loss = eval_slice();
    if (report) {
        report->initial_loss = initial_loss;
        report->final_loss = final_loss;
        report->steps = cfg.steps;
        report->calib_wrapped = calib.wrapped || cfg.steps * cfg.batch > n_seq;
    }
    return final_loss;
}

} // namespace

DeltaFile distill_scales(const ModelCheckpoint& base, const ModelCheckpoint& fine,
                         const DeltaFile& delta, const TokenStream& calib,
                         const DistillConfig& cfg, DistillReport* report) {
    check(fine.config.has_value(), errc::bad_argument, "distill: fine checkpoint has no config");
    ViewModel bin = ViewModel::from_delta(base, delta);
    const ViewModel fine_model = ViewModel::from_checkpoint(fine);

    const std::vector<std::string> names = bin.trainable_scale_names();
    std::vector<std::size_t> plane_counts;
    for (const auto& n : names) plane_counts.push_back(bin.get_scales(n).size());

    TrainHooks hooks;
    hooks.pull = [&]() {
        std::vector<double> out;
        for (const auto& n : names)
            for (float s : bin.get_scales(n)) out.push_back(static_cast<double>(s));
        return out;
    };
    hooks.push = [&](std::span<const double> params) {
        std::size_t at = 0;
        for (std::size_t i = 0; i < names.size(); ++i) {
            std::vector<float> s(plane_counts[i]);
            for (std::size_t k = 0; k < s.size(); ++k)
                s[k] = static_cast<float>(params[at++]);
            bin.set_scales(names[i], s);
        }
    };
    hooks.reduce = [&](const GradMap& grads) {
        std::vector<double> out;
        for (std::size_t i = 0; i < names.size(); ++i) {
            auto it = grads.scale_grads.find(names[i]);
            if (it == grads.scale_grads.end())
                out.insert(out.end(), plane_counts[i], 0.0);
            else
                out.insert(out.end(), it->second.begin(), it->second.end());
        }
        return out;
    };

    DistillReport local;
    DistillReport& rep = report ? *report : local;
    for (const auto& n : names) {
        TensorScaleDrift drift;
        drift.name = n;
        drift.alpha_before = bin.get_scales(n);
        rep.per_tensor.push_back(std::move(drift));
    }

    run_distill_loop(bin, fine_model, calib, cfg, hooks, &rep);

    for (auto& drift : rep.per_tensor) drift.alpha_after = bin.get_scales(drift.name);

    // same sign bits, updated scales
    DeltaFile out = delta;
    for (const auto& n : names) {
        const std::vector<float> s = bin.get_scales(n);
        auto& planes = out.entries.at(n).stack.planes;
        for (std::size_t k = 0; k < planes.size(); ++k) planes[k].scale = s[k];
    }
    return out;
}

std::map<std::string, LowRankDelta> distill_lowrank(const ModelCheckpoint& base,
                                                    const ModelCheckpoint& fine,
                                                    const std::map<std::string, LowRankDelta>& factors,
                                                    const TokenStream& calib,
                                                    const DistillConfig& cfg,
                                                    DistillReport* report) {
    ViewModel bin = ViewModel::from_lowrank(base, fine, factors);
    const ViewModel fine_model = ViewModel::from_checkpoint(fine);

    std::vector<std::string> names;
    for (const auto& [n, lr] : factors) names.push_back(n);

    TrainHooks hooks;
    hooks.pull = [&]() {
        std::vector<double> out;
        for (const auto& n : names) {
            const LowRankDelta lr = bin.get_lowrank(n);
            for (float v : lr.a.values()) out.push_back(v);
            for (float v : lr.b.values()) out.push_back(v);
        }
        return out;
    };
    hooks.push = [&](std::span<const double> params) {
        std::size_t at = 0;
        for (const auto& n : names) {
            LowRankDelta lr = bin.get_lowrank(n);
            for (float& v : lr.a.values()) v = static_cast<float>(params[at++]);
            for (float& v : lr.b.values()) v = static_cast<float>(params[at++]);
            bin.set_lowrank(n, lr.a, lr.b);
        }
    };
    hooks.reduce = [&](const GradMap& grads) {
        std::vector<double> out;
        for (const auto& n : names) {
            const auto it = grads.lowrank_grads.find(n);
            check(it != grads.lowrank_grads.end(), errc::name_mismatch,
                  "distill_lowrank: missing gradients for " + n);
            for (float v : it->second.first.values()) out.push_back(v);
            for (float v : it->second.second.values()) out.push_back(v);
        }
        return out;
    };

    run_distill_loop(bin, fine_model, calib, cfg, hooks, report);

    std::map<std::string, LowRankDelta> out;
    for (const auto& n : names) out.emplace(n, bin.get_lowrank(n));
    return out;
}

} // namespace deltakit
