#include "deltakit/model.hpp"

#include <algorithm>
#include <cmath>

#include "deltakit/int8.hpp"
#include "deltakit/nn_ops.hpp"

namespace deltakit {

std::size_t LinearView::out_dim() const {
    switch (kind) {
        case Kind::Int8Merged:
        case Kind::Int8PackedDelta:
            return int8_base->rows;
        default:
            return dense_base.rows();
    }
}

std::size_t LinearView::in_dim() const {
    switch (kind) {
        case Kind::Int8Merged:
        case Kind::Int8PackedDelta:
            return int8_base->cols;
        default:
            return dense_base.cols();
    }
}

std::uint64_t KvCache::bytes() const {
    std::uint64_t total = 0;
    for (const auto& layer : k) total += 4ull * layer.size();
    for (const auto& layer : v) total += 4ull * layer.size();
    return total;
}

namespace {

std::string name_of(std::size_t layer, const char* role) {
    return "layers." + std::to_string(layer) + "." + role;
}

// y = x * W^T plus whatever delta the view carries. Records per-plane sign
// products (and the low-rank intermediate) when a tape is supplied.
DenseMatrix apply_linear(const LinearView& view, const DenseMatrix& x, LinearTape* tape) {
    DenseMatrix y;
    switch (view.kind) {
        case LinearView::Kind::Merged:
            return matmul_nt(x, view.dense_base);
        case LinearView::Kind::Int8Merged:
            return int8_matmul_nt(x, *view.int8_base);
        case LinearView::Kind::Int8PackedDelta:
            y = int8_matmul_nt(x, *view.int8_base);
            break;
        case LinearView::Kind::PackedDelta:
            y = matmul_nt(x, view.dense_base);
            break;
        case LinearView::Kind::LowRankDelta: {
            y = matmul_nt(x, view.dense_base);
            DenseMatrix p = matmul_nt(x, view.lr_b); // s x r
            add_inplace(y, matmul_nt(p, view.lr_a));
            if (tape) tape->lowrank_p = std::move(p);
            return y;
        }
    }
    // packed planes on top of the base product
    for (std::size_t pl = 0; pl < view.planes.size(); ++pl) {
        const PackedSignMatrix& plane = view.planes[pl];
        DenseMatrix u(x.rows(), plane.rows);
        for (std::size_t t = 0; t < x.rows(); ++t)
            packed_signed_accumulate(plane, x.row_span(t), {u.row(t), plane.rows});
        const float s = view.scales[pl];
        for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] += s * u.values()[i];
        if (tape) tape->plane_u.push_back(std::move(u));
    }
    return y;
}

// Returns dL/dx and accumulates gradients for the view's trainable
// parameters. Int8-backed views are inference-only.
DenseMatrix linear_backward(const LinearView& view, const std::string& name, const DenseMatrix& x,
                            const DenseMatrix& dy, const LinearTape& tape, GradMap& grads) {
    switch (view.kind) {
        case LinearView::Kind::Merged:
            return matmul(dy, view.dense_base);
        case LinearView::Kind::PackedDelta: {
            DenseMatrix dx = matmul(dy, view.dense_base);
            auto& sg = grads.scale_grads[name];
            sg.resize(view.planes.size(), 0.0);
            for (std::size_t pl = 0; pl < view.planes.size(); ++pl) {
                const DenseMatrix& u = tape.plane_u[pl];
                double g = 0.0;
                for (std::size_t i = 0; i < u.size(); ++i)
                    g += static_cast<double>(dy.values()[i]) * u.values()[i];
                sg[pl] += g;
                std::vector<float> col(view.planes[pl].cols);
                for (std::size_t t = 0; t < dy.rows(); ++t) {
                    std::fill(col.begin(), col.end(), 0.0f);
                    packed_signed_accumulate_t(view.planes[pl], dy.row_span(t), col);
                    float* dxt = dx.row(t);
                    const float s = view.scales[pl];
                    for (std::size_t j = 0; j < col.size(); ++j) dxt[j] += s * col[j];
                }
            }
            return dx;
        }
        case LinearView::Kind::LowRankDelta: {
            DenseMatrix dx = matmul(dy, view.dense_base);
            DenseMatrix q = matmul(dy, view.lr_a);          // s x r
            DenseMatrix da = matmul_tn(dy, tape.lowrank_p); // out x r
            DenseMatrix db = matmul_tn(q, x);               // r x in
            add_inplace(dx, matmul(q, view.lr_b));
            auto it = grads.lowrank_grads.find(name);
            if (it == grads.lowrank_grads.end()) {
                grads.lowrank_grads.emplace(name, std::make_pair(std::move(da), std::move(db)));
            } else {
                add_inplace(it->second.first, da);
                add_inplace(it->second.second, db);
            }
            return dx;
        }
        default:
            fail(errc::bad_argument,
                 "linear_backward: int8-backed view '" + name + "' is inference-only");
    }
}

void rmsnorm_matrix(const DenseMatrix& x, std::span<const float> w, DenseMatrix& out,
                    std::vector<double>& inv) {
    out = DenseMatrix(x.rows(), x.cols());
    inv.resize(x.rows());
    for (std::size_t t = 0; t < x.rows(); ++t)
        inv[t] = rmsnorm_row(x.row_span(t), w, {out.row(t), x.cols()});
}

// dL/dx_j = inv*w_j*dy_j - x_j*inv^3/n * sum_i dy_i*w_i*x_i
DenseMatrix rmsnorm_backward(const DenseMatrix& x, std::span<const float> w,
                             std::span<const double> inv, const DenseMatrix& dy) {
    DenseMatrix dx(x.rows(), x.cols());
    const std::size_t n = x.cols();
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const float* xt = x.row(t);
        const float* dyt = dy.row(t);
        float* dxt = dx.row(t);
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            dot += static_cast<double>(dyt[j]) * w[j] * xt[j];
        const double s = inv[t];
        const double coef = s * s * s * dot / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
            dxt[j] = static_cast<float>(s * w[j] * dyt[j] - coef * xt[j]);
    }
    return dx;
}

} // namespace

ViewModel ViewModel::from_checkpoint(const ModelCheckpoint& ckpt) {
    check(ckpt.config.has_value(), errc::bad_argument, "checkpoint has no arch config");
    ckpt.validate_against_config();
    const ToyArchConfig& cfg = *ckpt.config;

    ViewModel m;
    m.cfg_ = cfg;
    m.embed_ = ckpt.tensor("embed");
    m.final_norm_.assign(ckpt.tensor("final_norm").values().begin(),
                         ckpt.tensor("final_norm").values().end());
    m.lm_head_ = LinearView{};
    m.lm_head_.dense_base = ckpt.tensor("lm_head");
    m.layers_.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        Layer& L = m.layers_[i];
        auto merged = [&](const std::string& role) {
            LinearView v;
            v.dense_base = ckpt.tensor(p + role);
            return v;
        };
        L.q = merged("attn_q");
        L.k = merged("attn_k");
        L.v = merged("attn_v");
        L.o = merged("attn_o");
        L.gate = merged("mlp_gate");
        L.up = merged("mlp_up");
        L.down = merged("mlp_down");
        const auto& n1 = ckpt.tensor(p + "norm1").values();
        const auto& n2 = ckpt.tensor(p + "norm2").values();
        L.norm1.assign(n1.begin(), n1.end());
        L.norm2.assign(n2.begin(), n2.end());
    }
    return m;
}

ViewModel ViewModel::from_delta(const ModelCheckpoint& base, const DeltaFile& delta) {
    check(base.config.has_value(), errc::bad_argument, "checkpoint has no arch config");
    base.validate_against_config();
    const ToyArchConfig& cfg = *base.config;
    for (const auto& [name, e] : delta.entries) {
        auto it = base.tensors.find(name);
        check(it != base.tensors.end(), errc::name_mismatch,
              "from_delta: tensor '" + name + "' missing from base");
        check(e.rows() == it->second.rows() && e.cols() == it->second.cols(),
              errc::shape_mismatch, "from_delta: tensor '" + name + "' shape mismatch");
    }

    // Linear roles get true decomposed views; everything else is merged.
    auto entry_for = [&](const std::string& name) -> const DeltaEntry* {
        auto it = delta.entries.find(name);
        check(it != delta.entries.end(), errc::name_mismatch,
              "from_delta: tensor '" + name + "' missing from delta");
        return &it->second;
    };
    auto linear_view = [&](const std::string& name) {
        LinearView v;
        const DeltaEntry* e = entry_for(name);
        if (e->kind == DeltaEntry::Kind::Packed) {
            v.kind = LinearView::Kind::PackedDelta;
            v.dense_base = base.tensor(name);
            v.planes = e->stack.planes;
            for (const auto& pl : v.planes) v.scales.push_back(pl.scale);
        } else {
            v.kind = LinearView::Kind::Merged;
            v.dense_base = add(base.tensor(name), e->raw);
        }
        return v;
    };
    auto merged_values = [&](const std::string& name) {
        return add(base.tensor(name), entry_for(name)->reconstruct());
    };

    ViewModel m;
    m.cfg_ = cfg;
    m.embed_ = merged_values("embed");
    const DenseMatrix fn = merged_values("final_norm");
    m.final_norm_.assign(fn.values().begin(), fn.values().end());
    m.lm_head_ = linear_view("lm_head");
    m.layers_.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        Layer& L = m.layers_[i];
        L.q = linear_view(p + "attn_q");
        L.k = linear_view(p + "attn_k");
        L.v = linear_view(p + "attn_v");
        L.o = linear_view(p + "attn_o");
        L.gate = linear_view(p + "mlp_gate");
        L.up = linear_view(p + "mlp_up");
        L.down = linear_view(p + "mlp_down");
        const DenseMatrix n1 = merged_values(p + "norm1");
        const DenseMatrix n2 = merged_values(p + "norm2");
        L.norm1.assign(n1.values().begin(), n1.values().end());
        L.norm2.assign(n2.values().begin(), n2.values().end());
    }
    return m;
}

ViewModel ViewModel::from_lowrank(const ModelCheckpoint& base, const ModelCheckpoint& fine,
                                  const std::map<std::string, LowRankDelta>& factors) {
    ViewModel m = from_checkpoint(fine); // exact merges everywhere...
    for (const auto& [name, lr] : factors) {
        LinearView* v = m.find_view(name);
        check(v != nullptr, errc::name_mismatch,
              "from_lowrank: '" + name + "' is not a linear tensor");
        v->kind = LinearView::Kind::LowRankDelta;
        v->dense_base = base.tensor(name); // ...except factored tensors, rebased
        v->lr_a = lr.a;
        v->lr_b = lr.b;
    }
    return m;
}

ViewModel ViewModel::from_parts(ToyArchConfig cfg, std::map<std::string, LinearView> linear_views,
                                DenseMatrix embed, std::vector<float> final_norm,
                                std::vector<std::vector<float>> norms1,
                                std::vector<std::vector<float>> norms2) {
    ViewModel m;
    m.cfg_ = cfg;
    m.embed_ = std::move(embed);
    m.final_norm_ = std::move(final_norm);
    m.layers_.resize(cfg.n_layers);
    auto take = [&](const std::string& name) {
        auto it = linear_views.find(name);
        check(it != linear_views.end(), errc::name_mismatch, "from_parts: missing view " + name);
        return std::move(it->second);
    };
    m.lm_head_ = take("lm_head");
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        Layer& L = m.layers_[i];
        L.q = take(p + "attn_q");
        L.k = take(p + "attn_k");
        L.v = take(p + "attn_v");
        L.o = take(p + "attn_o");
        L.gate = take(p + "mlp_gate");
        L.up = take(p + "mlp_up");
        L.down = take(p + "mlp_down");
        L.norm1 = std::move(norms1[i]);
        L.norm2 = std::move(norms2[i]);
    }
    return m;
}

LinearView* ViewModel::find_view(const std::string& name) {
    if (name == "lm_head") return &lm_head_;
    if (name.rfind("layers.", 0) != 0) return nullptr;
    const std::size_t dot = name.find('.', 7);
    if (dot == std::string::npos) return nullptr;
    std::size_t layer = 0;
    try {
        layer = std::stoul(name.substr(7, dot - 7));
    } catch (const std::exception&) {
        return nullptr;
    }
    if (layer >= layers_.size()) return nullptr;
    const std::string role = name.substr(dot + 1);
    Layer& L = layers_[layer];
    if (role == "attn_q") return &L.q;
    if (role == "attn_k") return &L.k;
    if (role == "attn_v") return &L.v;
    if (role == "attn_o") return &L.o;
    if (role == "mlp_gate") return &L.gate;
    if (role == "mlp_up") return &L.up;
    if (role == "mlp_down") return &L.down;
    return nullptr;
}

const LinearView* ViewModel::find_view(const std::string& name) const {
    return const_cast<ViewModel*>(this)->find_view(name);
}

DenseMatrix ViewModel::forward(std::span<const std::int32_t> tokens, ForwardTape* tape) const {
    const std::size_t s = tokens.size();
    check(s >= 1, errc::bad_argument, "forward: empty token sequence");
    check(s <= cfg_.max_seq, errc::bad_argument, "forward: sequence longer than max_seq");
    for (std::int32_t t : tokens)
        check(t >= 0 && static_cast<std::size_t>(t) < cfg_.vocab, errc::bad_token,
              "forward: token id " + std::to_string(t) + " out of range");

    const std::size_t dim = cfg_.dim;
    const std::size_t hd = cfg_.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    DenseMatrix x(s, dim);
    for (std::size_t t = 0; t < s; ++t) {
        const float* e = embed_.row(static_cast<std::size_t>(tokens[t]));
        std::copy(e, e + dim, x.row(t));
    }
    if (tape) {
        tape->tokens.assign(tokens.begin(), tokens.end());
        tape->embedded = x;
        tape->layers.assign(cfg_.n_layers, LayerTape{});
    }

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const Layer& L = layers_[l];
        LayerTape local;
        LayerTape& lt = tape ? tape->layers[l] : local;
        lt.x_in = x;

        rmsnorm_matrix(x, L.norm1, lt.normed1, lt.rms1_inv);
        lt.q = apply_linear(L.q, lt.normed1, tape ? &lt.q_t : nullptr);
        lt.k = apply_linear(L.k, lt.normed1, tape ? &lt.k_t : nullptr);
        lt.v = apply_linear(L.v, lt.normed1, tape ? &lt.v_t : nullptr);
        for (std::size_t t = 0; t < s; ++t)
            for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
                rope_row({lt.q.row(t) + h * hd, hd}, t, cfg_.rope_theta);
                rope_row({lt.k.row(t) + h * hd, hd}, t, cfg_.rope_theta);
            }

        lt.attn_ctx = DenseMatrix(s, dim);
        lt.probs.assign(cfg_.n_heads, DenseMatrix(s, s));
        for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
            DenseMatrix& probs = lt.probs[h];
            for (std::size_t i = 0; i < s; ++i) {
                float* prow = probs.row(i);
                const float* qi = lt.q.row(i) + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float* kj = lt.k.row(j) + h * hd;
                    float acc = 0.0f;
                    for (std::size_t d = 0; d < hd; ++d) acc += qi[d] * kj[d];
                    prow[j] = acc * inv_sqrt_hd;
                }
                softmax_row({prow, i + 1}, i + 1); // causal: columns > i stay zero
                float* ctx = lt.attn_ctx.row(i) + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float* vj = lt.v.row(j) + h * hd;
                    const float pij = prow[j];
                    for (std::size_t d = 0; d < hd; ++d) ctx[d] += pij * vj[d];
                }
            }
        }

        DenseMatrix o = apply_linear(L.o, lt.attn_ctx, tape ? &lt.o_t : nullptr);
        add_inplace(x, o);
        lt.x_mid = x;

        rmsnorm_matrix(x, L.norm2, lt.normed2, lt.rms2_inv);
        lt.gate_pre = apply_linear(L.gate, lt.normed2, tape ? &lt.gate_t : nullptr);
        lt.up_pre = apply_linear(L.up, lt.normed2, tape ? &lt.up_t : nullptr);
        lt.act = DenseMatrix(s, cfg_.intermediate);
        for (std::size_t i = 0; i < lt.act.size(); ++i)
            lt.act.values()[i] = silu(lt.gate_pre.values()[i]) * lt.up_pre.values()[i];
        DenseMatrix down = apply_linear(L.down, lt.act, tape ? &lt.down_t : nullptr);
        add_inplace(x, down);
    }

    DenseMatrix final_normed;
    std::vector<double> rms_final_inv;
    rmsnorm_matrix(x, final_norm_, final_normed, rms_final_inv);
    DenseMatrix logits = apply_linear(lm_head_, final_normed, tape ? &tape->lm_head_t : nullptr);
    if (tape) {
        tape->final_x = std::move(x);
        tape->rms_final_inv = std::move(rms_final_inv);
        tape->final_normed = std::move(final_normed);
        tape->logits = logits;
    }
    return logits;
}

double mse_loss(const DenseMatrix& logits, const DenseMatrix& target) {
    check(logits.same_shape(target), errc::shape_mismatch, "mse_loss: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double d = static_cast<double>(logits.values()[i]) - target.values()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(logits.size());
}

std::pair<double, GradMap> ViewModel::loss_and_grads(std::span<const std::int32_t> tokens,
                                                     const DenseMatrix& target_logits) const {
    ForwardTape tape;
    const DenseMatrix logits = forward(tokens, &tape);
    check(logits.same_shape(target_logits), errc::shape_mismatch,
          "loss_and_grads: target shape mismatch");
    const double loss = mse_loss(logits, target_logits);

    const std::size_t s = logits.rows();
    const std::size_t dim = cfg_.dim;
    const std::size_t hd = cfg_.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    GradMap grads;

    DenseMatrix dlogits(logits.rows(), logits.cols());
    const double inv_n = 2.0 / static_cast<double>(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
        dlogits.values()[i] = static_cast<float>(
            inv_n * (static_cast<double>(logits.values()[i]) - target_logits.values()[i]));

    DenseMatrix d_final_normed =
        linear_backward(lm_head_, "lm_head", tape.final_normed, dlogits, tape.lm_head_t, grads);
    DenseMatrix dx = rmsnorm_backward(tape.final_x, final_norm_, tape.rms_final_inv,
                                      d_final_normed);

    for (std::size_t li = layers_.size(); li-- > 0;) {
        const Layer& L = layers_[li];
        const LayerTape& lt = tape.layers[li];

        // x_out = x_mid + down(act)
        DenseMatrix d_act = linear_backward(L.down, name_of(li, "mlp_down"), lt.act, dx,
                                            lt.down_t, grads);
        DenseMatrix d_gate(s, cfg_.intermediate), d_up(s, cfg_.intermediate);
        for (std::size_t i = 0; i < d_act.size(); ++i) {
            const float g = lt.gate_pre.values()[i];
            const float u = lt.up_pre.values()[i];
            const float da = d_act.values()[i];
            d_gate.values()[i] = da * u * silu_grad(g);
            d_up.values()[i] = da * silu(g);
        }
        DenseMatrix d_normed2 =
            linear_backward(L.gate, name_of(li, "mlp_gate"), lt.normed2, d_gate, lt.gate_t, grads);
        add_inplace(d_normed2, linear_backward(L.up, name_of(li, "mlp_up"), lt.normed2, d_up,
                                               lt.up_t, grads));
        DenseMatrix d_x_mid = rmsnorm_backward(lt.x_mid, L.norm2, lt.rms2_inv, d_normed2);
        add_inplace(d_x_mid, dx); // residual connection

        // x_mid = x_in + o(attn_ctx)
        DenseMatrix d_ctx = linear_backward(L.o, name_of(li, "attn_o"), lt.attn_ctx, d_x_mid,
                                            lt.o_t, grads);
        DenseMatrix d_q(s, dim), d_k(s, dim), d_v(s, dim);
        std::vector<float> d_probs_row, d_scores_row;
        for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
            const DenseMatrix& probs = lt.probs[h];
            d_probs_row.resize(s);
            d_scores_row.resize(s);
            for (std::size_t i = 0; i < s; ++i) {
                const float* dctx = d_ctx.row(i) + h * hd;
                const float* prow = probs.row(i);
                // d_probs and softmax backward over the causal prefix
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float* vj = lt.v.row(j) + h * hd;
                    float acc = 0.0f;
                    for (std::size_t d = 0; d < hd; ++d) acc += dctx[d] * vj[d];
                    d_probs_row[j] = acc;
                    dot += static_cast<double>(acc) * prow[j];
                }
                for (std::size_t j = 0; j <= i; ++j)
                    d_scores_row[j] =
                        prow[j] * (d_probs_row[j] - static_cast<float>(dot));
                const float* qi = lt.q.row(i) + h * hd;
                float* dqi = d_q.row(i) + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float ds = d_scores_row[j] * inv_sqrt_hd;
                    const float* kj = lt.k.row(j) + h * hd;
                    float* dkj = d_k.row(j) + h * hd;
                    float* dvj = d_v.row(j) + h * hd;
                    const float pij = prow[j];
                    for (std::size_t d = 0; d < hd; ++d) {
                        dqi[d] += ds * kj[d];
                        dkj[d] += ds * qi[d];
                        dvj[d] += pij * dctx[d];
                    }
                }
            }
        }
        for (std::size_t t = 0; t < s; ++t)
            for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
                rope_row({d_q.row(t) + h * hd, hd}, t, cfg_.rope_theta, /*invert=*/true);
                rope_row({d_k.row(t) + h * hd, hd}, t, cfg_.rope_theta, /*invert=*/true);
            }

        DenseMatrix d_normed1 =
            linear_backward(L.q, name_of(li, "attn_q"), lt.normed1, d_q, lt.q_t, grads);
        add_inplace(d_normed1, linear_backward(L.k, name_of(li, "attn_k"), lt.normed1, d_k,
                                               lt.k_t, grads));
        add_inplace(d_normed1, linear_backward(L.v, name_of(li, "attn_v"), lt.normed1, d_v,
                                               lt.v_t, grads));
        dx = rmsnorm_backward(lt.x_in, L.norm1, lt.rms1_inv, d_normed1);
        add_inplace(dx, d_x_mid); // residual connection
    }
    return {loss, std::move(grads)};
}

KvCache ViewModel::make_cache() const {
    KvCache c;
    c.k.resize(cfg_.n_layers);
    c.v.resize(cfg_.n_layers);
    return c;
}

namespace {

std::vector<float> apply_linear_vec(const LinearView& view, std::span<const float> x) {
    std::vector<float> y;
    switch (view.kind) {
        case LinearView::Kind::Merged:
            return matvec(view.dense_base, x);
        case LinearView::Kind::Int8Merged:
            return int8_matvec(*view.int8_base, x);
        case LinearView::Kind::Int8PackedDelta:
            y = int8_matvec(*view.int8_base, x);
            break;
        case LinearView::Kind::PackedDelta:
            y = matvec(view.dense_base, x);
            break;
        case LinearView::Kind::LowRankDelta: {
            y = matvec(view.dense_base, x);
            const std::vector<float> p = matvec(view.lr_b, x);
            const std::vector<float> ap = matvec(view.lr_a, p);
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += ap[i];
            return y;
        }
    }
    std::vector<float> u(view.out_dim());
    for (std::size_t pl = 0; pl < view.planes.size(); ++pl) {
        std::fill(u.begin(), u.end(), 0.0f);
        packed_signed_accumulate(view.planes[pl], x, u);
        const float s = view.scales[pl];
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * u[i];
    }
    return y;
}

} // namespace

std::vector<float> ViewModel::decode(KvCache& cache, std::int32_t token) const {
    check(token >= 0 && static_cast<std::size_t>(token) < cfg_.vocab, errc::bad_token,
          "decode: token id out of range");
    check(cache.pos < cfg_.max_seq, errc::bad_argument, "decode: context exceeds max_seq");
    const std::size_t dim = cfg_.dim;
    const std::size_t hd = cfg_.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    const std::size_t pos = cache.pos;

    std::vector<float> x(embed_.row(token), embed_.row(token) + dim);
    std::vector<float> normed(dim);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const Layer& L = layers_[l];
        rmsnorm_row(x, L.norm1, normed);
        std::vector<float> q = apply_linear_vec(L.q, normed);
        std::vector<float> k = apply_linear_vec(L.k, normed);
        std::vector<float> v = apply_linear_vec(L.v, normed);
        for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
            rope_row({q.data() + h * hd, hd}, pos, cfg_.rope_theta);
            rope_row({k.data() + h * hd, hd}, pos, cfg_.rope_theta);
        }
        cache.k[l].insert(cache.k[l].end(), k.begin(), k.end());
        cache.v[l].insert(cache.v[l].end(), v.begin(), v.end());
        const std::size_t n_ctx = pos + 1;

        std::vector<float> ctx(dim, 0.0f);
        std::vector<float> scores(n_ctx);
        for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
            const float* qh = q.data() + h * hd;
            for (std::size_t j = 0; j < n_ctx; ++j) {
                const float* kj = cache.k[l].data() + j * dim + h * hd;
                float acc = 0.0f;
                for (std::size_t d = 0; d < hd; ++d) acc += qh[d] * kj[d];
                scores[j] = acc * inv_sqrt_hd;
            }
            softmax_row(scores, n_ctx);
            float* ch = ctx.data() + h * hd;
            for (std::size_t j = 0; j < n_ctx; ++j) {
                const float* vj = cache.v[l].data() + j * dim + h * hd;
                for (std::size_t d = 0; d < hd; ++d) ch[d] += scores[j] * vj[d];
            }
        }
        const std::vector<float> o = apply_linear_vec(L.o, ctx);
        for (std::size_t i = 0; i < dim; ++i) x[i] += o[i];

        rmsnorm_row(x, L.norm2, normed);
        std::vector<float> g = apply_linear_vec(L.gate, normed);
        const std::vector<float> u = apply_linear_vec(L.up, normed);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = silu(g[i]) * u[i];
        const std::vector<float> down = apply_linear_vec(L.down, g);
        for (std::size_t i = 0; i < dim; ++i) x[i] += down[i];
    }
    rmsnorm_row(x, final_norm_, normed);
    std::vector<float> logits = apply_linear_vec(lm_head_, normed);
    cache.pos += 1;
    return logits;
}

void ViewModel::set_scales(const std::string& name, std::span<const float> scales) {
    LinearView* v = find_view(name);
    check(v != nullptr, errc::name_mismatch, "set_scales: unknown tensor " + name);
    check(v->kind == LinearView::Kind::PackedDelta ||
              v->kind == LinearView::Kind::Int8PackedDelta,
          errc::bad_argument, "set_scales: '" + name + "' has no packed delta");
    check(scales.size() == v->scales.size(), errc::length_mismatch,
          "set_scales: plane count mismatch");
    std::copy(scales.begin(), scales.end(), v->scales.begin());
}

std::vector<float> ViewModel::get_scales(const std::string& name) const {
    const LinearView* v = find_view(name);
    check(v != nullptr, errc::name_mismatch, "get_scales: unknown tensor " + name);
    return v->scales;
}

void ViewModel::set_lowrank(const std::string& name, const DenseMatrix& a, const DenseMatrix& b) {
    LinearView* v = find_view(name);
    check(v != nullptr && v->kind == LinearView::Kind::LowRankDelta, errc::bad_argument,
          "set_lowrank: '" + name + "' has no low-rank delta");
    check(a.same_shape(v->lr_a) && b.same_shape(v->lr_b), errc::shape_mismatch,
          "set_lowrank: factor shape mismatch");
    v->lr_a = a;
    v->lr_b = b;
}

LowRankDelta ViewModel::get_lowrank(const std::string& name) const {
    const LinearView* v = find_view(name);
    check(v != nullptr && v->kind == LinearView::Kind::LowRankDelta, errc::bad_argument,
          "get_lowrank: '" + name + "' has no low-rank delta");
    return LowRankDelta{v->lr_a, v->lr_b};
}

namespace {

template <typename Fn>
void for_each_linear_name(std::size_t n_layers, Fn&& fn) {
    for (std::size_t i = 0; i < n_layers; ++i)
        for (const char* role :
             {"attn_q", "attn_k", "attn_v", "attn_o", "mlp_gate", "mlp_up", "mlp_down"})
            fn(name_of(i, role));
    fn(std::string("lm_head"));
}

} // namespace

std::vector<std::string> ViewModel::trainable_scale_names() const {
    std::vector<std::string> out;
    for_each_linear_name(layers_.size(), [&](const std::string& name) {
        const LinearView* v = find_view(name);
        if (v && v->kind == LinearView::Kind::PackedDelta) out.push_back(name);
    });
    return out;
}

std::vector<std::string> ViewModel::trainable_lowrank_names() const {
    std::vector<std::string> out;
    for_each_linear_name(layers_.size(), [&](const std::string& name) {
        const LinearView* v = find_view(name);
        if (v && v->kind == LinearView::Kind::LowRankDelta) out.push_back(name);
    });
    return out;
}

} // namespace deltakit
