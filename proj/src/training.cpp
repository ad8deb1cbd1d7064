#include "dlens/training.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "dlens/error.hpp"

namespace dlens {

Json TrainConfig::to_json() const {
    Json j;
    j["batch_size"] = batch_size;
    j["max_epochs"] = max_epochs;
    j["learning_rate"] = learning_rate;
    j["weight_decay"] = weight_decay;
    j["l1_weight"] = l1_weight;
    j["early_stop_patience"] = early_stop_patience;
    j["min_delta"] = min_delta;
    j["seed"] = seed;
    j["init_value"] = init_value;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    return j;
}

TrainConfig TrainConfig::from_json(const Json& j, const TrainConfig& base) {
    if (!j.is_object()) throw ValidationError("training config must be a JSON object");
    static const std::set<std::string> known = {"batch_size", "max_epochs", "learning_rate", "weight_decay",
                                                "l1_weight", "early_stop_patience", "min_delta", "seed",
                                                "init_value", "beta1", "beta2", "adam_eps", "threads"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ValidationError("unknown training config key '" + k + "'");
    TrainConfig c = base;
    try {
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.l1_weight = j.value("l1_weight", c.l1_weight);
        c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
        c.min_delta = j.value("min_delta", c.min_delta);
        c.seed = j.value("seed", c.seed);
        c.init_value = j.value("init_value", c.init_value);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.threads = j.value("threads", c.threads);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("training config: ") + e.what());
    }
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    if (max_epochs == 0) throw ValidationError("max_epochs must be positive");
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
    if (!(weight_decay >= 0)) throw ValidationError("weight_decay must be non-negative");
    if (!(l1_weight >= 0)) throw ValidationError("l1_weight must be non-negative");
    if (!(init_value >= 0.0f && init_value <= 1.0f)) throw ValidationError("init_value must lie in [0,1]");
}

namespace {

Tensor project_rows(const Tensor& x, const Tensor& u) { return matmul(prepend_ones(x), u); }

}  // namespace

CorruptCache corrupt_cache_from_activations(const ActivationCache& cache, const Weights&, const SvdCache& svd) {
    CorruptCache out;
    out.length = cache.tokens.size();
    for (const auto& [id, f] : svd) {
        if (id.layer >= cache.layers.size()) throw ValidationError("activation cache lacks layer for " + id.str());
        const auto& lc = cache.layers[id.layer];
        switch (id.kind) {
            case ComponentKind::QK: break;
            case ComponentKind::OV:
                out.coefficients[id] = project_rows(attention_weighted_input(cache, id.layer, *id.head), f.u);
                break;
            case ComponentKind::MLP_IN: out.coefficients[id] = project_rows(lc.ln2_out, f.u); break;
            case ComponentKind::MLP_OUT: out.coefficients[id] = project_rows(lc.mlp_post, f.u); break;
        }
    }
    return out;
}

CorruptCache build_corrupt_cache(std::span<const TokenId> corrupt_tokens, const Weights& w, const SvdCache& svd) {
    return corrupt_cache_from_activations(forward(corrupt_tokens, w).cache, w, svd);
}

namespace {

struct ComponentVars {
    ad::Var u, v, sigma, mask;
    size_t rank = 0;
};

// Masked part [x1 U] (sigma m) V^T + complement alt (sigma (1-m)) V^T, with
// x1 = [1, x] already prepended. `alt` may be invalid (QK-style, masked only).
ad::Var apply_component(ad::Graph& g, const ComponentVars& c, ad::Var x1, ad::Var alt, size_t out_dim) {
    const size_t T = g.value(x1).rows();
    if (c.rank == 0) return g.constant(Tensor::matrix(T, out_dim));
    ad::Var coef = g.matmul(x1, c.u);
    coef = alt.valid() ? g.blend(coef, alt, c.mask) : g.scale_cols(coef, c.mask);
    coef = g.scale_cols(coef, c.sigma);
    return g.matmul_nt(coef, c.v);
}

}  // namespace

TracedForward trace_masked_forward(ad::Graph& g, std::span<const TokenId> clean, const CorruptCache& corrupt,
                                   const Weights& w, const SvdCache& svd, const std::map<ComponentId, ad::Var>& masks) {
    const auto& cfg = w.config;
    if (clean.empty()) throw ValidationError("masked_forward: empty token sequence");
    if (corrupt.length != clean.size()) {
        throw ValidationError("masked_forward: clean length " + std::to_string(clean.size()) +
                              " != corrupt length " + std::to_string(corrupt.length));
    }
    const size_t T = clean.size();
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(cfg.d_head));

    // Components absent from `svd` are not learnable and run on the plain weights.
    auto has = [&](const ComponentId& id) { return svd.count(id) != 0; };
    auto vars = [&](const ComponentId& id) {
        const SVDFactors& f = factors_for(svd, id);
        auto it = masks.find(id);
        if (it == masks.end()) throw ValidationError("no mask for " + id.str());
        if (g.value(it->second).size() != f.rank()) throw ValidationError("mask length mismatch for " + id.str());
        return ComponentVars{g.constant_view(f.u), g.constant_view(f.v), g.constant_view(f.sigma), it->second,
                             f.rank()};
    };
    auto alt = [&](const ComponentId& id) {
        auto it = corrupt.coefficients.find(id);
        if (it == corrupt.coefficients.end()) throw ValidationError("corrupt cache has no entry for " + id.str());
        return g.constant_view(it->second);
    };

    TracedForward out;
    ad::Var resid = g.constant(embed(clean, w));
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& L = w.layers[l];
        ad::Var x = g.layer_norm(resid, g.constant_view(L.ln1_gamma), g.constant_view(L.ln1_beta), cfg.ln_eps);
        ad::Var x1 = g.prepend_ones(x);
        ad::Var attn;
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const ComponentId qk_id{ComponentKind::QK, l, h};
            ad::Var scores;
            if (!has(qk_id)) {
                ad::Var q = g.add_row(g.matmul(x, g.constant_view(L.w_q[h])), g.constant_view(L.b_q[h]));
                ad::Var k = g.add_row(g.matmul(x, g.constant_view(L.w_k[h])), g.constant_view(L.b_k[h]));
                scores = g.scale(g.matmul_nt(q, k), inv_sqrt_dh);
            } else if (const ComponentVars qk = vars(qk_id); qk.rank == 0) {
                scores = g.constant(Tensor::matrix(T, T));
            } else {
                ad::Var q = g.scale_cols(g.scale_cols(g.matmul(x1, qk.u), qk.mask), qk.sigma);
                ad::Var k = g.matmul(x1, qk.v);
                scores = g.scale(g.matmul_nt(q, k), inv_sqrt_dh);
            }
            ad::Var pattern = g.softmax_rows(scores, true);
            const ComponentId ov_id{ComponentKind::OV, l, h};
            ad::Var y;
            if (!has(ov_id)) {
                ad::Var v = g.add_row(g.matmul(g.matmul(pattern, x), g.constant_view(L.w_v[h])),
                                      g.constant_view(L.b_v[h]));
                y = g.add_row(g.matmul(v, g.constant_view(L.w_o[h])),
                              g.constant(scaled(L.b_o, 1.0f / static_cast<float>(cfg.n_heads))));
            } else {
                const ComponentVars ov = vars(ov_id);
                ad::Var nu1 = g.prepend_ones(g.matmul(pattern, x));
                y = apply_component(g, ov, nu1, ov.rank ? alt(ov_id) : ad::Var{}, cfg.d_model);
            }
            attn = attn.valid() ? g.add(attn, y) : y;
        }
        out.attn_writes.push_back(attn);
        resid = g.add(resid, attn);

        ad::Var x2 = g.layer_norm(resid, g.constant_view(L.ln2_gamma), g.constant_view(L.ln2_beta), cfg.ln_eps);
        const ComponentId in_id{ComponentKind::MLP_IN, l, std::nullopt};
        const ComponentId out_id{ComponentKind::MLP_OUT, l, std::nullopt};
        ad::Var pre;
        if (!has(in_id)) {
            pre = g.add_row(g.matmul(x2, g.constant_view(L.w_in)), g.constant_view(L.b_in));
        } else {
            const ComponentVars cin = vars(in_id);
            pre = apply_component(g, cin, g.prepend_ones(x2), cin.rank ? alt(in_id) : ad::Var{}, cfg.d_mlp);
        }
        ad::Var post = g.gelu(pre);
        ad::Var mlp;
        if (!has(out_id)) {
            mlp = g.add_row(g.matmul(post, g.constant_view(L.w_out)), g.constant_view(L.b_out));
        } else {
            const ComponentVars cout = vars(out_id);
            mlp = apply_component(g, cout, g.prepend_ones(post), cout.rank ? alt(out_id) : ad::Var{}, cfg.d_model);
        }
        out.mlp_writes.push_back(mlp);
        resid = g.add(resid, mlp);
    }
    ad::Var last = g.slice_row(resid, T - 1);
    ad::Var ln = g.layer_norm(last, g.constant_view(w.lnf_gamma), g.constant_view(w.lnf_beta), cfg.ln_eps);
    out.logits = g.add_row(g.matmul(ln, g.constant_view(w.w_u)), g.constant_view(w.b_u));
    return out;
}

MaskedOutput masked_forward(std::span<const TokenId> clean, const CorruptCache& corrupt, const Weights& w,
                            const SvdCache& svd, const MaskSet& masks) {
    if (!masks.in_range()) throw ValidationError("masked_forward: mask values outside [0,1]");
    ad::Graph g;
    std::map<ComponentId, ad::Var> mv;
    for (const auto& [id, m] : masks.masks) mv.emplace(id, g.constant_view(m));
    const TracedForward t = trace_masked_forward(g, clean, corrupt, w, svd, mv);
    MaskedOutput out;
    out.logits = g.value(t.logits);
    for (auto v : t.attn_writes) out.attn_writes.push_back(g.value(v));
    for (auto v : t.mlp_writes) out.mlp_writes.push_back(g.value(v));
    return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, size_t* clamps) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: distribution sizes differ");
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        double qi = q[i];
        if (qi < 1e-12) {
            qi = 1e-12;
            if (clamps) ++*clamps;
        }
        kl += p[i] * (std::log(p[i]) - std::log(qi));
    }
    return kl;
}

double mask_loss(std::span<const double> p, std::span<const double> q, const MaskSet& masks, double lambda) {
    return kl_divergence(p, q) + lambda * masks.l1();
}

TrainExample prepare_example(std::span<const TokenId> clean, std::span<const TokenId> corrupt, const Weights& w,
                             const SvdCache& svd) {
    if (clean.size() != corrupt.size()) {
        throw ValidationError("clean/corrupt token lengths differ (" + std::to_string(clean.size()) + " vs " +
                              std::to_string(corrupt.size()) + ")");
    }
    TrainExample ex;
    ex.clean.assign(clean.begin(), clean.end());
    ex.corrupt = build_corrupt_cache(corrupt, w, svd);
    const ForwardResult r = forward(clean, w);
    ex.p_clean = final_distribution(r.logits);
    return ex;
}

std::vector<TrainExample> prepare_examples(const std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>>& pairs,
                                           const Weights& w, const SvdCache& svd, unsigned threads) {
    std::vector<TrainExample> out(pairs.size());
    parallel_for(pairs.size(), threads,
                 [&](size_t i) { out[i] = prepare_example(pairs[i].first, pairs[i].second, w, svd); });
    return out;
}

BatchEval evaluate_batch(std::span<const TrainExample* const> batch, const Weights& w, const SvdCache& svd,
                         const MaskSet& masks, double lambda, bool with_grad, unsigned threads) {
    if (batch.empty()) throw std::invalid_argument("evaluate_batch: empty batch");
    BatchEval out;
    std::vector<double> kls(batch.size());
    std::vector<size_t> clamps(batch.size());
    std::mutex mu;
    if (with_grad)
        for (const auto& [id, m] : masks.masks) out.grad.emplace(id, Tensor(m.shape()));

    parallel_for(batch.size(), threads, [&](size_t b) {
        const TrainExample& ex = *batch[b];
        ad::Graph g;
        std::map<ComponentId, ad::Var> vars;
        std::map<ComponentId, ad::Var> params;
        for (const auto& [id, m] : masks.masks) {
            if (with_grad) {
                ad::Var p = g.parameter(m);
                params.emplace(id, p);
                vars.emplace(id, g.clamp01(p));
            } else {
                vars.emplace(id, g.constant_view(m));
            }
        }
        const TracedForward t = trace_masked_forward(g, ex.clean, ex.corrupt, w, svd, vars);
        kls[b] = kl_divergence(ex.p_clean, softmax(g.value(t.logits).values()), &clamps[b]);
        if (!with_grad) return;
        ad::Var kl = g.kl_from_logits(ex.p_clean, t.logits);
        auto grads = ad::backward(g, kl);
        std::lock_guard lock(mu);
        for (const auto& [id, p] : params) add_inplace(out.grad.at(id), grads.at(p.id));
    });

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        out.kl += kls[b] * inv_b;
        out.clamp_events += clamps[b];
    }
    out.loss = out.kl + lambda * masks.l1();
    if (with_grad) {
        for (auto& [id, gr] : out.grad)
            for (auto& v : gr.values()) v = static_cast<float>(v * inv_b + lambda);
    }
    return out;
}

double mean_kl(const std::vector<TrainExample>& examples, const Weights& w, const SvdCache& svd, const MaskSet& masks,
               unsigned threads) {
    if (examples.empty()) return 0.0;
    std::vector<const TrainExample*> ptrs;
    for (const auto& e : examples) ptrs.push_back(&e);
    return evaluate_batch(ptrs, w, svd, masks, 0.0, false, threads).kl;
}

namespace {

double fraction_inactive(const MaskSet& m, float threshold) {
    size_t n = 0, off = 0;
    for (const auto& [id, t] : m.masks)
        for (float v : t.values()) {
            ++n;
            if (v <= threshold) ++off;
        }
    return n ? static_cast<double>(off) / static_cast<double>(n) : 0.0;
}

}  // namespace

TrainResult train(const std::vector<TrainExample>& train_set, const std::vector<TrainExample>& val, const Weights& w,
                  const SvdCache& svd, const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    if (train_set.empty()) throw ValidationError("train: empty training set");
    MaskSet masks = MaskSet::filled(svd, cfg.init_value);
    std::map<ComponentId, std::vector<double>> m1, m2;
    for (const auto& [id, t] : masks.masks) {
        m1[id].assign(t.size(), 0.0);
        m2[id].assign(t.size(), 0.0);
    }
    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    const auto& val_set = val.empty() ? train_set : val;

    TrainResult result;
    result.masks = masks;
    double min_val = INFINITY;
    size_t stale = 0;
    size_t step = 0;
    for (size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double kl_sum = 0.0;
        size_t n_batches = 0, clamps = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const TrainExample*> batch;
            for (size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                batch.push_back(&train_set[order[i]]);
            const BatchEval e = evaluate_batch(batch, w, svd, masks, cfg.l1_weight, true, cfg.threads);
            if (!std::isfinite(e.loss)) {
                throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                         std::to_string(step) + ": loss is " + std::to_string(e.loss));
            }
            ++step;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (auto& [id, t] : masks.masks) {
                const Tensor& gr = e.grad.at(id);
                auto& a = m1[id];
                auto& b = m2[id];
                for (size_t k = 0; k < t.size(); ++k) {
                    const double gk = gr[k];
                    if (!std::isfinite(gk)) {
                        throw std::runtime_error("training diverged: non-finite gradient for " + id.str());
                    }
                    a[k] = cfg.beta1 * a[k] + (1 - cfg.beta1) * gk;
                    b[k] = cfg.beta2 * b[k] + (1 - cfg.beta2) * gk * gk;
                    double theta = t[k];
                    theta -= cfg.learning_rate * cfg.weight_decay * theta;
                    theta -= cfg.learning_rate * (a[k] / bc1) / (std::sqrt(b[k] / bc2) + cfg.adam_eps);
                    t[k] = static_cast<float>(std::clamp(theta, 0.0, 1.0));
                }
            }
            kl_sum += e.kl;
            clamps += e.clamp_events;
            ++n_batches;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_kl = kl_sum / static_cast<double>(n_batches);
        rec.train_l1 = masks.l1();
        rec.val_kl = mean_kl(val_set, w, svd, masks, cfg.threads);
        rec.sparsity = fraction_inactive(masks, 1e-2f);
        rec.clamp_events = clamps;
        if (!std::isfinite(rec.val_kl)) throw std::runtime_error("training diverged: validation KL is not finite");
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (rec.val_kl <= min_val + cfg.min_delta) {
            result.masks = masks;
            result.best_epoch = epoch;
            result.best_val_kl = rec.val_kl;
        }
        if (rec.val_kl < min_val - cfg.min_delta) {
            stale = 0;
        } else {
            ++stale;
        }
        min_val = std::min(min_val, rec.val_kl);
        if (cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience && epoch < cfg.max_epochs) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

}  // namespace dlens
