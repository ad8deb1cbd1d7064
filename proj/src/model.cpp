#include "dlens/model.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "dlens/error.hpp"
#include "json.hpp"

namespace dlens {

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || d_head == 0 || d_mlp == 0 || vocab_size == 0 || max_positions == 0) {
        throw ValidationError("model config: all sizes must be positive");
    }
    if (d_model != n_heads * d_head) {
        throw ValidationError("model config: d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                              std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
    }
}

ModelConfig config_from_json(const nlohmann::ordered_json& j) {
    if (!j.is_object()) throw ValidationError("model config: expected a JSON object");
    ModelConfig c;
    c.n_layers = j.value("n_layer", c.n_layers);
    c.n_heads = j.value("n_head", c.n_heads);
    c.d_model = j.value("n_embd", c.d_model);
    c.d_head = c.d_model / c.n_heads;
    c.d_mlp = (j.contains("n_inner") && !j["n_inner"].is_null()) ? j["n_inner"].get<size_t>() : 4 * c.d_model;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_positions = j.value("n_positions", c.max_positions);
    c.ln_eps = j.value("layer_norm_epsilon", c.ln_eps);
    c.validate();
    return c;
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["n_layer"] = c.n_layers;
    j["n_head"] = c.n_heads;
    j["n_embd"] = c.d_model;
    j["n_inner"] = c.d_mlp;
    j["vocab_size"] = c.vocab_size;
    j["n_positions"] = c.max_positions;
    j["layer_norm_epsilon"] = c.ln_eps;
    return j;
}

ModelConfig read_config(const std::filesystem::path& config_json) {
    std::ifstream in(config_json);
    if (!in) throw ValidationError("cannot open " + config_json.string());
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed config.json: " + std::string(e.what()));
    }
    return config_from_json(j);
}

void write_config(const std::filesystem::path& config_json, const ModelConfig& c) {
    std::ofstream out(config_json);
    out << config_to_json(c).dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + config_json.string());
}

namespace {

std::string layer_key(size_t l, const char* suffix) { return "h." + std::to_string(l) + "." + suffix; }

const Tensor& fetch(const TensorArchive& a, const std::string& name, const std::vector<size_t>& shape) {
    const Tensor* t = nullptr;
    if (auto it = a.tensors.find(name); it != a.tensors.end()) {
        t = &it->second;
    } else if (auto jt = a.tensors.find("transformer." + name); jt != a.tensors.end()) {
        t = &jt->second;
    } else {
        throw ValidationError("missing tensor: " + name);
    }
    if (t->shape() != shape) {
        throw ValidationError("shape mismatch for " + name + ": expected " + Tensor(shape).shape_str() +
                              ", got " + t->shape_str());
    }
    return *t;
}

Tensor flat(const Tensor& t) { return t.reshaped({t.size()}); }

}  // namespace

Weights weights_from_archive(const TensorArchive& a, const ModelConfig& config) {
    config.validate();
    const size_t d = config.d_model, dh = config.d_head, H = config.n_heads, dm = config.d_mlp;
    const size_t V = config.vocab_size;
    Weights w;
    w.config = config;
    w.token_embedding = fetch(a, "wte.weight", {V, d});
    w.position_embedding = fetch(a, "wpe.weight", {config.max_positions, d});
    w.layers.resize(config.n_layers);
    for (size_t l = 0; l < config.n_layers; ++l) {
        auto& L = w.layers[l];
        L.ln1_gamma = fetch(a, layer_key(l, "ln_1.weight"), {d});
        L.ln1_beta = fetch(a, layer_key(l, "ln_1.bias"), {d});
        const Tensor& qkv = fetch(a, layer_key(l, "attn.c_attn.weight"), {d, 3 * d});
        const Tensor& qkv_b = fetch(a, layer_key(l, "attn.c_attn.bias"), {3 * d});
        const Tensor& proj = fetch(a, layer_key(l, "attn.c_proj.weight"), {d, d});
        for (size_t h = 0; h < H; ++h) {
            L.w_q.push_back(slice_cols(qkv, h * dh, (h + 1) * dh));
            L.w_k.push_back(slice_cols(qkv, d + h * dh, d + (h + 1) * dh));
            L.w_v.push_back(slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh));
            auto bias_slice = [&](size_t off) {
                Tensor b = Tensor::vector(dh);
                for (size_t i = 0; i < dh; ++i) b[i] = qkv_b[off + h * dh + i];
                return b;
            };
            L.b_q.push_back(bias_slice(0));
            L.b_k.push_back(bias_slice(d));
            L.b_v.push_back(bias_slice(2 * d));
            L.w_o.push_back(slice_rows(proj, h * dh, (h + 1) * dh));
        }
        L.b_o = fetch(a, layer_key(l, "attn.c_proj.bias"), {d});
        L.ln2_gamma = fetch(a, layer_key(l, "ln_2.weight"), {d});
        L.ln2_beta = fetch(a, layer_key(l, "ln_2.bias"), {d});
        L.w_in = fetch(a, layer_key(l, "mlp.c_fc.weight"), {d, dm});
        L.b_in = fetch(a, layer_key(l, "mlp.c_fc.bias"), {dm});
        L.w_out = fetch(a, layer_key(l, "mlp.c_proj.weight"), {dm, d});
        L.b_out = fetch(a, layer_key(l, "mlp.c_proj.bias"), {d});
    }
    w.lnf_gamma = fetch(a, "ln_f.weight", {d});
    w.lnf_beta = fetch(a, "ln_f.bias", {d});
    if (a.contains("lm_head.weight")) {
        w.w_u = transpose(fetch(a, "lm_head.weight", {V, d}));
    } else {
        w.w_u = transpose(w.token_embedding);
    }
    w.b_u = a.contains("lm_head.bias") ? fetch(a, "lm_head.bias", {V}) : Tensor::vector(V);
    return w;
}

Weights load_weights(const std::filesystem::path& archive_path, const ModelConfig& config) {
    return weights_from_archive(read_archive(archive_path), config);
}

TensorArchive weights_to_archive(const Weights& w) {
    const auto& c = w.config;
    const size_t d = c.d_model, dh = c.d_head;
    TensorArchive a;
    a.metadata["format"] = "pt";
    a.tensors["wte.weight"] = w.token_embedding;
    a.tensors["wpe.weight"] = w.position_embedding;
    for (size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = w.layers[l];
        a.tensors[layer_key(l, "ln_1.weight")] = L.ln1_gamma;
        a.tensors[layer_key(l, "ln_1.bias")] = L.ln1_beta;
        Tensor qkv = Tensor::matrix(d, 3 * d);
        Tensor qkv_b = Tensor::vector(3 * d);
        Tensor proj = Tensor::matrix(d, d);
        for (size_t h = 0; h < c.n_heads; ++h) {
            for (size_t i = 0; i < d; ++i) {
                for (size_t j = 0; j < dh; ++j) {
                    qkv(i, h * dh + j) = L.w_q[h](i, j);
                    qkv(i, d + h * dh + j) = L.w_k[h](i, j);
                    qkv(i, 2 * d + h * dh + j) = L.w_v[h](i, j);
                }
            }
            for (size_t j = 0; j < dh; ++j) {
                qkv_b[h * dh + j] = L.b_q[h][j];
                qkv_b[d + h * dh + j] = L.b_k[h][j];
                qkv_b[2 * d + h * dh + j] = L.b_v[h][j];
                for (size_t i = 0; i < d; ++i) proj(h * dh + j, i) = L.w_o[h](j, i);
            }
        }
        a.tensors[layer_key(l, "attn.c_attn.weight")] = std::move(qkv);
        a.tensors[layer_key(l, "attn.c_attn.bias")] = std::move(qkv_b);
        a.tensors[layer_key(l, "attn.c_proj.weight")] = std::move(proj);
        a.tensors[layer_key(l, "attn.c_proj.bias")] = flat(L.b_o);
        a.tensors[layer_key(l, "ln_2.weight")] = L.ln2_gamma;
        a.tensors[layer_key(l, "ln_2.bias")] = L.ln2_beta;
        a.tensors[layer_key(l, "mlp.c_fc.weight")] = L.w_in;
        a.tensors[layer_key(l, "mlp.c_fc.bias")] = flat(L.b_in);
        a.tensors[layer_key(l, "mlp.c_proj.weight")] = L.w_out;
        a.tensors[layer_key(l, "mlp.c_proj.bias")] = flat(L.b_out);
    }
    a.tensors["ln_f.weight"] = w.lnf_gamma;
    a.tensors["ln_f.bias"] = w.lnf_beta;
    const Tensor tied = transpose(w.token_embedding);
    if (!(tied == w.w_u)) a.tensors["lm_head.weight"] = transpose(w.w_u);
    bool bias_nonzero = false;
    for (float v : w.b_u.values()) bias_nonzero |= v != 0.0f;
    if (bias_nonzero) a.tensors["lm_head.bias"] = flat(w.b_u);
    return a;
}

void save_weights(const std::filesystem::path& archive_path, const Weights& weights) {
    write_archive(archive_path, weights_to_archive(weights));
}

Tensor embed(std::span<const TokenId> tokens, const Weights& w) {
    const auto& c = w.config;
    if (tokens.size() > c.max_positions) {
        throw ValidationError("sequence too long: " + std::to_string(tokens.size()) + " > max_positions " +
                              std::to_string(c.max_positions));
    }
    Tensor x = Tensor::matrix(tokens.size(), c.d_model);
    for (size_t i = 0; i < tokens.size(); ++i) {
        const TokenId t = tokens[i];
        if (t < 0 || static_cast<size_t>(t) >= c.vocab_size) {
            throw ValidationError("unknown token id " + std::to_string(t));
        }
        const auto te = w.token_embedding.row(static_cast<size_t>(t));
        const auto pe = w.position_embedding.row(i);
        auto r = x.row(i);
        for (size_t j = 0; j < c.d_model; ++j) r[j] = te[j] + pe[j];
    }
    return x;
}

Tensor readout(std::span<const float> resid_row, const Weights& w) {
    Tensor x({1, resid_row.size()}, std::vector<float>(resid_row.begin(), resid_row.end()));
    Tensor logits = matmul(layer_norm(x, w.lnf_gamma, w.lnf_beta, w.config.ln_eps), w.w_u);
    add_row_inplace(logits, w.b_u.values());
    return logits;
}

ForwardResult forward(std::span<const TokenId> tokens, const Weights& w) {
    const auto& c = w.config;
    if (tokens.empty()) throw ValidationError("forward: empty token sequence");
    const size_t T = tokens.size();
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(c.d_head));
    const float head_share = 1.0f / static_cast<float>(c.n_heads);

    ForwardResult result;
    auto& cache = result.cache;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.layers.resize(c.n_layers);

    Tensor resid = embed(tokens, w);
    for (size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = w.layers[l];
        auto& lc = cache.layers[l];
        lc.resid_pre = resid;
        lc.ln1_out = layer_norm(resid, L.ln1_gamma, L.ln1_beta, c.ln_eps);
        Tensor attn_total = Tensor::matrix(T, c.d_model);
        for (size_t h = 0; h < c.n_heads; ++h) {
            Tensor q = matmul(lc.ln1_out, L.w_q[h]);
            add_row_inplace(q, L.b_q[h].values());
            Tensor k = matmul(lc.ln1_out, L.w_k[h]);
            add_row_inplace(k, L.b_k[h].values());
            Tensor v = matmul(lc.ln1_out, L.w_v[h]);
            add_row_inplace(v, L.b_v[h].values());
            Tensor pattern = softmax_rows(scaled(matmul_nt(q, k), inv_sqrt_dh), true);
            Tensor y = matmul(matmul(pattern, v), L.w_o[h]);
            for (size_t i = 0; i < T; ++i)
                for (size_t j = 0; j < c.d_model; ++j) y(i, j) += head_share * L.b_o[j];
            add_inplace(attn_total, y);
            lc.pattern.push_back(std::move(pattern));
            lc.head_out.push_back(std::move(y));
        }
        resid = add(resid, attn_total);
        lc.resid_mid = resid;
        lc.ln2_out = layer_norm(resid, L.ln2_gamma, L.ln2_beta, c.ln_eps);
        lc.mlp_pre = matmul(lc.ln2_out, L.w_in);
        add_row_inplace(lc.mlp_pre, L.b_in.values());
        lc.mlp_post = gelu(lc.mlp_pre);
        lc.mlp_out = matmul(lc.mlp_post, L.w_out);
        add_row_inplace(lc.mlp_out, L.b_out.values());
        resid = add(resid, lc.mlp_out);
        lc.resid_post = resid;
    }
    cache.final_resid = resid;
    result.logits = Tensor::matrix(T, c.vocab_size);
    for (size_t i = 0; i < T; ++i) {
        Tensor row = readout(resid.row(i), w);
        std::copy(row.data(), row.data() + row.size(), result.logits.row(i).data());
    }
    cache.logits = result.logits;
    return result;
}

Tensor attention_weighted_input(const ActivationCache& cache, size_t layer, size_t head) {
    const auto& lc = cache.layers.at(layer);
    return matmul(lc.pattern.at(head), lc.ln1_out);
}

std::vector<double> softmax(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) s += (p[i] = std::exp(logits[i] - mx));
    for (auto& v : p) v /= s;
    return p;
}

std::vector<double> final_distribution(const Tensor& logits) { return softmax(logits.row(logits.rows() - 1)); }

}  // namespace dlens
