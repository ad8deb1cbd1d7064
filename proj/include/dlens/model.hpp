#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"

#include "dlens/archive.hpp"
#include "dlens/tensor.hpp"
#include "dlens/tokenizer.hpp"

namespace dlens {

struct ModelConfig {
    size_t n_layers = 12;
    size_t n_heads = 12;
    size_t d_model = 768;
    size_t d_head = 64;
    size_t d_mlp = 3072;
    size_t vocab_size = 50257;
    size_t max_positions = 1024;
    float ln_eps = 1e-5f;

    static ModelConfig gpt2_small() { return {}; }
    // Throws ValidationError unless d_model == n_heads * d_head and all sizes are positive.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// HF-style keys: n_layer, n_head, n_embd, n_inner, vocab_size, n_positions, layer_norm_epsilon.
ModelConfig config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json config_to_json(const ModelConfig& config);
ModelConfig read_config(const std::filesystem::path& config_json);
void write_config(const std::filesystem::path& config_json, const ModelConfig& config);

// Row-vector convention throughout: y = x W + b.
struct LayerWeights {
    Tensor ln1_gamma, ln1_beta;
    std::vector<Tensor> w_q, w_k, w_v;  // per head [d_model, d_head]
    std::vector<Tensor> b_q, b_k, b_v;  // per head [d_head]
    std::vector<Tensor> w_o;            // per head [d_head, d_model]
    Tensor b_o;                         // [d_model], shared by all heads
    Tensor ln2_gamma, ln2_beta;
    Tensor w_in, b_in;    // [d_model, d_mlp], [d_mlp]
    Tensor w_out, b_out;  // [d_mlp, d_model], [d_model]
};

struct Weights {
    ModelConfig config;
    Tensor token_embedding;     // [vocab, d_model]
    Tensor position_embedding;  // [max_positions, d_model]
    std::vector<LayerWeights> layers;
    Tensor lnf_gamma, lnf_beta;
    Tensor w_u;  // [d_model, vocab]
    Tensor b_u;  // [vocab]
};

// Loads GPT-2 checkpoint names (h.{l}.attn.c_attn.weight, ...), optionally
// prefixed with "transformer.". Fused QKV projections are split per head.
Weights load_weights(const std::filesystem::path& archive_path, const ModelConfig& config);
Weights weights_from_archive(const TensorArchive& archive, const ModelConfig& config);
// Inverse of weights_from_archive (re-fuses QKV in checkpoint layout).
TensorArchive weights_to_archive(const Weights& weights);
void save_weights(const std::filesystem::path& archive_path, const Weights& weights);

struct LayerCache {
    Tensor resid_pre;             // [T, d_model]
    Tensor ln1_out;               // post-LN attention input x
    std::vector<Tensor> pattern;  // per head [T, T], causal
    std::vector<Tensor> head_out; // per head y^(h) [T, d_model], includes b_O / n_heads
    Tensor resid_mid;
    Tensor ln2_out;   // MLP input
    Tensor mlp_pre;   // x W_in + b_in
    Tensor mlp_post;  // gelu(mlp_pre)
    Tensor mlp_out;
    Tensor resid_post;
};

struct ActivationCache {
    std::vector<TokenId> tokens;
    std::vector<LayerCache> layers;
    Tensor final_resid;  // pre-final-LN residual stream [T, d_model]
    Tensor logits;       // [T, vocab]
};

struct ForwardResult {
    Tensor logits;
    ActivationCache cache;
};

ForwardResult forward(std::span<const TokenId> tokens, const Weights& weights);
// Embedding rows (token + position) for a prompt.
Tensor embed(std::span<const TokenId> tokens, const Weights& weights);
// Final LayerNorm + unembedding of one residual row.
Tensor readout(std::span<const float> resid_row, const Weights& weights);
// sum_j alpha_ij x_j for one head: [T, d_model].
Tensor attention_weighted_input(const ActivationCache& cache, size_t layer, size_t head);
// Probabilities at the final position, computed in double.
std::vector<double> final_distribution(const Tensor& logits);
std::vector<double> softmax(std::span<const float> logits);

}  // namespace dlens
