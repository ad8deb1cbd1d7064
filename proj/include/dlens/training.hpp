#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "dlens/autodiff.hpp"
#include "dlens/decomposition.hpp"
#include "dlens/masks.hpp"
#include "dlens/model.hpp"
#include "dlens/util.hpp"

namespace dlens {

struct TrainConfig {
    size_t batch_size = 64;
    size_t max_epochs = 15;
    double learning_rate = 1e-2;
    double weight_decay = 1e-9;
    double l1_weight = 1.5e-4;
    // 0 disables early stopping.
    size_t early_stop_patience = 3;
    // Validation KL changes smaller than this count as ties; ties go to the later epoch.
    double min_delta = 1e-4;
    std::uint64_t seed = 0;
    float init_value = 0.9f;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    unsigned threads = 1;

    Json to_json() const;
    // Fields absent from `j` keep their value from `base`. Unknown keys are rejected.
    static TrainConfig from_json(const Json& j, const TrainConfig& base);
    void validate() const;
};

// Activations of the corrupted run, already projected onto each component's
// input singular vectors: OV [1, sum_j a_ij x_j] U, MLP_IN [1, x] U and
// MLP_OUT [1, gelu(pre)] U, each [T, r]. QK needs none.
struct CorruptCache {
    size_t length = 0;
    std::map<ComponentId, Tensor> coefficients;
};

CorruptCache build_corrupt_cache(std::span<const TokenId> corrupt_tokens, const Weights& weights, const SvdCache& svd);
CorruptCache corrupt_cache_from_activations(const ActivationCache& cache, const Weights& weights, const SvdCache& svd);

struct TracedForward {
    ad::Var logits;                     // [1, vocab] at the final position
    std::vector<ad::Var> attn_writes;   // per layer, summed over heads [T, d_model]
    std::vector<ad::Var> mlp_writes;    // per layer [T, d_model]
};

// Records the masked forward on `graph`. Components missing from `svd` run unmasked. QK uses only U diag(sigma m) V^T;
// OV, MLP_IN and MLP_OUT mix clean inputs through the masked part with the
// corrupt coefficients through the complement.
TracedForward trace_masked_forward(ad::Graph& graph, std::span<const TokenId> clean, const CorruptCache& corrupt,
                                   const Weights& weights, const SvdCache& svd,
                                   const std::map<ComponentId, ad::Var>& masks);

struct MaskedOutput {
    Tensor logits;  // [1, vocab]
    std::vector<Tensor> attn_writes, mlp_writes;
};

MaskedOutput masked_forward(std::span<const TokenId> clean, const CorruptCache& corrupt, const Weights& weights,
                            const SvdCache& svd, const MaskSet& masks);

// KL(p || q) in nats; q entries are floored at 1e-12 where p > 0, and each
// floor event increments *clamps.
double kl_divergence(std::span<const double> p, std::span<const double> q, size_t* clamps = nullptr);
// KL(p || q) + lambda * sum of all mask entries.
double mask_loss(std::span<const double> p, std::span<const double> q, const MaskSet& masks, double lambda);

struct TrainExample {
    std::vector<TokenId> clean;
    CorruptCache corrupt;
    std::vector<double> p_clean;  // full-model distribution at the final position
};

TrainExample prepare_example(std::span<const TokenId> clean, std::span<const TokenId> corrupt,
                             const Weights& weights, const SvdCache& svd);
std::vector<TrainExample> prepare_examples(const std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>>& pairs,
                                           const Weights& weights, const SvdCache& svd, unsigned threads = 1);

struct BatchEval {
    double kl = 0.0;     // mean over the batch
    double loss = 0.0;   // kl + lambda * l1
    std::map<ComponentId, Tensor> grad;
    size_t clamp_events = 0;
};

// Loss of a batch and, if `with_grad`, its gradient with respect to the mask values.
BatchEval evaluate_batch(std::span<const TrainExample* const> batch, const Weights& weights, const SvdCache& svd,
                         const MaskSet& masks, double lambda, bool with_grad, unsigned threads = 1);
double mean_kl(const std::vector<TrainExample>& examples, const Weights& weights, const SvdCache& svd,
               const MaskSet& masks, unsigned threads = 1);

struct EpochRecord {
    size_t epoch = 0;  // 1-based
    double train_kl = 0.0;
    double train_l1 = 0.0;
    double val_kl = 0.0;
    double sparsity = 0.0;  // fraction of directions with mask <= 1e-2
    size_t clamp_events = 0;
};

struct TrainResult {
    MaskSet masks;
    std::vector<EpochRecord> history;
    size_t best_epoch = 0;
    double best_val_kl = 0.0;
    bool stopped_early = false;
};

// Algorithm: AdamW on the mask values with a straight-through clamp, then
// projection back into [0,1] after every step. Returns the masks of the
// epoch selected by validation KL (the training set stands in when `val`
// is empty). Throws std::runtime_error when the loss becomes non-finite.
TrainResult train(const std::vector<TrainExample>& train_set, const std::vector<TrainExample>& val,
                  const Weights& weights, const SvdCache& svd, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace dlens
