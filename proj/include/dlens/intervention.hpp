#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlens/decomposition.hpp"
#include "dlens/model.hpp"
#include "dlens/util.hpp"

namespace dlens {

enum class Gender { He, She };

std::string gender_name(Gender g);
Gender parse_gender(const std::string& s);

// OV direction, written L{layer}.H{head}.SV{k} with k 0-based.
struct DirectionRef {
    size_t layer = 0, head = 0, direction = 0;

    std::string str() const;
    static DirectionRef parse(const std::string& s);
    ComponentId component() const { return {ComponentKind::OV, layer, head}; }
    auto operator<=>(const DirectionRef&) const = default;
};

struct LogitReceptor {
    DirectionRef dir;
    float sigma = 0.0f;
    Tensor receptor;                 // v_k^T W_U, [vocab]
    std::vector<TokenId> top_tokens; // by descending receptor value
};

LogitReceptor logit_receptor(const SVDFactors& ov, size_t k, const Weights& weights, size_t top_n = 10);

// nu^T u_k with nu = [1, sum_j a_ij x_j] at `position` (default: final token).
double direction_activation(const ActivationCache& cache, const SVDFactors& ov, size_t k,
                            std::optional<size_t> position = std::nullopt);

struct ConditionalMeans {
    double mu_he = 0.0, mu_she = 0.0;
    double sd_he = 0.0, sd_she = 0.0;  // population standard deviation
    size_t n_he = 0, n_she = 0;
    double diff() const { return mu_he - mu_she; }
};

// Throws ValidationError if either class is empty.
ConditionalMeans conditional_means(std::span<const double> activations, std::span<const Gender> labels);

struct InterventionEdit {
    size_t layer = 0, head = 0, direction = 0;
    double mu_he = 0.0, mu_she = 0.0;
};

struct InterventionSpec {
    std::vector<InterventionEdit> edits;
    Gender target = Gender::He;
    double sigma_scale = 1.0;

    // {edits:[{layer,head,direction,mu_he,mu_she}], target:"he"|"she", sigma_scale}.
    // Invalid fields are named in the ValidationError message.
    static InterventionSpec from_json(const Json& j);
    Json to_json() const;
    // Every edit must name a direction present in `svd`.
    void check_against(const SvdCache& svd) const;
};

struct InterventionResult {
    Tensor baseline;     // [1, vocab]
    Tensor intervened;   // [1, vocab]
    Tensor delta_r;      // [d_model]
    std::vector<double> activations;  // a_i per edit
};

// Delta R = sum_i (a'_i - a_i) (sigma_scale sigma_i) v_i, added to the
// pre-final-LN residual at the last token. Later layers are not re-run.
Tensor intervention_delta(const ActivationCache& cache, const SvdCache& svd, const InterventionSpec& spec,
                          std::vector<double>* activations = nullptr);
InterventionResult apply_intervention(const ActivationCache& cache, const Weights& weights, const SvdCache& svd,
                                      const InterventionSpec& spec);
InterventionResult apply_intervention(std::span<const TokenId> tokens, const Weights& weights, const SvdCache& svd,
                                      const InterventionSpec& spec);

enum class Prediction { He, She, Other };
// Full-vocabulary argmax, classified.
Prediction classify_prediction(const Tensor& logits, TokenId he, TokenId she);

struct FlipReport {
    size_t n = 0;
    double baseline_mean = 0.0, baseline_std = 0.0;
    double intervened_mean = 0.0, intervened_std = 0.0;
    size_t baseline_he = 0, baseline_she = 0, baseline_other = 0;
    // Percentages; empty when the corresponding baseline class is empty.
    std::optional<double> flip_to_she, flip_to_he;
};

// Delta logit = logit(correct pronoun) - logit(opposite pronoun), per the prompt label.
FlipReport flip_metrics(std::span<const Tensor> baseline, std::span<const Tensor> intervened,
                        std::span<const Gender> labels, TokenId he, TokenId she);

}  // namespace dlens
