#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dlens/decomposition.hpp"
#include "dlens/masks.hpp"
#include "dlens/model.hpp"

namespace dlens {

struct SparsityReport {
    size_t n_active = 0;
    size_t n_learnable = 0;
    size_t n_total = 0;
    double s_rel = 0.0;
    double s_full = 0.0;
    double threshold = 1e-2;
};

inline constexpr double kActiveThreshold = 1e-2;

// n_active counts mask entries strictly greater than `threshold`.
SparsityReport sparsity(const MaskSet& masks, double threshold, size_t n_total);
// Directions before truncation: min(rows, cols) of every augmented matrix of the given kinds.
size_t total_directions(const ModelConfig& config, const std::vector<ComponentKind>& kinds);
// Learnable directions of the OV family only, and the matching OV-only total.
SparsityReport sparsity_ov_only(const MaskSet& masks, double threshold, const ModelConfig& config);

struct HeadMaskMean {
    size_t layer = 0, head = 0;
    double mean = 0.0;
    size_t rank = 0;
    std::string group;  // functional label, empty if none
};

// Head labels from the published IOI circuit (Name Mover, S-Inhibition, ...).
const std::map<std::pair<size_t, size_t>, std::string>& ioi_head_groups();

// Mean mask per (layer, head) for QK or OV, in layer/head order.
std::vector<HeadMaskMean> head_mask_summary(const MaskSet& masks, ComponentKind kind,
                                            const std::map<std::pair<size_t, size_t>, std::string>& groups = {});
// Mean of head means over heads in `heads`, and over heads not in `exclude`.
double mean_over(const std::vector<HeadMaskMean>& table, const std::set<std::pair<size_t, size_t>>& heads);
double mean_excluding(const std::vector<HeadMaskMean>& table, const std::set<std::pair<size_t, size_t>>& exclude);

// Rule table mapping token text (leading space and case ignored) to a class.
// Position 0 always maps to "first". Unmatched tokens map to "other".
class TokenClassifier {
public:
    void add_rule(const std::string& cls, const std::vector<std::string>& words);
    std::string classify(const std::string& token_text, size_t position) const;
    static TokenClassifier defaults();

private:
    std::vector<std::pair<std::string, std::set<std::string>>> rules_;
};

struct ScoredPrompt {
    std::vector<std::string> token_texts;
    Tensor x;  // post-LN attention input of the component's layer, [T, d_model]
    std::optional<size_t> target;  // position checked by the highest-attention statistic
};

struct ClassStat {
    double mean = 0.0, std = 0.0;
    size_t n = 0;
};

struct DirectionStats {
    ComponentId id;
    size_t k = 0;
    std::optional<double> mask;
    double sigma = 0.0;
    std::map<std::string, ClassStat> classes;
    std::optional<double> highest_attention_pct;
    std::vector<std::string> notes;
};

// Scores [1, x_q] sigma_k u_k v_k^T [1, x_j]^T from the final query position
// to every key j, grouped by token class. Order-invariant: per-class values
// are sorted before the two-pass mean/std. Ties for the maximum go to the
// lowest position.
DirectionStats direction_token_stats(const SVDFactors& qk, size_t k, std::span<const ScoredPrompt> prompts,
                                     const TokenClassifier& classifier, std::optional<double> mask = std::nullopt);

ClassStat stable_stats(std::vector<double> values);

}  // namespace dlens
