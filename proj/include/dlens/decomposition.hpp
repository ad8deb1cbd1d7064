#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlens/model.hpp"
#include "dlens/tensor.hpp"

namespace dlens {

enum class ComponentKind { QK, OV, MLP_IN, MLP_OUT };

// "qk", "ov", "mlp_in", "mlp_out".
std::string kind_name(ComponentKind kind);
ComponentKind parse_kind(const std::string& name);
inline bool is_attention(ComponentKind k) { return k == ComponentKind::QK || k == ComponentKind::OV; }

struct ComponentId {
    ComponentKind kind = ComponentKind::QK;
    size_t layer = 0;
    std::optional<size_t> head;

    // "L9.H6.qk" or "L3.mlp_in".
    std::string str() const;
    static ComponentId parse(const std::string& s);
    auto operator<=>(const ComponentId&) const = default;
};

// Every component of a model for the selected kinds, in (layer, kind, head) order.
std::vector<ComponentId> all_components(const ModelConfig& config, const std::vector<ComponentKind>& kinds);

struct AugmentedMatrix {
    ComponentId id;
    Tensor matrix;
    // Optional exact factorization matrix = left * right (QK and OV), used
    // to decompose without touching the (1+d) x (1+d) product.
    Tensor left, right;
    bool factored() const { return !left.empty(); }
};

// QK: [[b_Q b_K^T, b_Q W_K^T], [W_Q b_K^T, W_Q W_K^T]]           (1+d) x (1+d)
// OV: [[b_V W_O + b_O / n_heads], [W_V W_O]]                      (1+d) x d
// MLP_IN: [[b_in], [W_in]]   MLP_OUT: [[b_out], [W_out]]
AugmentedMatrix build_augmented(const Weights& weights, ComponentKind kind, size_t layer,
                                std::optional<size_t> head = std::nullopt);
AugmentedMatrix build_augmented(const Weights& weights, const ComponentId& id);

struct SVDFactors {
    ComponentId id;
    Tensor u;      // [m, r]
    Tensor sigma;  // [r]
    Tensor v;      // [n, r]
    double rank_tol = 0.0;

    size_t rank() const { return sigma.size(); }
    size_t in_dim() const { return u.shape()[0]; }
    size_t out_dim() const { return v.shape()[0]; }
    Tensor reconstruct() const;
};

inline constexpr double kDefaultRankTol = 1e-6;
inline constexpr const char* kSignConvention = "max_abs_u_positive";

// Thin SVD in fp64, truncated where sigma_k < rank_tol * sigma_1. Each u_k
// has its largest-magnitude entry made positive (v_k flipped to match).
SVDFactors svd(const AugmentedMatrix& aug, double rank_tol = kDefaultRankTol);

// U diag(sigma * mask) V^T and U diag(sigma * (1 - mask)) V^T.
Tensor masked_reconstruct(const SVDFactors& f, const Tensor& mask);
Tensor complement_reconstruct(const SVDFactors& f, const Tensor& mask);

// [1, x_i] sigma_k u_k v_k^T [1, x_j]^T for a QK component.
double direction_attention_score(const SVDFactors& f, size_t k, std::span<const float> x_i,
                                 std::span<const float> x_j);

// One archive + JSON sidecar per component under `dir`.
using SvdCache = std::map<ComponentId, SVDFactors>;

std::string cache_stem(const ComponentId& id);
void save_factors(const std::filesystem::path& dir, const SVDFactors& f);
SVDFactors load_factors(const std::filesystem::path& dir, const ComponentId& id);
// Loads every component present in `dir`.
SvdCache load_svd_cache(const std::filesystem::path& dir);
// Decomposes the selected components. `threads` > 1 runs components concurrently.
SvdCache decompose(const Weights& weights, const std::vector<ComponentKind>& kinds, double rank_tol = kDefaultRankTol,
                   unsigned threads = 1);

const SVDFactors& factors_for(const SvdCache& cache, const ComponentId& id);

}  // namespace dlens
