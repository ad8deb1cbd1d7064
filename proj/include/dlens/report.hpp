#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dlens/analysis.hpp"
#include "dlens/masks.hpp"
#include "dlens/model.hpp"
#include "dlens/util.hpp"

namespace dlens {

inline constexpr int kReportVersion = 1;

struct FidelityRow {
    std::string task;
    size_t n = 0;
    double kl_mean = 0.0, kl_std = 0.0;
    std::optional<double> accuracy_mean, accuracy_std;  // N/A for GT
    double exact_match_mean = 0.0, exact_match_std = 0.0;
    SparsityReport sparsity;
};

struct DirectionRow {
    std::string direction;  // L9.H7.SV1
    std::optional<double> mask;
    double sigma = 0.0;
    std::vector<std::string> top_tokens;
    double mu_he = 0.0, sd_he = 0.0, mu_she = 0.0, sd_she = 0.0;
};

struct InterventionRow {
    std::string experiment;
    double sigma_scale = 0.0;
    std::string context;  // "he" or "she"
    size_t n = 0;
    double baseline_mean = 0.0, baseline_std = 0.0;
    double intervened_mean = 0.0, intervened_std = 0.0;
    std::optional<double> flip_to_she, flip_to_he;
};

struct Heatmap {
    std::string name;  // file stem, [A-Za-z0-9_-]
    std::string title;
    std::vector<std::string> row_labels, col_labels;
    std::vector<std::vector<double>> values;  // [rows][cols]
};

struct ReportInputs {
    std::optional<ModelConfig> config;
    MaskSet masks;
    std::optional<SparsityReport> sparsity_all, sparsity_ov;
    std::vector<FidelityRow> fidelity;
    std::vector<DirectionRow> directions;
    std::vector<InterventionRow> interventions;
    std::vector<DirectionStats> direction_stats;
    std::vector<Heatmap> heatmaps;
    Json extra = Json::object();
};

// Files (fixed names, always written, header-only when empty):
//   fidelity.csv         task,n,kld_mean,kld_std,accuracy_mean,accuracy_std,exact_match_mean,
//                        exact_match_std,s_rel,s_full,n_active,n_learnable,n_total,threshold
//   sparsity.csv         variant,n_active,n_learnable,n_total,s_rel,s_full,threshold
//   directions.csv       direction,mask,sigma,top_tokens,mu_he,sd_he,mu_she,sd_she,diff
//   interventions.csv    experiment,sigma_scale,context,n,baseline_dlogit_mean,baseline_dlogit_std,
//                        intervened_dlogit_mean,intervened_dlogit_std,flip_to_she_pct,flip_to_he_pct
//   heads.csv            kind,layer,head,rank,mean_mask,group
//   direction_stats.csv  component,direction,mask,sigma,class,mean,std,n,highest_attention_pct
//   report.json
//   masks_qk.svg, masks_ov.svg, masks_mlp.svg   (only kinds present in the mask set)
//   heatmap_<name>.svg per heatmap
// Missing values are written as N/A. Numbers use the shortest round-trip form.
// Returns the written paths in write order.
std::vector<std::filesystem::path> export_report(const ReportInputs& in, const std::filesystem::path& out_dir);

Json to_json(const SparsityReport& s);
SparsityReport sparsity_from_json(const Json& j);
Json to_json(const FidelityRow& r);
FidelityRow fidelity_row_from_json(const Json& j);
Json to_json(const DirectionRow& r);
DirectionRow direction_row_from_json(const Json& j);
Json to_json(const InterventionRow& r);
InterventionRow intervention_row_from_json(const Json& j);
Json to_json(const DirectionStats& d);
DirectionStats direction_stats_from_json(const Json& j);
Json to_json(const Heatmap& h);
Heatmap heatmap_from_json(const Json& j);

std::string interventions_csv(const std::vector<InterventionRow>& rows);

// Shortest decimal string that parses back to exactly `v`.
std::string format_number(double v);

std::string render_mask_grid_svg(const MaskSet& masks, const std::vector<ComponentKind>& kinds, const std::string& title);
std::string render_heatmap_svg(const Heatmap& h);

}  // namespace dlens
