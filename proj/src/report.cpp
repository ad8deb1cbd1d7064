#include "dlens/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "dlens/error.hpp"

namespace dlens {

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_number(*v) : "N/A"; }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += csv_field(fields[i]);
    }
    return out + "\n";
}

std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '&': o += "&amp;"; break;
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

std::string fixed(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string rgb(double r, double g, double b) {
    auto c = [](double x) { return static_cast<int>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c(r), c(g), c(b));
    return buf;
}

// 0 -> near white, 1 -> dark blue.
std::string mask_color(double m) {
    m = std::clamp(m, 0.0, 1.0);
    return rgb(0.97 + (0.03 - 0.97) * m, 0.98 + (0.19 - 0.98) * m, 1.0 + (0.42 - 1.0) * m);
}

// Diverging: negative red, positive blue, t in [-1, 1].
std::string diverging_color(double t) {
    t = std::clamp(t, -1.0, 1.0);
    if (t >= 0) return rgb(1.0 - 0.85 * t, 1.0 - 0.7 * t, 1.0 - 0.2 * t);
    t = -t;
    return rgb(1.0 - 0.2 * t, 1.0 - 0.8 * t, 1.0 - 0.85 * t);
}

std::string svg_open(double w, double h) {
    return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
           fixed(w, 0) + "\" height=\"" + fixed(h, 0) + "\" viewBox=\"0 0 " + fixed(w, 0) + " " + fixed(h, 0) +
           "\">\n<rect x=\"0\" y=\"0\" width=\"" + fixed(w, 0) + "\" height=\"" + fixed(h, 0) +
           "\" fill=\"#ffffff\"/>\n";
}

std::string text(double x, double y, const std::string& s, int size = 11, const char* anchor = "start") {
    return "<text x=\"" + fixed(x, 1) + "\" y=\"" + fixed(y, 1) + "\" font-family=\"sans-serif\" font-size=\"" +
           std::to_string(size) + "\" text-anchor=\"" + anchor + "\">" + xml_escape(s) + "</text>\n";
}

std::string rect(double x, double y, double w, double h, const std::string& fill) {
    return "<rect x=\"" + fixed(x) + "\" y=\"" + fixed(y) + "\" width=\"" + fixed(w) + "\" height=\"" + fixed(h) +
           "\" fill=\"" + fill + "\"/>\n";
}

std::optional<double> opt_from(const Json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
}

Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

std::string render_mask_grid_svg(const MaskSet& masks, const std::vector<ComponentKind>& kinds, const std::string& title) {
    std::vector<const std::pair<const ComponentId, Tensor>*> items;
    size_t max_layer = 0, max_col = 0;
    const bool attention = std::all_of(kinds.begin(), kinds.end(), is_attention);
    for (const auto& entry : masks.masks) {
        if (std::find(kinds.begin(), kinds.end(), entry.first.kind) == kinds.end()) continue;
        items.push_back(&entry);
        max_layer = std::max(max_layer, entry.first.layer);
        const size_t col = attention ? entry.first.head.value_or(0)
                                     : static_cast<size_t>(entry.first.kind == ComponentKind::MLP_OUT);
        max_col = std::max(max_col, col);
    }
    const double cell_w = 96, cell_h = 24, gap = 4, left = 48, top = 44;
    const size_t n_rows = items.empty() ? 0 : max_layer + 1, n_cols = items.empty() ? 0 : max_col + 1;
    const double w = left + static_cast<double>(n_cols) * (cell_w + gap) + 70;
    const double h = top + static_cast<double>(n_rows) * (cell_h + gap) + 16;
    std::string s = svg_open(std::max(w, 240.0), std::max(h, 60.0));
    s += text(8, 18, title, 13);
    for (size_t c = 0; c < n_cols; ++c) {
        const std::string label = attention ? "H" + std::to_string(c) : (c == 0 ? "mlp_in" : "mlp_out");
        s += text(left + static_cast<double>(c) * (cell_w + gap) + cell_w / 2, top - 6, label, 10, "middle");
    }
    for (size_t r = 0; r < n_rows; ++r)
        s += text(left - 6, top + static_cast<double>(r) * (cell_h + gap) + cell_h / 2 + 4, "L" + std::to_string(r), 10,
                  "end");
    for (const auto* e : items) {
        const auto& [id, m] = *e;
        const size_t col = attention ? id.head.value_or(0) : static_cast<size_t>(id.kind == ComponentKind::MLP_OUT);
        const double x0 = left + static_cast<double>(col) * (cell_w + gap);
        const double y0 = top + static_cast<double>(id.layer) * (cell_h + gap);
        s += "<g id=\"" + id.str() + "\">\n";
        s += rect(x0, y0, cell_w, cell_h, "#eeeeee");
        const size_t r = m.size();
        for (size_t k = 0; k < r; ++k) {
            const double sw = cell_w / static_cast<double>(r);
            s += rect(x0 + static_cast<double>(k) * sw, y0, sw, cell_h, mask_color(m[k]));
        }
        s += "</g>\n";
    }
    // Legend.
    const double lx = left + static_cast<double>(n_cols) * (cell_w + gap) + 12;
    for (int i = 0; i <= 10; ++i) s += rect(lx, top + (10 - i) * 8.0, 14, 8, mask_color(i / 10.0));
    s += text(lx + 18, top + 8, "1", 9);
    s += text(lx + 18, top + 88, "0", 9);
    s += "</svg>\n";
    return s;
}

std::string render_heatmap_svg(const Heatmap& hm) {
    const size_t R = hm.values.size(), C = R ? hm.values[0].size() : 0;
    for (const auto& row : hm.values)
        if (row.size() != C) throw std::invalid_argument("heatmap '" + hm.name + "': ragged rows");
    double max_abs = 0.0;
    for (const auto& row : hm.values)
        for (double v : row)
            if (std::isfinite(v)) max_abs = std::max(max_abs, std::fabs(v));
    const double cell = 28, left = 110, top = 110;
    const double w = left + static_cast<double>(C) * cell + 20, h = top + static_cast<double>(R) * cell + 20;
    std::string s = svg_open(std::max(w, 240.0), std::max(h, 140.0));
    s += text(8, 18, hm.title, 13);
    for (size_t c = 0; c < C && c < hm.col_labels.size(); ++c) {
        const double x = left + static_cast<double>(c) * cell + cell / 2, y = top - 6;
        s += "<text x=\"" + fixed(x, 1) + "\" y=\"" + fixed(y, 1) +
             "\" font-family=\"sans-serif\" font-size=\"10\" transform=\"rotate(-60 " + fixed(x, 1) + " " + fixed(y, 1) +
             ")\">" + xml_escape(hm.col_labels[c]) + "</text>\n";
    }
    for (size_t r = 0; r < R; ++r) {
        if (r < hm.row_labels.size())
            s += text(left - 6, top + static_cast<double>(r) * cell + cell / 2 + 4, hm.row_labels[r], 10, "end");
        for (size_t c = 0; c < C; ++c) {
            const double v = hm.values[r][c];
            const double t = max_abs > 0 && std::isfinite(v) ? v / max_abs : 0.0;
            s += rect(left + static_cast<double>(c) * cell, top + static_cast<double>(r) * cell, cell, cell,
                      diverging_color(t));
        }
    }
    s += "</svg>\n";
    return s;
}

Json to_json(const SparsityReport& s) {
    return {{"n_active", s.n_active}, {"n_learnable", s.n_learnable}, {"n_total", s.n_total},
            {"s_rel", s.s_rel},       {"s_full", s.s_full},           {"threshold", s.threshold}};
}

SparsityReport sparsity_from_json(const Json& j) {
    SparsityReport s;
    s.n_active = j.at("n_active").get<size_t>();
    s.n_learnable = j.at("n_learnable").get<size_t>();
    s.n_total = j.at("n_total").get<size_t>();
    s.s_rel = j.at("s_rel").get<double>();
    s.s_full = j.at("s_full").get<double>();
    s.threshold = j.at("threshold").get<double>();
    return s;
}

Json to_json(const FidelityRow& r) {
    return {{"task", r.task},
            {"n", r.n},
            {"kld_mean", r.kl_mean},
            {"kld_std", r.kl_std},
            {"accuracy_mean", opt_json(r.accuracy_mean)},
            {"accuracy_std", opt_json(r.accuracy_std)},
            {"exact_match_mean", r.exact_match_mean},
            {"exact_match_std", r.exact_match_std},
            {"sparsity", to_json(r.sparsity)}};
}

FidelityRow fidelity_row_from_json(const Json& j) {
    FidelityRow r;
    r.task = j.at("task").get<std::string>();
    r.n = j.at("n").get<size_t>();
    r.kl_mean = j.at("kld_mean").get<double>();
    r.kl_std = j.at("kld_std").get<double>();
    r.accuracy_mean = opt_from(j, "accuracy_mean");
    r.accuracy_std = opt_from(j, "accuracy_std");
    r.exact_match_mean = j.at("exact_match_mean").get<double>();
    r.exact_match_std = j.at("exact_match_std").get<double>();
    if (j.contains("sparsity")) r.sparsity = sparsity_from_json(j["sparsity"]);
    return r;
}

Json to_json(const DirectionRow& r) {
    return {{"direction", r.direction}, {"mask", opt_json(r.mask)}, {"sigma", r.sigma},
            {"top_tokens", r.top_tokens}, {"mu_he", r.mu_he},       {"sd_he", r.sd_he},
            {"mu_she", r.mu_she},       {"sd_she", r.sd_she},       {"diff", r.mu_he - r.mu_she}};
}

DirectionRow direction_row_from_json(const Json& j) {
    DirectionRow r;
    r.direction = j.at("direction").get<std::string>();
    r.mask = opt_from(j, "mask");
    r.sigma = j.at("sigma").get<double>();
    r.top_tokens = j.at("top_tokens").get<std::vector<std::string>>();
    r.mu_he = j.at("mu_he").get<double>();
    r.sd_he = j.at("sd_he").get<double>();
    r.mu_she = j.at("mu_she").get<double>();
    r.sd_she = j.at("sd_she").get<double>();
    return r;
}

Json to_json(const InterventionRow& r) {
    return {{"experiment", r.experiment},
            {"sigma_scale", r.sigma_scale},
            {"context", r.context},
            {"n", r.n},
            {"baseline_dlogit_mean", r.baseline_mean},
            {"baseline_dlogit_std", r.baseline_std},
            {"intervened_dlogit_mean", r.intervened_mean},
            {"intervened_dlogit_std", r.intervened_std},
            {"flip_to_she_pct", opt_json(r.flip_to_she)},
            {"flip_to_he_pct", opt_json(r.flip_to_he)}};
}

InterventionRow intervention_row_from_json(const Json& j) {
    InterventionRow r;
    r.experiment = j.at("experiment").get<std::string>();
    r.sigma_scale = j.at("sigma_scale").get<double>();
    r.context = j.at("context").get<std::string>();
    r.n = j.at("n").get<size_t>();
    r.baseline_mean = j.at("baseline_dlogit_mean").get<double>();
    r.baseline_std = j.at("baseline_dlogit_std").get<double>();
    r.intervened_mean = j.at("intervened_dlogit_mean").get<double>();
    r.intervened_std = j.at("intervened_dlogit_std").get<double>();
    r.flip_to_she = opt_from(j, "flip_to_she_pct");
    r.flip_to_he = opt_from(j, "flip_to_he_pct");
    return r;
}

Json to_json(const DirectionStats& d) {
    Json classes = Json::object();
    for (const auto& [cls, st] : d.classes) classes[cls] = {{"mean", st.mean}, {"std", st.std}, {"n", st.n}};
    return {{"component", d.id.str()},
            {"direction", d.k},
            {"mask", opt_json(d.mask)},
            {"sigma", d.sigma},
            {"classes", classes},
            {"highest_attention_pct", opt_json(d.highest_attention_pct)},
            {"notes", d.notes}};
}

DirectionStats direction_stats_from_json(const Json& j) {
    DirectionStats d;
    d.id = ComponentId::parse(j.at("component").get<std::string>());
    d.k = j.at("direction").get<size_t>();
    d.mask = opt_from(j, "mask");
    d.sigma = j.at("sigma").get<double>();
    for (const auto& [cls, st] : j.at("classes").items())
        d.classes[cls] = {st.at("mean").get<double>(), st.at("std").get<double>(), st.at("n").get<size_t>()};
    d.highest_attention_pct = opt_from(j, "highest_attention_pct");
    d.notes = j.value("notes", std::vector<std::string>{});
    return d;
}

Json to_json(const Heatmap& h) {
    return {{"name", h.name}, {"title", h.title}, {"row_labels", h.row_labels}, {"col_labels", h.col_labels},
            {"values", h.values}};
}

Heatmap heatmap_from_json(const Json& j) {
    Heatmap h;
    h.name = j.at("name").get<std::string>();
    h.title = j.value("title", "");
    h.row_labels = j.at("row_labels").get<std::vector<std::string>>();
    h.col_labels = j.at("col_labels").get<std::vector<std::string>>();
    h.values = j.at("values").get<std::vector<std::vector<double>>>();
    return h;
}

std::string interventions_csv(const std::vector<InterventionRow>& rows) {
    std::string t = csv_line({"experiment", "sigma_scale", "context", "n", "baseline_dlogit_mean",
                              "baseline_dlogit_std", "intervened_dlogit_mean", "intervened_dlogit_std",
                              "flip_to_she_pct", "flip_to_he_pct"});
    for (const auto& r : rows) {
        t += csv_line({r.experiment, format_number(r.sigma_scale), r.context, std::to_string(r.n),
                       format_number(r.baseline_mean), format_number(r.baseline_std), format_number(r.intervened_mean),
                       format_number(r.intervened_std), opt(r.flip_to_she), opt(r.flip_to_he)});
    }
    return t;
}

std::vector<std::filesystem::path> export_report(const ReportInputs& in, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create report directory " + out_dir.string() + ": " + ec.message());
    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::string& name, const std::string& body) {
        const auto p = out_dir / name;
        write_text(p, body);
        written.push_back(p);
    };
    Json j;
    j["report_version"] = kReportVersion;
    j["tool_version"] = kVersion;

    std::string t1 = csv_line({"task", "n", "kld_mean", "kld_std", "accuracy_mean", "accuracy_std", "exact_match_mean",
                               "exact_match_std", "s_rel", "s_full", "n_active", "n_learnable", "n_total", "threshold"});
    j["fidelity"] = Json::array();
    for (const auto& r : in.fidelity) {
        const auto& s = r.sparsity;
        t1 += csv_line({r.task, std::to_string(r.n), format_number(r.kl_mean), format_number(r.kl_std),
                        opt(r.accuracy_mean), opt(r.accuracy_std), format_number(r.exact_match_mean),
                        format_number(r.exact_match_std), format_number(s.s_rel), format_number(s.s_full),
                        std::to_string(s.n_active), std::to_string(s.n_learnable), std::to_string(s.n_total),
                        format_number(s.threshold)});
        j["fidelity"].push_back(to_json(r));
    }
    emit("fidelity.csv", t1);

    std::string sp = csv_line({"variant", "n_active", "n_learnable", "n_total", "s_rel", "s_full", "threshold"});
    j["sparsity"] = Json::object();
    for (const auto& [variant, s] : {std::pair{"all_families", &in.sparsity_all}, std::pair{"ov_only", &in.sparsity_ov}}) {
        if (!*s) continue;
        const auto& r = **s;
        sp += csv_line({variant, std::to_string(r.n_active), std::to_string(r.n_learnable), std::to_string(r.n_total),
                        format_number(r.s_rel), format_number(r.s_full), format_number(r.threshold)});
        j["sparsity"][variant] = to_json(r);
    }
    emit("sparsity.csv", sp);

    std::string t2 = csv_line({"direction", "mask", "sigma", "top_tokens", "mu_he", "sd_he", "mu_she", "sd_she", "diff"});
    j["directions"] = Json::array();
    for (const auto& r : in.directions) {
        std::string tokens;
        for (size_t i = 0; i < r.top_tokens.size(); ++i) tokens += (i ? "|" : "") + r.top_tokens[i];
        t2 += csv_line({r.direction, opt(r.mask), format_number(r.sigma), tokens, format_number(r.mu_he),
                        format_number(r.sd_he), format_number(r.mu_she), format_number(r.sd_she),
                        format_number(r.mu_he - r.mu_she)});
        j["directions"].push_back(to_json(r));
    }
    emit("directions.csv", t2);

    j["interventions"] = Json::array();
    for (const auto& r : in.interventions) j["interventions"].push_back(to_json(r));
    emit("interventions.csv", interventions_csv(in.interventions));

    std::string hc = csv_line({"kind", "layer", "head", "rank", "mean_mask", "group"});
    j["heads"] = Json::array();
    for (auto kind : {ComponentKind::QK, ComponentKind::OV}) {
        for (const auto& h : head_mask_summary(in.masks, kind, ioi_head_groups())) {
            hc += csv_line({kind_name(kind), std::to_string(h.layer), std::to_string(h.head), std::to_string(h.rank),
                            format_number(h.mean), h.group});
            j["heads"].push_back({{"kind", kind_name(kind)},
                                  {"layer", h.layer},
                                  {"head", h.head},
                                  {"rank", h.rank},
                                  {"mean_mask", h.mean},
                                  {"group", h.group}});
        }
    }
    emit("heads.csv", hc);

    std::string ds = csv_line({"component", "direction", "mask", "sigma", "class", "mean", "std", "n",
                               "highest_attention_pct"});
    j["direction_stats"] = Json::array();
    for (const auto& d : in.direction_stats) {
        for (const auto& [cls, st] : d.classes) {
            ds += csv_line({d.id.str(), std::to_string(d.k), opt(d.mask), format_number(d.sigma), cls,
                            format_number(st.mean), format_number(st.std), std::to_string(st.n),
                            opt(d.highest_attention_pct)});
        }
        j["direction_stats"].push_back(to_json(d));
    }
    emit("direction_stats.csv", ds);

    std::set<ComponentKind> present;
    for (const auto& [id, m] : in.masks.masks) present.insert(id.kind);
    if (present.count(ComponentKind::QK))
        emit("masks_qk.svg", render_mask_grid_svg(in.masks, {ComponentKind::QK}, "QK direction masks"));
    if (present.count(ComponentKind::OV))
        emit("masks_ov.svg", render_mask_grid_svg(in.masks, {ComponentKind::OV}, "OV direction masks"));
    if (present.count(ComponentKind::MLP_IN) || present.count(ComponentKind::MLP_OUT))
        emit("masks_mlp.svg", render_mask_grid_svg(in.masks, {ComponentKind::MLP_IN, ComponentKind::MLP_OUT},
                                                   "MLP direction masks"));
    static const std::string kNameChars = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-";
    for (const auto& hm : in.heatmaps) {
        if (hm.name.empty() || hm.name.find_first_not_of(kNameChars) != std::string::npos)
            throw ValidationError("invalid heatmap name '" + hm.name + "'");
        emit("heatmap_" + hm.name + ".svg", render_heatmap_svg(hm));
    }
    if (!in.extra.empty()) j["extra"] = in.extra;
    Json files = Json::array();
    for (const auto& p : written) files.push_back(p.filename().string());
    files.push_back("report.json");
    j["files"] = files;
    emit("report.json", j.dump(2) + "\n");
    return written;
}

}  // namespace dlens
