#include "dlens/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "dlens/error.hpp"
#include "dlens/tasks.hpp"

namespace dlens {

SparsityReport sparsity(const MaskSet& masks, double threshold, size_t n_total) {
    SparsityReport r;
    r.threshold = threshold;
    r.n_total = n_total;
    for (const auto& [id, m] : masks.masks) {
        r.n_learnable += m.size();
        for (float v : m.values())
            if (v > threshold) ++r.n_active;
    }
    r.s_rel = r.n_learnable ? 1.0 - static_cast<double>(r.n_active) / static_cast<double>(r.n_learnable) : 0.0;
    r.s_full = r.n_total ? 1.0 - static_cast<double>(r.n_active) / static_cast<double>(r.n_total) : 0.0;
    return r;
}

size_t total_directions(const ModelConfig& c, const std::vector<ComponentKind>& kinds) {
    size_t n = 0;
    for (auto k : kinds) {
        switch (k) {
            case ComponentKind::QK: n += c.n_layers * c.n_heads * (1 + c.d_model); break;
            case ComponentKind::OV: n += c.n_layers * c.n_heads * std::min(1 + c.d_model, c.d_model); break;
            case ComponentKind::MLP_IN: n += c.n_layers * std::min(1 + c.d_model, c.d_mlp); break;
            case ComponentKind::MLP_OUT: n += c.n_layers * std::min(1 + c.d_mlp, c.d_model); break;
        }
    }
    return n;
}

SparsityReport sparsity_ov_only(const MaskSet& masks, double threshold, const ModelConfig& config) {
    MaskSet ov;
    for (const auto& [id, m] : masks.masks)
        if (id.kind == ComponentKind::OV) ov.masks.emplace(id, m);
    return sparsity(ov, threshold, total_directions(config, {ComponentKind::OV}));
}

const std::map<std::pair<size_t, size_t>, std::string>& ioi_head_groups() {
    static const std::map<std::pair<size_t, size_t>, std::string> g = [] {
        std::map<std::pair<size_t, size_t>, std::string> m;
        auto put = [&](const std::string& name, std::initializer_list<std::pair<size_t, size_t>> heads) {
            for (auto h : heads) m[h] = name;
        };
        put("name_mover", {{9, 6}, {9, 9}, {10, 0}});
        put("negative_name_mover", {{10, 7}, {11, 10}});
        put("backup_name_mover", {{9, 0}, {9, 7}, {10, 1}, {10, 2}, {10, 6}, {10, 10}, {11, 2}, {11, 9}});
        put("s_inhibition", {{7, 3}, {7, 9}, {8, 6}, {8, 10}});
        put("induction", {{5, 5}, {5, 8}, {5, 9}, {6, 9}});
        put("duplicate_token", {{0, 1}, {0, 10}, {3, 0}});
        put("previous_token", {{2, 2}, {4, 11}});
        return m;
    }();
    return g;
}

std::vector<HeadMaskMean> head_mask_summary(const MaskSet& masks, ComponentKind kind,
                                            const std::map<std::pair<size_t, size_t>, std::string>& groups) {
    if (!is_attention(kind)) throw ValidationError("head_mask_summary: kind must be qk or ov");
    std::vector<HeadMaskMean> out;
    for (const auto& [id, m] : masks.masks) {
        if (id.kind != kind) continue;
        HeadMaskMean h;
        h.layer = id.layer;
        h.head = *id.head;
        h.rank = m.size();
        double s = 0.0;
        for (float v : m.values()) s += v;
        h.mean = m.size() ? s / static_cast<double>(m.size()) : 0.0;
        if (auto it = groups.find({h.layer, h.head}); it != groups.end()) h.group = it->second;
        out.push_back(h);
    }
    return out;
}

double mean_over(const std::vector<HeadMaskMean>& table, const std::set<std::pair<size_t, size_t>>& heads) {
    double s = 0.0;
    size_t n = 0;
    for (const auto& h : table)
        if (heads.count({h.layer, h.head})) {
            s += h.mean;
            ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
}

double mean_excluding(const std::vector<HeadMaskMean>& table, const std::set<std::pair<size_t, size_t>>& exclude) {
    double s = 0.0;
    size_t n = 0;
    for (const auto& h : table)
        if (!exclude.count({h.layer, h.head})) {
            s += h.mean;
            ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
}

namespace {

std::string normalize(const std::string& text) {
    size_t b = 0;
    while (b < text.size() && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
    std::string s;
    for (size_t i = b; i < text.size(); ++i) s += static_cast<char>(std::tolower(static_cast<unsigned char>(text[i])));
    return s;
}

}  // namespace

void TokenClassifier::add_rule(const std::string& cls, const std::vector<std::string>& words) {
    std::set<std::string> set;
    for (const auto& w : words) set.insert(normalize(w));
    rules_.emplace_back(cls, std::move(set));
}

std::string TokenClassifier::classify(const std::string& token_text, size_t position) const {
    if (position == 0) return "first";
    const std::string t = normalize(token_text);
    for (const auto& [cls, words] : rules_)
        if (words.count(t)) return cls;
    if (!t.empty() && std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
        return "number";
    if (!t.empty() && std::all_of(t.begin(), t.end(), [](char c) { return std::ispunct(static_cast<unsigned char>(c)); }))
        return "punctuation";
    return "other";
}

TokenClassifier TokenClassifier::defaults() {
    TokenClassifier c;
    std::vector<std::string> entities = male_names();
    entities.insert(entities.end(), female_names().begin(), female_names().end());
    for (const char* w : {"store", "garden", "restaurant", "school", "hospital", "office", "house", "station", "park",
                          "market", "drink", "ring", "kiss", "bone", "book", "computer", "necklace", "snack",
                          "letter", "ball"})
        entities.push_back(w);
    c.add_rule("entity", entities);
    c.add_rule("action", {"went", "gave", "give", "had", "found", "got", "decided", "were", "working", "met",
                          "passed", "handed", "arrived", "lasted", "is", "was", "fun"});
    c.add_rule("function", {"the", "a", "an", "and", "to", "at", "of", "it", "from", "when", "after", "while",
                            "then", "so", "year", "lot", "isn", "'t", "friends"});
    return c;
}

ClassStat stable_stats(std::vector<double> values) {
    ClassStat s;
    s.n = values.size();
    if (values.empty()) return s;
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size()));
    return s;
}

DirectionStats direction_token_stats(const SVDFactors& qk, size_t k, std::span<const ScoredPrompt> prompts,
                                     const TokenClassifier& classifier, std::optional<double> mask) {
    if (qk.id.kind != ComponentKind::QK) throw ValidationError(qk.id.str() + " is not a QK component");
    if (k >= qk.rank()) throw ValidationError("direction " + std::to_string(k) + " out of range for " + qk.id.str());
    DirectionStats st;
    st.id = qk.id;
    st.k = k;
    st.mask = mask;
    st.sigma = qk.sigma[k];
    std::map<std::string, std::vector<double>> by_class;
    size_t with_target = 0, hits = 0;
    for (const auto& p : prompts) {
        const size_t T = p.x.rows();
        if (T == 0 || p.token_texts.size() != T) throw std::invalid_argument("direction_token_stats: malformed prompt");
        const auto q = p.x.row(T - 1);
        size_t best = 0;
        double best_score = -INFINITY;
        for (size_t j = 0; j < T; ++j) {
            const double s = direction_attention_score(qk, k, q, p.x.row(j));
            by_class[classifier.classify(p.token_texts[j], j)].push_back(s);
            if (s > best_score) {
                best_score = s;
                best = j;
            }
        }
        if (p.target) {
            ++with_target;
            if (best == *p.target) ++hits;
        }
    }
    for (auto& [cls, vals] : by_class) st.classes[cls] = stable_stats(std::move(vals));
    for (const char* cls : {"entity", "action"})
        if (!st.classes.count(cls)) st.notes.push_back(std::string("class '") + cls + "' is empty; skipped");
    if (with_target) st.highest_attention_pct = 100.0 * static_cast<double>(hits) / static_cast<double>(with_target);
    return st;
}

}  // namespace dlens
