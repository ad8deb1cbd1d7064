#include "dlens/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>

#include "dlens/error.hpp"

namespace dlens {

std::string gender_name(Gender g) { return g == Gender::He ? "he" : "she"; }

Gender parse_gender(const std::string& s) {
    if (s == "he") return Gender::He;
    if (s == "she") return Gender::She;
    throw ValidationError("gender must be \"he\" or \"she\", got \"" + s + "\"");
}

std::string DirectionRef::str() const {
    return "L" + std::to_string(layer) + ".H" + std::to_string(head) + ".SV" + std::to_string(direction);
}

DirectionRef DirectionRef::parse(const std::string& s) {
    static const std::regex re(R"(L(\d+)\.H(\d+)\.SV(\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ValidationError("malformed direction '" + s + "' (expected L9.H7.SV1)");
    return {std::stoul(m[1]), std::stoul(m[2]), std::stoul(m[3])};
}

namespace {

void check_direction(const SVDFactors& f, size_t k) {
    if (f.id.kind != ComponentKind::OV) throw ValidationError(f.id.str() + " is not an OV component");
    if (k >= f.rank()) {
        throw ValidationError("direction " + std::to_string(k) + " out of range for " + f.id.str() + " (rank " +
                              std::to_string(f.rank()) + ")");
    }
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

LogitReceptor logit_receptor(const SVDFactors& ov, size_t k, const Weights& w, size_t top_n) {
    check_direction(ov, k);
    const size_t d = w.config.d_model, V = w.config.vocab_size;
    if (ov.out_dim() != d) throw std::invalid_argument("logit_receptor: OV output width != d_model");
    LogitReceptor r;
    r.dir = {ov.id.layer, *ov.id.head, k};
    r.sigma = ov.sigma[k];
    r.receptor = Tensor::vector(V);
    std::vector<double> acc(V, 0.0);
    for (size_t i = 0; i < d; ++i) {
        const double vi = ov.v(i, k);
        const auto row = w.w_u.row(i);
        for (size_t t = 0; t < V; ++t) acc[t] += vi * row[t];
    }
    for (size_t t = 0; t < V; ++t) r.receptor[t] = static_cast<float>(acc[t]);
    std::vector<TokenId> order(V);
    std::iota(order.begin(), order.end(), 0);
    const size_t n = std::min(top_n, V);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](TokenId a, TokenId b) {
                          if (r.receptor[a] != r.receptor[b]) return r.receptor[a] > r.receptor[b];
                          return a < b;
                      });
    r.top_tokens.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    return r;
}

double direction_activation(const ActivationCache& cache, const SVDFactors& ov, size_t k,
                            std::optional<size_t> position) {
    check_direction(ov, k);
    const auto& lc = cache.layers.at(ov.id.layer);
    const Tensor& pattern = lc.pattern.at(*ov.id.head);
    const size_t T = pattern.rows();
    const size_t i = position.value_or(T - 1);
    if (i >= T) throw ValidationError("position " + std::to_string(i) + " out of range");
    const size_t d = lc.ln1_out.cols();
    std::vector<double> nu(d, 0.0);
    for (size_t j = 0; j <= i; ++j) {
        const double a = pattern(i, j);
        const auto x = lc.ln1_out.row(j);
        for (size_t c = 0; c < d; ++c) nu[c] += a * x[c];
    }
    double s = ov.u(0, k);
    for (size_t c = 0; c < d; ++c) s += nu[c] * ov.u(c + 1, k);
    return s;
}

ConditionalMeans conditional_means(std::span<const double> activations, std::span<const Gender> labels) {
    if (activations.size() != labels.size()) throw std::invalid_argument("conditional_means: size mismatch");
    std::vector<double> he, she;
    for (size_t i = 0; i < labels.size(); ++i) (labels[i] == Gender::He ? he : she).push_back(activations[i]);
    if (he.empty()) throw ValidationError("conditional_means: no he-labelled prompts");
    if (she.empty()) throw ValidationError("conditional_means: no she-labelled prompts");
    std::sort(he.begin(), he.end());
    std::sort(she.begin(), she.end());
    ConditionalMeans c;
    c.n_he = he.size();
    c.n_she = she.size();
    c.mu_he = mean_of(he);
    c.mu_she = mean_of(she);
    c.sd_he = std_of(he, c.mu_he);
    c.sd_she = std_of(she, c.mu_she);
    return c;
}

InterventionSpec InterventionSpec::from_json(const Json& j) {
    if (!j.is_object()) throw ValidationError("intervention spec: expected a JSON object");
    InterventionSpec s;
    if (!j.contains("edits") || !j["edits"].is_array()) throw ValidationError("intervention spec: 'edits' must be an array");
    if (!j.contains("target") || !j["target"].is_string()) {
        throw ValidationError("intervention spec: 'target' must be \"he\" or \"she\"");
    }
    try {
        s.target = parse_gender(j["target"].get<std::string>());
    } catch (const ValidationError&) {
        throw ValidationError("intervention spec: 'target' must be \"he\" or \"she\"");
    }
    if (!j.contains("sigma_scale") || !j["sigma_scale"].is_number()) {
        throw ValidationError("intervention spec: 'sigma_scale' must be a number");
    }
    s.sigma_scale = j["sigma_scale"].get<double>();
    if (!(s.sigma_scale >= 0.0) || !std::isfinite(s.sigma_scale)) {
        throw ValidationError("intervention spec: 'sigma_scale' must be finite and >= 0");
    }
    size_t idx = 0;
    for (const auto& e : j["edits"]) {
        const std::string where = "intervention spec: edits[" + std::to_string(idx++) + "]";
        if (!e.is_object()) throw ValidationError(where + " must be an object");
        InterventionEdit ed;
        for (const char* key : {"layer", "head", "direction"}) {
            if (!e.contains(key) || !e[key].is_number_integer() || e[key].get<long long>() < 0) {
                throw ValidationError(where + "." + key + " must be a non-negative integer");
            }
        }
        for (const char* key : {"mu_he", "mu_she"}) {
            if (!e.contains(key) || !e[key].is_number()) throw ValidationError(where + "." + key + " must be a number");
        }
        ed.layer = e["layer"].get<size_t>();
        ed.head = e["head"].get<size_t>();
        ed.direction = e["direction"].get<size_t>();
        ed.mu_he = e["mu_he"].get<double>();
        ed.mu_she = e["mu_she"].get<double>();
        s.edits.push_back(ed);
    }
    return s;
}

Json InterventionSpec::to_json() const {
    Json j;
    j["edits"] = Json::array();
    for (const auto& e : edits) {
        j["edits"].push_back(
            {{"layer", e.layer}, {"head", e.head}, {"direction", e.direction}, {"mu_he", e.mu_he}, {"mu_she", e.mu_she}});
    }
    j["target"] = gender_name(target);
    j["sigma_scale"] = sigma_scale;
    return j;
}

void InterventionSpec::check_against(const SvdCache& svd) const {
    for (const auto& e : edits) {
        const DirectionRef d{e.layer, e.head, e.direction};
        auto it = svd.find(d.component());
        if (it == svd.end()) throw ValidationError("intervention spec: " + d.str() + " is not in the SVD cache");
        if (e.direction >= it->second.rank()) {
            throw ValidationError("intervention spec: " + d.str() + " exceeds rank " +
                                  std::to_string(it->second.rank()));
        }
    }
}

Tensor intervention_delta(const ActivationCache& cache, const SvdCache& svd, const InterventionSpec& spec,
                          std::vector<double>* activations) {
    spec.check_against(svd);
    const size_t d = cache.final_resid.cols();
    std::vector<double> acc(d, 0.0);
    for (const auto& e : spec.edits) {
        const SVDFactors& f = svd.at(ComponentId{ComponentKind::OV, e.layer, e.head});
        const double a = direction_activation(cache, f, e.direction);
        if (activations) activations->push_back(a);
        const double target = spec.target == Gender::He ? e.mu_she : e.mu_he;
        const double coef = (target - a) * spec.sigma_scale * static_cast<double>(f.sigma[e.direction]);
        for (size_t c = 0; c < d; ++c) acc[c] += coef * f.v(c, e.direction);
    }
    Tensor dr = Tensor::vector(d);
    for (size_t c = 0; c < d; ++c) dr[c] = static_cast<float>(acc[c]);
    return dr;
}

InterventionResult apply_intervention(const ActivationCache& cache, const Weights& w, const SvdCache& svd,
                                      const InterventionSpec& spec) {
    InterventionResult r;
    r.delta_r = intervention_delta(cache, svd, spec, &r.activations);
    const auto last = cache.final_resid.row(cache.final_resid.rows() - 1);
    r.baseline = readout(last, w);
    std::vector<float> edited(last.begin(), last.end());
    for (size_t c = 0; c < edited.size(); ++c) edited[c] += r.delta_r[c];
    r.intervened = readout(edited, w);
    return r;
}

InterventionResult apply_intervention(std::span<const TokenId> tokens, const Weights& w, const SvdCache& svd,
                                      const InterventionSpec& spec) {
    return apply_intervention(forward(tokens, w).cache, w, svd, spec);
}

Prediction classify_prediction(const Tensor& logits, TokenId he, TokenId she) {
    const auto row = logits.row(logits.rows() - 1);
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == he) return Prediction::He;
    if (best == she) return Prediction::She;
    return Prediction::Other;
}

FlipReport flip_metrics(std::span<const Tensor> baseline, std::span<const Tensor> intervened,
                        std::span<const Gender> labels, TokenId he, TokenId she) {
    if (baseline.size() != intervened.size() || baseline.size() != labels.size()) {
        throw std::invalid_argument("flip_metrics: input sizes differ");
    }
    FlipReport r;
    r.n = baseline.size();
    std::vector<double> db, di;
    size_t he_to_she = 0, she_to_he = 0;
    for (size_t i = 0; i < r.n; ++i) {
        const TokenId correct = labels[i] == Gender::He ? he : she;
        const TokenId opposite = labels[i] == Gender::He ? she : he;
        const auto b = baseline[i].row(baseline[i].rows() - 1);
        const auto v = intervened[i].row(intervened[i].rows() - 1);
        db.push_back(static_cast<double>(b[correct]) - b[opposite]);
        di.push_back(static_cast<double>(v[correct]) - v[opposite]);
        const Prediction pb = classify_prediction(baseline[i], he, she);
        const Prediction pi = classify_prediction(intervened[i], he, she);
        if (pb == Prediction::He) {
            ++r.baseline_he;
            if (pi == Prediction::She) ++he_to_she;
        } else if (pb == Prediction::She) {
            ++r.baseline_she;
            if (pi == Prediction::He) ++she_to_he;
        } else {
            ++r.baseline_other;
        }
    }
    r.baseline_mean = mean_of(db);
    r.baseline_std = std_of(db, r.baseline_mean);
    r.intervened_mean = mean_of(di);
    r.intervened_std = std_of(di, r.intervened_mean);
    if (r.baseline_he) r.flip_to_she = 100.0 * static_cast<double>(he_to_she) / static_cast<double>(r.baseline_he);
    if (r.baseline_she) r.flip_to_he = 100.0 * static_cast<double>(she_to_he) / static_cast<double>(r.baseline_she);
    return r;
}

}  // namespace dlens
