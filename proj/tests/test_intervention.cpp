#include <cmath>

#include "doctest.h"
#include "dlens/error.hpp"
#include "dlens/intervention.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dlens;

namespace {

struct Setup {
    Weights w = fixture::small_model(41);
    SvdCache svd = decompose(w, {ComponentKind::OV});
};

const Setup& setup() {
    static const Setup s;
    return s;
}

InterventionEdit edit(size_t l, size_t h, size_t k, double he, double she) { return {l, h, k, he, she}; }

}  // namespace

TEST_CASE("direction activation matches the reference forward") {
    const auto& s = setup();
    const auto toks = fixture::random_tokens(6, s.w.config.vocab_size, 2);
    const auto cache = forward(toks, s.w).cache;
    const auto ref = oracle::forward(toks, s.w);
    for (const auto& [id, f] : s.svd) {
        const auto& L = ref.layers[id.layer];
        const size_t T = 6, d = s.w.config.d_model;
        std::vector<double> nu(d + 1, 0.0);
        nu[0] = 1.0;
        for (size_t j = 0; j < T; ++j)
            for (size_t c = 0; c < d; ++c) nu[c + 1] += L.pattern[*id.head][T - 1][j] * L.ln1[j][c];
        for (size_t k = 0; k < f.rank(); ++k) {
            double want = 0;
            for (size_t i = 0; i <= d; ++i) want += nu[i] * f.u(i, k);
            CHECK(direction_activation(cache, f, k) == doctest::Approx(want).epsilon(1e-4).scale(1.0));
        }
    }
}

TEST_CASE("summed direction writes equal the cached head output") {
    const auto& s = setup();
    const auto cache = forward(fixture::random_tokens(5, s.w.config.vocab_size, 3), s.w).cache;
    for (const auto& [id, f] : s.svd) {
        std::vector<double> sum(s.w.config.d_model, 0.0);
        for (size_t k = 0; k < f.rank(); ++k) {
            const double a = direction_activation(cache, f, k);
            for (size_t c = 0; c < sum.size(); ++c) sum[c] += a * f.sigma[k] * f.v(c, k);
        }
        const auto& y = cache.layers[id.layer].head_out[*id.head];
        for (size_t c = 0; c < sum.size(); ++c) CHECK(std::fabs(sum[c] - y(4, c)) <= 1e-3);
    }
}

TEST_CASE("null interventions are bit-exact") {
    const auto& s = setup();
    const auto cache = forward(fixture::random_tokens(7, s.w.config.vocab_size, 4), s.w).cache;
    InterventionSpec spec;
    spec.edits = {edit(1, 0, 1, 0.3, -0.8), edit(0, 1, 0, 1.0, 2.0)};
    spec.sigma_scale = 0.0;
    const auto a = apply_intervention(cache, s.w, s.svd, spec);
    CHECK(a.intervened == a.baseline);

    spec.sigma_scale = 20.0;
    std::vector<double> acts;
    intervention_delta(cache, s.svd, spec, &acts);
    spec.target = Gender::He;
    for (size_t i = 0; i < spec.edits.size(); ++i) spec.edits[i].mu_she = acts[i];
    const auto b = apply_intervention(cache, s.w, s.svd, spec);
    CHECK(b.intervened == b.baseline);
    const auto plain = forward(cache.tokens, s.w);
    for (size_t v = 0; v < s.w.config.vocab_size; ++v) CHECK(b.baseline(0, v) == plain.logits(6, v));
}

TEST_CASE("delta R is additive across edit sets") {
    const auto& s = setup();
    const auto cache = forward(fixture::random_tokens(7, s.w.config.vocab_size, 5), s.w).cache;
    InterventionSpec a, b, both;
    a.edits = {edit(1, 1, 0, 0.5, -0.5), edit(0, 0, 2, 0.1, 0.2)};
    b.edits = {edit(1, 0, 3, -1.0, 1.0)};
    both.edits = a.edits;
    both.edits.push_back(b.edits[0]);
    for (auto* sp : {&a, &b, &both}) sp->sigma_scale = 5.0;
    const Tensor da = intervention_delta(cache, s.svd, a), db = intervention_delta(cache, s.svd, b);
    const Tensor dab = intervention_delta(cache, s.svd, both);
    CHECK(max_abs_diff(add(da, db), dab) <= 1e-5f);
}

TEST_CASE("delta R follows the formula") {
    const auto& s = setup();
    const auto cache = forward(fixture::random_tokens(4, s.w.config.vocab_size, 6), s.w).cache;
    InterventionSpec spec;
    spec.edits = {edit(1, 1, 2, 0.7, -0.4)};
    spec.target = Gender::She;
    spec.sigma_scale = 3.0;
    const auto& f = s.svd.at(ComponentId{ComponentKind::OV, 1, 1});
    const double a = direction_activation(cache, f, 2);
    const Tensor dr = intervention_delta(cache, s.svd, spec);
    for (size_t c = 0; c < dr.size(); ++c)
        CHECK(dr[c] == doctest::Approx((0.7 - a) * 3.0 * f.sigma[2] * f.v(c, 2)).epsilon(1e-5).scale(1.0));
}

TEST_CASE("conditional means use the population deviation") {
    const std::vector<double> acts{1, 3, -2, -4, -6};
    const std::vector<Gender> g{Gender::He, Gender::He, Gender::She, Gender::She, Gender::She};
    const auto m = conditional_means(acts, g);
    CHECK(m.mu_he == 2.0);
    CHECK(m.sd_he == 1.0);
    CHECK(m.mu_she == -4.0);
    CHECK(m.sd_she == doctest::Approx(std::sqrt(8.0 / 3.0)));
    CHECK(m.diff() == 6.0);
    CHECK(m.n_she == 3);
    const std::vector<Gender> only_he(2, Gender::He);
    CHECK_THROWS_AS(conditional_means(std::span(acts).first(2), only_he), ValidationError);
}

TEST_CASE("flip metrics classify the full-vocabulary argmax") {
    auto logits = [](float he, float she, float other) { return Tensor::from_rows({{other, he, she}}); };
    const TokenId he = 1, she = 2;
    const std::vector<Tensor> base{logits(5, 1, 0), logits(4, 2, 0), logits(1, 6, 0), logits(1, 2, 9)};
    const std::vector<Tensor> after{logits(1, 5, 0), logits(4, 3, 0), logits(7, 1, 0), logits(1, 2, 0)};
    const std::vector<Gender> lab{Gender::He, Gender::He, Gender::She, Gender::She};
    const auto r = flip_metrics(base, after, lab, he, she);
    CHECK(r.baseline_he == 2);
    CHECK(r.baseline_she == 1);
    CHECK(r.baseline_other == 1);
    CHECK(*r.flip_to_she == 50.0);
    CHECK(*r.flip_to_he == 100.0);
    CHECK(r.baseline_mean == doctest::Approx((4 + 2 + 5 + 1) / 4.0));
    CHECK(r.intervened_mean == doctest::Approx((-4 + 1 - 6 + 1) / 4.0));
    const auto none = flip_metrics(std::span(base).last(1), std::span(after).last(1), std::span(lab).last(1), he, she);
    CHECK_FALSE(none.flip_to_she.has_value());
    CHECK_FALSE(none.flip_to_he.has_value());
}

TEST_CASE("intervention specs validate every field") {
    const Json ok = {{"edits", {{{"layer", 1}, {"head", 0}, {"direction", 2}, {"mu_he", 0.1}, {"mu_she", -0.4}}}},
                     {"target", "she"},
                     {"sigma_scale", 20}};
    const auto spec = InterventionSpec::from_json(ok);
    CHECK(spec.target == Gender::She);
    CHECK(spec.sigma_scale == 20.0);
    CHECK(InterventionSpec::from_json(spec.to_json()).to_json() == spec.to_json());
    spec.check_against(setup().svd);

    Json bad = ok;
    bad["target"] = "it";
    CHECK_THROWS_AS(InterventionSpec::from_json(bad), ValidationError);
    bad = ok;
    bad["sigma_scale"] = -1;
    CHECK_THROWS_AS(InterventionSpec::from_json(bad), ValidationError);
    bad = ok;
    bad["edits"][0].erase("mu_she");
    CHECK_THROWS_WITH_AS(InterventionSpec::from_json(bad), doctest::Contains("mu_she"), ValidationError);
    bad = ok;
    bad["edits"][0]["layer"] = -1;
    CHECK_THROWS_WITH_AS(InterventionSpec::from_json(bad), doctest::Contains("layer"), ValidationError);
    bad = ok;
    bad["edits"][0]["direction"] = 99;
    CHECK_THROWS_AS(InterventionSpec::from_json(bad).check_against(setup().svd), ValidationError);
    bad = ok;
    bad["edits"][0]["layer"] = 7;
    CHECK_THROWS_AS(InterventionSpec::from_json(bad).check_against(setup().svd), ValidationError);
}

TEST_CASE("direction references are 0-based") {
    const auto d = DirectionRef::parse("L9.H7.SV1");
    CHECK(d.layer == 9);
    CHECK(d.head == 7);
    CHECK(d.direction == 1);
    CHECK(d.str() == "L9.H7.SV1");
    CHECK_THROWS_AS(DirectionRef::parse("L9H7SV1"), ValidationError);
}

TEST_CASE("logit receptor ranks tokens by v_k W_U") {
    const auto& s = setup();
    const auto& f = s.svd.at(ComponentId{ComponentKind::OV, 0, 0});
    const auto r = logit_receptor(f, 1, s.w, 5);
    REQUIRE(r.top_tokens.size() == 5);
    for (size_t i = 1; i < 5; ++i) CHECK(r.receptor[r.top_tokens[i - 1]] >= r.receptor[r.top_tokens[i]]);
    double want = 0;
    for (size_t c = 0; c < s.w.config.d_model; ++c) want += double(f.v(c, 1)) * s.w.w_u(c, 3);
    CHECK(r.receptor[3] == doctest::Approx(want).epsilon(1e-5));
}
