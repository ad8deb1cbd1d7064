#include <cmath>

#include "doctest.h"
#include "dlens/error.hpp"
#include "dlens/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dlens;

namespace {

double max_diff(const Tensor& t, const oracle::Mat& m) {
    double worst = 0.0;
    for (size_t i = 0; i < t.rows(); ++i)
        for (size_t j = 0; j < t.cols(); ++j) worst = std::max(worst, std::fabs(t(i, j) - m[i][j]));
    return worst;
}

}  // namespace

TEST_CASE("forward matches the fp64 reference") {
    const Weights w = fixture::small_model(11);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto toks = fixture::random_tokens(3 + s * 4, w.config.vocab_size, s);
        const auto got = forward(toks, w);
        const auto ref = oracle::forward(toks, w);
        CHECK(max_diff(got.logits, ref.logits) <= 1e-4);
        for (size_t l = 0; l < w.config.n_layers; ++l) {
            CHECK(max_diff(got.cache.layers[l].ln1_out, ref.layers[l].ln1) <= 1e-4);
            for (size_t h = 0; h < w.config.n_heads; ++h) {
                CHECK(max_diff(got.cache.layers[l].pattern[h], ref.layers[l].pattern[h]) <= 1e-5);
                CHECK(max_diff(got.cache.layers[l].head_out[h], ref.layers[l].head_out[h]) <= 1e-4);
            }
        }
    }
}

TEST_CASE("attention is causal and rows sum to one") {
    const Weights w = fixture::small_model(2);
    const auto toks = fixture::random_tokens(9, w.config.vocab_size, 4);
    const auto r = forward(toks, w);
    for (const auto& L : r.cache.layers)
        for (const auto& p : L.pattern) {
            for (size_t i = 0; i < p.rows(); ++i) {
                double s = 0;
                for (size_t j = 0; j < p.cols(); ++j) {
                    if (j > i) CHECK(p(i, j) == 0.0f);
                    s += p(i, j);
                }
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
}

TEST_CASE("changing a later token leaves earlier logits untouched") {
    const Weights w = fixture::small_model(2);
    auto toks = fixture::random_tokens(8, w.config.vocab_size, 9);
    const auto a = forward(toks, w);
    toks[6] = (toks[6] + 1) % static_cast<int>(w.config.vocab_size);
    const auto b = forward(toks, w);
    for (size_t t = 0; t < 6; ++t)
        for (size_t v = 0; v < w.config.vocab_size; ++v) CHECK(a.logits(t, v) == b.logits(t, v));
}

TEST_CASE("residual stream bookkeeping") {
    const Weights w = fixture::small_model(5);
    const auto toks = fixture::random_tokens(6, w.config.vocab_size, 1);
    const auto r = forward(toks, w);
    const Tensor e = embed(toks, w);
    CHECK(max_abs_diff(r.cache.layers[0].resid_pre, e) == 0.0f);
    for (size_t l = 0; l < w.config.n_layers; ++l) {
        const auto& L = r.cache.layers[l];
        Tensor mid = L.resid_pre;
        for (const auto& h : L.head_out) add_inplace(mid, h);
        CHECK(max_abs_diff(mid, L.resid_mid) <= 1e-5f);
        CHECK(max_abs_diff(add(L.resid_mid, L.mlp_out), L.resid_post) <= 1e-5f);
        if (l + 1 < w.config.n_layers) CHECK(r.cache.layers[l + 1].resid_pre == L.resid_post);
    }
    CHECK(r.cache.final_resid == r.cache.layers.back().resid_post);
    const Tensor last = readout(r.cache.final_resid.row(5), w);
    for (size_t v = 0; v < w.config.vocab_size; ++v) CHECK(last[v] == doctest::Approx(r.logits(5, v)).epsilon(1e-5));
}

TEST_CASE("attention_weighted_input matches the pattern") {
    const Weights w = fixture::small_model(5);
    const auto toks = fixture::random_tokens(5, w.config.vocab_size, 2);
    const auto r = forward(toks, w);
    const Tensor z = attention_weighted_input(r.cache, 1, 1);
    const auto& p = r.cache.layers[1].pattern[1];
    const auto& x = r.cache.layers[1].ln1_out;
    for (size_t i = 0; i < 5; ++i)
        for (size_t c = 0; c < w.config.d_model; ++c) {
            double s = 0;
            for (size_t j = 0; j <= i; ++j) s += double(p(i, j)) * x(j, c);
            CHECK(z(i, c) == doctest::Approx(s).epsilon(1e-5));
        }
}

TEST_CASE("single token and over-long prompts") {
    const Weights w = fixture::small_model(5);
    const std::vector<TokenId> one{3};
    const auto r = forward(one, w);
    CHECK(r.logits.rows() == 1);
    CHECK(r.cache.layers[0].pattern[0](0, 0) == 1.0f);
    const auto too_long = fixture::random_tokens(w.config.max_positions + 1, w.config.vocab_size, 1);
    CHECK_THROWS_AS(forward(too_long, w), ValidationError);
    const std::vector<TokenId> bad{static_cast<TokenId>(w.config.vocab_size)};
    CHECK_THROWS_AS(forward(bad, w), ValidationError);
    CHECK_THROWS_AS(forward(std::vector<TokenId>{}, w), ValidationError);
}

TEST_CASE("final distribution sums to one") {
    const Weights w = fixture::small_model(5);
    const auto r = forward(fixture::random_tokens(4, w.config.vocab_size, 3), w);
    const auto p = final_distribution(r.logits);
    double s = 0;
    for (double v : p) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> z(r.logits.row(3).begin(), r.logits.row(3).end());
    const auto q = oracle::softmax(z);
    for (size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-9));
}
