#include <cmath>

#include "doctest.h"
#include "dlens/decomposition.hpp"
#include "dlens/error.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dlens;

namespace {

double row_mat_row(std::span<const float> a, const Tensor& m, std::span<const float> b) {
    double s = 0;
    for (size_t i = 0; i <= a.size(); ++i)
        for (size_t j = 0; j <= b.size(); ++j) s += (i ? a[i - 1] : 1.0) * m(i, j) * (j ? b[j - 1] : 1.0);
    return s;
}

}  // namespace

TEST_CASE("augmented QK reproduces q.k on random pairs") {
    const Weights w = fixture::small_model(21);
    std::mt19937_64 rng(5);
    std::normal_distribution<float> normal;
    const size_t d = w.config.d_model, dh = w.config.d_head;
    for (size_t l = 0; l < w.config.n_layers; ++l)
        for (size_t h = 0; h < w.config.n_heads; ++h) {
            const auto aug = build_augmented(w, ComponentKind::QK, l, h);
            CHECK(aug.matrix.rows() == d + 1);
            CHECK(aug.matrix.cols() == d + 1);
            const auto& L = w.layers[l];
            for (int t = 0; t < 50; ++t) {
                std::vector<float> xi(d), xj(d);
                for (auto& v : xi) v = normal(rng);
                for (auto& v : xj) v = normal(rng);
                double want = 0;
                for (size_t e = 0; e < dh; ++e) {
                    double q = L.b_q[h][e], k = L.b_k[h][e];
                    for (size_t i = 0; i < d; ++i) {
                        q += double(xi[i]) * L.w_q[h](i, e);
                        k += double(xj[i]) * L.w_k[h](i, e);
                    }
                    want += q * k;
                }
                CHECK(std::fabs(row_mat_row(xi, aug.matrix, xj) - want) <= 1e-4 * std::max(1.0, std::fabs(want)));
            }
        }
}

TEST_CASE("augmented QK scores match the forward pass") {
    const Weights w = fixture::small_model(21);
    const auto toks = fixture::random_tokens(7, w.config.vocab_size, 8);
    const auto ref = oracle::forward(toks, w);
    const auto r = forward(toks, w);
    const double scale = std::sqrt(double(w.config.d_head));
    for (size_t l = 0; l < w.config.n_layers; ++l)
        for (size_t h = 0; h < w.config.n_heads; ++h) {
            const auto aug = build_augmented(w, ComponentKind::QK, l, h);
            const auto& x = r.cache.layers[l].ln1_out;
            for (size_t i = 0; i < 7; ++i)
                for (size_t j = 0; j <= i; ++j)
                    CHECK(std::fabs(row_mat_row(x.row(i), aug.matrix, x.row(j)) / scale - ref.layers[l].scores[h][i][j]) <=
                          1e-4);
        }
}

TEST_CASE("augmented OV reproduces cached head outputs") {
    const Weights w = fixture::small_model(22);
    const auto toks = fixture::random_tokens(9, w.config.vocab_size, 3);
    const auto r = forward(toks, w);
    for (size_t l = 0; l < w.config.n_layers; ++l)
        for (size_t h = 0; h < w.config.n_heads; ++h) {
            const auto aug = build_augmented(w, ComponentKind::OV, l, h);
            const Tensor nu = prepend_ones(attention_weighted_input(r.cache, l, h));
            CHECK(max_abs_diff(matmul(nu, aug.matrix), r.cache.layers[l].head_out[h]) <= 1e-4f);
            const auto f = svd(aug);
            CHECK(max_abs_diff(matmul(nu, f.reconstruct()), r.cache.layers[l].head_out[h]) <= 1e-3f);
        }
}

TEST_CASE("augmented MLP matrices reproduce the layer") {
    const Weights w = fixture::small_model(23);
    const auto toks = fixture::random_tokens(4, w.config.vocab_size, 3);
    const auto r = forward(toks, w);
    const auto& L = r.cache.layers[1];
    const auto in = build_augmented(w, ComponentKind::MLP_IN, 1);
    const auto out = build_augmented(w, ComponentKind::MLP_OUT, 1);
    CHECK(max_abs_diff(matmul(prepend_ones(L.ln2_out), in.matrix), L.mlp_pre) <= 1e-4f);
    CHECK(max_abs_diff(matmul(prepend_ones(L.mlp_post), out.matrix), L.mlp_out) <= 1e-4f);
}

TEST_CASE("masked and complement reconstructions sum to the full matrix") {
    const Weights w = fixture::small_model(24);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (const auto& [id, f] : decompose(w, {ComponentKind::QK, ComponentKind::OV, ComponentKind::MLP_IN,
                                              ComponentKind::MLP_OUT})) {
        Tensor m = Tensor::vector(f.rank());
        for (float& v : m.storage()) v = u(rng);
        const Tensor full = f.reconstruct();
        CHECK(max_abs_diff(add(masked_reconstruct(f, m), complement_reconstruct(f, m)), full) <= 1e-3f);
        CHECK(max_abs_diff(masked_reconstruct(f, Tensor::vector(f.rank(), 1.0f)), full) == 0.0f);
        CHECK(max_abs_diff(complement_reconstruct(f, Tensor::vector(f.rank(), 0.0f)), full) == 0.0f);
        CHECK(max_abs_diff(full, build_augmented(w, id).matrix) <= 1e-3f);
    }
}

TEST_CASE("per-direction QK scores sum to the full score") {
    const Weights w = fixture::small_model(25);
    const auto r = forward(fixture::random_tokens(5, w.config.vocab_size, 2), w);
    const auto aug = build_augmented(w, ComponentKind::QK, 0, 1);
    const auto f = svd(aug);
    const auto& x = r.cache.layers[0].ln1_out;
    double s = 0;
    for (size_t k = 0; k < f.rank(); ++k) s += direction_attention_score(f, k, x.row(4), x.row(2));
    CHECK(std::fabs(s - row_mat_row(x.row(4), aug.matrix, x.row(2))) <= 1e-3);
    CHECK_THROWS_AS(direction_attention_score(f, f.rank(), x.row(4), x.row(2)), ValidationError);
}

TEST_CASE("toy ranks") {
    const Weights w = make_random_model(toy_config(64), 1);
    const auto cache = decompose(w, {ComponentKind::QK, ComponentKind::OV, ComponentKind::MLP_IN, ComponentKind::MLP_OUT});
    CHECK(cache.size() == 2 * (2 + 2 + 1 + 1));
    for (const auto& [id, f] : cache) {
        switch (id.kind) {
            case ComponentKind::QK: CHECK(f.rank() == 8); break;
            case ComponentKind::OV: CHECK(f.rank() == 9); break;
            case ComponentKind::MLP_IN: CHECK(f.rank() == 17); break;
            case ComponentKind::MLP_OUT: CHECK(f.rank() == 16); break;
        }
    }
}

TEST_CASE("SVD cache round-trips and filters by kind") {
    const auto dir = fixture::temp_dir("svdcache");
    const Weights w = fixture::small_model(26);
    const auto cache = decompose(w, {ComponentKind::OV, ComponentKind::MLP_OUT}, kDefaultRankTol, 2);
    for (const auto& [id, f] : cache) {
        CHECK(id.kind != ComponentKind::QK);
        save_factors(dir, f);
    }
    const auto back = load_svd_cache(dir);
    REQUIRE(back.size() == cache.size());
    for (const auto& [id, f] : cache) {
        const auto& g = factors_for(back, id);
        CHECK(g.u == f.u);
        CHECK(g.v == f.v);
        CHECK(g.sigma == f.sigma);
        CHECK(g.rank_tol == f.rank_tol);
    }
    CHECK_THROWS_AS(factors_for(back, ComponentId{ComponentKind::QK, 0, 0}), ValidationError);
    CHECK_THROWS_AS(load_svd_cache(dir / "missing"), ValidationError);
}

TEST_CASE("decompose is thread-count invariant") {
    const Weights w = fixture::small_model(27);
    const auto a = decompose(w, {ComponentKind::QK, ComponentKind::OV}, kDefaultRankTol, 1);
    const auto b = decompose(w, {ComponentKind::QK, ComponentKind::OV}, kDefaultRankTol, 3);
    for (const auto& [id, f] : a) CHECK(factors_for(b, id).u == f.u);
}

TEST_CASE("component ids parse and print") {
    CHECK(ComponentId::parse("L9.H6.qk").str() == "L9.H6.qk");
    CHECK(ComponentId::parse("L3.mlp_in") == ComponentId{ComponentKind::MLP_IN, 3, std::nullopt});
    CHECK_THROWS_AS(ComponentId::parse("L3.H1.mlp_in"), ValidationError);
    CHECK_THROWS_AS(ComponentId::parse("L3.ov"), ValidationError);
    CHECK_THROWS_AS(parse_kind("attn"), ValidationError);
    CHECK(all_components(toy_config(10), {ComponentKind::QK}).size() == 4);
    CHECK_THROWS_AS(build_augmented(fixture::small_model(), ComponentKind::QK, 5, 0), ValidationError);
}
