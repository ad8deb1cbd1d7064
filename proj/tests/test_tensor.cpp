#include <cmath>
#include <random>

#include "doctest.h"
#include "dlens/autodiff.hpp"
#include "dlens/tensor.hpp"

using namespace dlens;

namespace {

Tensor random_matrix(size_t r, size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n;
    Tensor t = Tensor::matrix(r, c);
    for (float& v : t.storage()) v = n(rng);
    return t;
}

}  // namespace

TEST_CASE("matmul variants match a triple loop") {
    const Tensor a = random_matrix(8, 8, 1), b = random_matrix(8, 8, 2);
    const Tensor c = matmul(a, b);
    for (size_t i = 0; i < 8; ++i)
        for (size_t j = 0; j < 8; ++j) {
            double s = 0;
            for (size_t k = 0; k < 8; ++k) s += double(a(i, k)) * b(k, j);
            CHECK(std::fabs(c(i, j) - s) <= 1e-6);
        }
    CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) <= 1e-6f);
    CHECK(max_abs_diff(matmul_tn(a, b), matmul(transpose(a), b)) <= 1e-6f);
    const Tensor d = random_matrix(8, 5, 3);
    CHECK(max_abs_diff(matmul(matmul(a, b), d), matmul(a, matmul(b, d))) <= 1e-4f);
    CHECK_THROWS(matmul(a, d.reshaped({5, 8})));
}

TEST_CASE("softmax is overflow-safe and causal") {
    const Tensor s = softmax_rows(Tensor::from_rows({{1000, 0}}), false);
    CHECK(s(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(s(0, 1) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    const Tensor x = random_matrix(4, 4, 4);
    const Tensor p = softmax_rows(x, true);
    for (size_t i = 0; i < 4; ++i) {
        double z = 0, sum = 0;
        for (size_t j = 0; j <= i; ++j) z += std::exp(double(x(i, j)));
        for (size_t j = 0; j < 4; ++j) {
            if (j > i) CHECK(p(i, j) == 0.0f);
            else CHECK(std::fabs(p(i, j) - std::exp(double(x(i, j))) / z) <= 1e-6);
            sum += p(i, j);
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer norm and gelu") {
    const Tensor x = random_matrix(3, 16, 5);
    const Tensor g = Tensor::vector(16, 1.0f), b = Tensor::vector(16);
    const Tensor y = layer_norm(x, g, b);
    for (size_t i = 0; i < 3; ++i) {
        double mean = 0, var = 0;
        for (size_t j = 0; j < 16; ++j) mean += x(i, j);
        mean /= 16;
        for (size_t j = 0; j < 16; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= 16;
        for (size_t j = 0; j < 16; ++j) CHECK(std::fabs(y(i, j) - (x(i, j) - mean) / std::sqrt(var + 1e-5)) <= 1e-6);
    }
    CHECK(std::fabs(gelu(10.0f) - 10.0f) <= 1e-4);
    CHECK(std::fabs(gelu(-10.0f)) <= 1e-4);
    CHECK(gelu(0.0f) == 0.0f);
}

TEST_CASE("autodiff gradients match finite differences") {
    ad::Graph g;
    const Tensor x0 = random_matrix(3, 4, 6), w0 = random_matrix(4, 4, 7);
    const Tensor m0({4}, {0.3f, 0.6f, 0.2f, 0.9f});
    auto loss_of = [&](const Tensor& m, ad::Graph& gr, ad::Var* mv) {
        const auto x = gr.constant(x0);
        const auto w = gr.constant(w0);
        const auto m_var = gr.parameter(m);
        if (mv) *mv = m_var;
        const auto h = gr.gelu(gr.scale_cols(gr.matmul(x, w), gr.clamp01(m_var)));
        const auto n = gr.layer_norm(h, gr.constant(Tensor::vector(4, 1.0f)), gr.constant(Tensor::vector(4)));
        const auto a = gr.softmax_rows(gr.matmul_nt(n, n), true);
        const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
        return gr.kl_from_logits(p, gr.slice_row(gr.matmul(a, n), 2));
    };
    ad::Var mv;
    const auto loss = loss_of(m0, g, &mv);
    const auto grads = ad::backward(g, loss);
    const Tensor& gm = grads.at(mv.id);
    for (size_t k = 0; k < 4; ++k) {
        const double h = 1e-3;
        Tensor p = m0, q = m0;
        p[k] += static_cast<float>(h);
        q[k] -= static_cast<float>(h);
        ad::Graph gp, gq;
        const double fd = (gp.value(loss_of(p, gp, nullptr))[0] - gq.value(loss_of(q, gq, nullptr))[0]) /
                          (double(p[k]) - double(q[k]));
        CHECK(std::fabs(gm[k] - fd) / std::max(1.0, std::fabs(double(gm[k]))) <= 1e-3);
    }
    CHECK_FALSE(g.requires_grad(ad::Var{0}));
}
