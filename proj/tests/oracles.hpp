#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library's numeric kernels.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dlens/model.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(size_t r, size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat from(const dlens::Tensor& t) {
    Mat m = zeros(t.rows(), t.cols());
    for (size_t i = 0; i < t.rows(); ++i)
        for (size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
    return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat c = zeros(a.size(), b.empty() ? 0 : b[0].size());
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t k = 0; k < b.size(); ++k)
            for (size_t j = 0; j < c[i].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

inline Mat transpose(const Mat& a) {
    Mat t = zeros(a.empty() ? 0 : a[0].size(), a.size());
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < a[i].size(); ++j) t[j][i] = a[i][j];
    return t;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const dlens::Tensor& g, const dlens::Tensor& b,
                                      double eps) {
    const double n = static_cast<double>(x.size());
    double mean = 0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
    return y;
}

inline double gelu_tanh(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

struct RefLayer {
    Mat ln1;                       // [T, d]
    std::vector<Mat> pattern;      // per head [T, T]
    std::vector<Mat> head_out;     // per head [T, d]
    std::vector<Mat> scores;       // per head, pre-softmax q.k/sqrt(dh)
};

struct RefForward {
    Mat logits;  // [T, V]
    std::vector<RefLayer> layers;
};

// Straight-line fp64 GPT-2 forward.
inline RefForward forward(const std::vector<int>& tokens, const dlens::Weights& w) {
    const auto& c = w.config;
    const size_t T = tokens.size(), d = c.d_model, dh = c.d_head, H = c.n_heads;
    Mat x = zeros(T, d);
    for (size_t t = 0; t < T; ++t)
        for (size_t i = 0; i < d; ++i) x[t][i] = double(w.token_embedding(tokens[t], i)) + w.position_embedding(t, i);
    RefForward out;
    for (size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = w.layers[l];
        RefLayer rl;
        for (size_t t = 0; t < T; ++t) rl.ln1.push_back(layer_norm(x[t], L.ln1_gamma, L.ln1_beta, c.ln_eps));
        Mat attn = zeros(T, d);
        for (size_t h = 0; h < H; ++h) {
            Mat q = zeros(T, dh), k = zeros(T, dh), v = zeros(T, dh);
            for (size_t t = 0; t < T; ++t)
                for (size_t j = 0; j < dh; ++j) {
                    q[t][j] = L.b_q[h][j];
                    k[t][j] = L.b_k[h][j];
                    v[t][j] = L.b_v[h][j];
                    for (size_t i = 0; i < d; ++i) {
                        q[t][j] += rl.ln1[t][i] * L.w_q[h](i, j);
                        k[t][j] += rl.ln1[t][i] * L.w_k[h](i, j);
                        v[t][j] += rl.ln1[t][i] * L.w_v[h](i, j);
                    }
                }
            Mat s = zeros(T, T), p = zeros(T, T);
            for (size_t i = 0; i < T; ++i) {
                double mx = -1e300;
                for (size_t j = 0; j <= i; ++j) {
                    for (size_t e = 0; e < dh; ++e) s[i][j] += q[i][e] * k[j][e];
                    s[i][j] /= std::sqrt(double(dh));
                    mx = std::max(mx, s[i][j]);
                }
                double z = 0;
                for (size_t j = 0; j <= i; ++j) z += std::exp(s[i][j] - mx);
                for (size_t j = 0; j <= i; ++j) p[i][j] = std::exp(s[i][j] - mx) / z;
            }
            Mat y = zeros(T, d);
            for (size_t i = 0; i < T; ++i) {
                std::vector<double> z(dh, 0.0);
                for (size_t j = 0; j <= i; ++j)
                    for (size_t e = 0; e < dh; ++e) z[e] += p[i][j] * v[j][e];
                for (size_t o = 0; o < d; ++o) {
                    double acc = L.b_o[o] / double(H);
                    for (size_t e = 0; e < dh; ++e) acc += z[e] * L.w_o[h](e, o);
                    y[i][o] = acc;
                    attn[i][o] += acc;
                }
            }
            rl.scores.push_back(s);
            rl.pattern.push_back(p);
            rl.head_out.push_back(y);
        }
        for (size_t t = 0; t < T; ++t)
            for (size_t i = 0; i < d; ++i) x[t][i] += attn[t][i];
        for (size_t t = 0; t < T; ++t) {
            const auto h2 = layer_norm(x[t], L.ln2_gamma, L.ln2_beta, c.ln_eps);
            std::vector<double> hid(c.d_mlp);
            for (size_t m = 0; m < c.d_mlp; ++m) {
                double acc = L.b_in[m];
                for (size_t i = 0; i < d; ++i) acc += h2[i] * L.w_in(i, m);
                hid[m] = gelu_tanh(acc);
            }
            for (size_t o = 0; o < d; ++o) {
                double acc = L.b_out[o];
                for (size_t m = 0; m < c.d_mlp; ++m) acc += hid[m] * L.w_out(m, o);
                x[t][o] += acc;
            }
        }
        out.layers.push_back(std::move(rl));
    }
    out.logits = zeros(T, c.vocab_size);
    for (size_t t = 0; t < T; ++t) {
        const auto f = layer_norm(x[t], w.lnf_gamma, w.lnf_beta, c.ln_eps);
        for (size_t v = 0; v < c.vocab_size; ++v) {
            double acc = w.b_u[v];
            for (size_t i = 0; i < d; ++i) acc += f[i] * w.w_u(i, v);
            out.logits[t][v] = acc;
        }
    }
    return out;
}

// Eigenvalues of a symmetric matrix by the classical two-sided cyclic Jacobi
// method, sorted descending. Eigenvectors are the columns of `vecs`.
inline std::vector<double> symmetric_eigen(Mat a, Mat* vecs = nullptr) {
    const size_t n = a.size();
    Mat v = zeros(n, n);
    for (size_t i = 0; i < n; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0, total = 0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) {
                total += a[i][j] * a[i][j];
                if (i != j) off += a[i][j] * a[i][j];
            }
        if (off <= 1e-30 * std::max(total, 1e-300)) break;
        for (size_t p = 0; p + 1 < n; ++p)
            for (size_t q = p + 1; q < n; ++q) {
                if (std::fabs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
    }
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return a[x][x] > a[y][y]; });
    std::vector<double> ev;
    for (size_t i : order) ev.push_back(a[i][i]);
    if (vecs) {
        *vecs = zeros(n, n);
        for (size_t c = 0; c < n; ++c)
            for (size_t r = 0; r < n; ++r) (*vecs)[r][c] = v[r][order[c]];
    }
    return ev;
}

// Singular values from the eigenvalues of the smaller Gram matrix.
inline std::vector<double> singular_values(const Mat& a) {
    const bool tall = a.size() >= a[0].size();
    const Mat g = tall ? matmul(transpose(a), a) : matmul(a, transpose(a));
    auto ev = symmetric_eigen(g);
    for (double& e : ev) e = std::sqrt(std::max(e, 0.0));
    return ev;
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0;
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-12)));
    return s;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
    const double m = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0;
    for (size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
    for (double& v : p) v /= s;
    return p;
}

}  // namespace oracle
