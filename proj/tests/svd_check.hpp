#pragma once

// Worst-case errors of the library SVD against the fp64 oracle over a batch
// of seeded Gaussian matrices. Shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <random>

#include "dlens/linalg.hpp"
#include "oracles.hpp"

namespace svdcheck {

struct Errors {
    double ortho = 0.0, recon = 0.0, sigma_rel = 0.0;
    size_t matrices = 0;
};

inline dlens::linalg::Matrix gaussian(size_t m, size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    dlens::linalg::Matrix a(m, n);
    for (double& v : a.data) v = normal(rng);
    return a;
}

inline void accumulate(const dlens::linalg::Matrix& a, Errors& e) {
    const auto s = dlens::linalg::jacobi_svd(a);
    const size_t m = a.rows, n = a.cols, k = std::min(m, n);
    for (size_t p = 0; p < k; ++p)
        for (size_t q = 0; q < k; ++q) {
            double uu = 0, vv = 0;
            for (size_t i = 0; i < m; ++i) uu += s.u(i, p) * s.u(i, q);
            for (size_t i = 0; i < n; ++i) vv += s.v(i, p) * s.v(i, q);
            const double want = p == q ? 1.0 : 0.0;
            e.ortho = std::max({e.ortho, std::fabs(uu - want), std::fabs(vv - want)});
        }
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            double r = 0;
            for (size_t p = 0; p < k; ++p) r += s.u(i, p) * s.sigma[p] * s.v(j, p);
            e.recon = std::max(e.recon, std::fabs(r - a(i, j)));
        }
    oracle::Mat am = oracle::zeros(m, n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) am[i][j] = a(i, j);
    const auto ref = oracle::singular_values(am);
    for (size_t p = 0; p < k; ++p) {
        const double denom = std::max(ref[p], 1e-12 * ref[0]);
        e.sigma_rel = std::max(e.sigma_rel, std::fabs(s.sigma[p] - ref[p]) / denom);
        if (p > 0 && s.sigma[p] > s.sigma[p - 1]) e.sigma_rel = 1e300;  // not sorted
    }
    ++e.matrices;
}

// `count` matrices with shapes drawn from [1,max_m] x [1,max_n]; the first is
// always max_m x max_n and the second its transpose shape.
inline Errors run(size_t count, size_t max_m, size_t max_n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Errors e;
    for (size_t i = 0; i < count; ++i) {
        size_t m = 1 + rng() % max_m, n = 1 + rng() % max_n;
        if (i == 0) m = max_m, n = max_n;
        if (i == 1) m = max_n, n = max_m;
        accumulate(gaussian(m, n, rng), e);
    }
    return e;
}

}  // namespace svdcheck
