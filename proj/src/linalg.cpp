#include "dlens/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dlens::linalg {

Matrix Matrix::from_tensor(const Tensor& t) {
    Matrix m(t.rows(), t.cols());
    for (size_t i = 0; i < t.size(); ++i) m.data[i] = t[i];
    return m;
}

Tensor Matrix::to_tensor() const {
    Tensor t = Tensor::matrix(rows, cols);
    for (size_t i = 0; i < data.size(); ++i) t[i] = static_cast<float>(data[i]);
    return t;
}

Matrix Matrix::transposed() const {
    Matrix t(cols, rows);
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
}

Matrix multiply(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("linalg::multiply: inner dimensions differ");
    Matrix c(a.rows, b.cols);
    for (size_t i = 0; i < a.rows; ++i) {
        double* cr = &c.data[i * c.cols];
        for (size_t p = 0; p < a.cols; ++p) {
            const double av = a(i, p);
            if (av == 0.0) continue;
            const double* br = &b.data[p * b.cols];
            for (size_t j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

void householder_qr(const Matrix& a, Matrix& q, Matrix& r) {
    const size_t m = a.rows, n = a.cols;
    if (m < n) throw std::invalid_argument("householder_qr: needs rows >= cols");
    // Work column-major: col j of `w` is w[j*m .. j*m+m).
    std::vector<double> w(m * n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) w[j * m + i] = a(i, j);
    std::vector<std::vector<double>> reflectors(n);
    std::vector<double> betas(n, 0.0);

    for (size_t k = 0; k < n; ++k) {
        double* col = &w[k * m];
        double norm = 0.0;
        for (size_t i = k; i < m; ++i) norm += col[i] * col[i];
        norm = std::sqrt(norm);
        std::vector<double> v(m - k, 0.0);
        if (norm == 0.0) {
            reflectors[k] = std::move(v);
            continue;
        }
        const double alpha = col[k] > 0 ? -norm : norm;
        for (size_t i = k; i < m; ++i) v[i - k] = col[i];
        v[0] -= alpha;
        double vnorm2 = 0.0;
        for (double x : v) vnorm2 += x * x;
        const double beta = vnorm2 > 0 ? 2.0 / vnorm2 : 0.0;
        for (size_t j = k; j < n; ++j) {
            double* cj = &w[j * m];
            double s = 0.0;
            for (size_t i = k; i < m; ++i) s += v[i - k] * cj[i];
            s *= beta;
            for (size_t i = k; i < m; ++i) cj[i] -= s * v[i - k];
        }
        reflectors[k] = std::move(v);
        betas[k] = beta;
    }

    r = Matrix(n, n);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i; j < n; ++j) r(i, j) = w[j * m + i];

    // q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    std::vector<double> qc(m * n, 0.0);  // column-major
    for (size_t j = 0; j < n; ++j) qc[j * m + j] = 1.0;
    for (size_t k = n; k-- > 0;) {
        const auto& v = reflectors[k];
        if (betas[k] == 0.0) continue;
        for (size_t j = 0; j < n; ++j) {
            double* cj = &qc[j * m];
            double s = 0.0;
            for (size_t i = k; i < m; ++i) s += v[i - k] * cj[i];
            s *= betas[k];
            for (size_t i = k; i < m; ++i) cj[i] -= s * v[i - k];
        }
    }
    q = Matrix(m, n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) q(i, j) = qc[j * m + i];
}

namespace {

// One-sided Jacobi on a square matrix g[n,n]: finds orthogonal v such that
// the columns of g v are mutually orthogonal. Column-major storage.
Svd hestenes(const Matrix& g_in, int max_sweeps) {
    const size_t n = g_in.rows;
    std::vector<double> g(n * n), v(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) g[j * n + i] = g_in(i, j);
    for (size_t j = 0; j < n; ++j) v[j * n + j] = 1.0;

    constexpr double tol = 1e-15;
    bool converged = n < 2;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        bool rotated = false;
        for (size_t p = 0; p + 1 < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                double* gp = &g[p * n];
                double* gq = &g[q * n];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (size_t i = 0; i < n; ++i) {
                    alpha += gp[i] * gp[i];
                    beta += gq[i] * gq[i];
                    gamma += gp[i] * gq[i];
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (size_t i = 0; i < n; ++i) {
                    const double x = gp[i], y = gq[i];
                    gp[i] = c * x - s * y;
                    gq[i] = s * x + c * y;
                }
                double* vp = &v[p * n];
                double* vq = &v[q * n];
                for (size_t i = 0; i < n; ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        converged = !rotated;
    }
    if (!converged) {
        throw std::runtime_error("jacobi_svd: no convergence after " + std::to_string(max_sweeps) +
                                 " sweeps (degenerate input?)");
    }

    std::vector<double> norms(n);
    for (size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += g[j * n + i] * g[j * n + i];
        norms[j] = std::sqrt(s);
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return norms[a] > norms[b]; });

    Svd out;
    out.u = Matrix(n, n);
    out.v = Matrix(n, n);
    out.sigma.resize(n);
    for (size_t k = 0; k < n; ++k) {
        const size_t j = order[k];
        out.sigma[k] = norms[j];
        for (size_t i = 0; i < n; ++i) {
            out.u(i, k) = norms[j] > 0 ? g[j * n + i] / norms[j] : 0.0;
            out.v(i, k) = v[j * n + i];
        }
    }
    return out;
}

}  // namespace

Svd jacobi_svd(const Matrix& a, int max_sweeps) {
    if (a.rows < a.cols) {
        Svd t = jacobi_svd(a.transposed(), max_sweeps);
        std::swap(t.u, t.v);
        return t;
    }
    if (a.cols == 0) return Svd{Matrix(a.rows, 0), {}, Matrix(0, 0)};
    Matrix q, r;
    householder_qr(a, q, r);
    Svd core = hestenes(r, max_sweeps);
    core.u = multiply(q, core.u);
    return core;
}

Svd factored_svd(const Matrix& left, const Matrix& right, int max_sweeps) {
    if (left.cols != right.rows) throw std::invalid_argument("factored_svd: inner dimensions differ");
    const size_t k = left.cols;
    if (left.rows < k || right.cols < k) return jacobi_svd(multiply(left, right), max_sweeps);
    Matrix q1, r1, q2, r2;
    householder_qr(left, q1, r1);
    householder_qr(right.transposed(), q2, r2);
    Svd core = hestenes(multiply(r1, r2.transposed()), max_sweeps);
    return Svd{multiply(q1, core.u), core.sigma, multiply(q2, core.v)};
}

}  // namespace dlens::linalg
