#pragma once

#include <cstddef>
#include <vector>

#include "dlens/tensor.hpp"

namespace dlens::linalg {

// Row-major double matrix used for factorization work.
struct Matrix {
    size_t rows = 0, cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    double& operator()(size_t i, size_t j) { return data[i * cols + j]; }
    double operator()(size_t i, size_t j) const { return data[i * cols + j]; }

    static Matrix from_tensor(const Tensor& t);
    Tensor to_tensor() const;
    Matrix transposed() const;
};

Matrix multiply(const Matrix& a, const Matrix& b);

// Thin Householder QR of a[m,n], m >= n: a = q r with q[m,n], r[n,n].
void householder_qr(const Matrix& a, Matrix& q, Matrix& r);

// Thin SVD a = u diag(sigma) v^T with k = min(m, n) components, sorted by
// descending sigma. QR-preconditioned one-sided (Hestenes) Jacobi.
struct Svd {
    Matrix u;  // [m, k]
    std::vector<double> sigma;
    Matrix v;  // [n, k]
};

inline constexpr int kMaxJacobiSweeps = 80;

// Throws std::runtime_error if the rotations have not converged after
// `max_sweeps` sweeps.
Svd jacobi_svd(const Matrix& a, int max_sweeps = kMaxJacobiSweeps);
// SVD of left[m,k] * right[k,n] without forming the product: QR of both
// factors, then Jacobi on the k x k core.
Svd factored_svd(const Matrix& left, const Matrix& right, int max_sweeps = kMaxJacobiSweeps);

}  // namespace dlens::linalg
