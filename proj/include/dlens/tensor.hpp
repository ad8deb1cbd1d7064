#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dlens {

// Dense row-major float32 array. A tensor of any rank is viewed as a
// rows() x cols() matrix where cols() is the last dimension.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape, float fill = 0.0f);
    Tensor(std::vector<size_t> shape, std::vector<float> data);

    static Tensor matrix(size_t rows, size_t cols, float fill = 0.0f);
    static Tensor vector(size_t n, float fill = 0.0f);
    static Tensor scalar(float v);
    static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor identity(size_t n);

    const std::vector<size_t>& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    size_t rows() const;
    size_t cols() const;

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }
    float& operator()(size_t i, size_t j) { return data_[i * cols() + j]; }
    float operator()(size_t i, size_t j) const { return data_[i * cols() + j]; }

    std::span<float> row(size_t i);
    std::span<const float> row(size_t i) const;

    Tensor reshaped(std::vector<size_t> shape) const;
    bool all_finite() const;
    std::string shape_str() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    std::vector<size_t> shape_;
    std::vector<float> data_;
};

// Kernels. All reductions accumulate in double and store float.
Tensor matmul(const Tensor& a, const Tensor& b);     // a[m,k] b[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a[m,k] b[n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a[k,m]^T b[k,n]
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b);
void add_row_inplace(Tensor& a, std::span<const float> row);
Tensor scaled(const Tensor& a, float s);

Tensor softmax_rows(const Tensor& a, bool causal);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
float gelu(float x);
Tensor gelu(const Tensor& x);

// Returns [1, x] row-wise: shape rows x (1 + cols).
Tensor prepend_ones(const Tensor& x);
Tensor slice_rows(const Tensor& x, size_t begin, size_t end);
Tensor slice_cols(const Tensor& x, size_t begin, size_t end);

float max_abs_diff(const Tensor& a, const Tensor& b);
double dot(std::span<const float> a, std::span<const float> b);

void require_shape(const Tensor& t, const std::vector<size_t>& shape, const std::string& what);

}  // namespace dlens
