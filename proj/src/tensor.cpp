#include "dlens/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dlens {

namespace {

size_t product(const std::vector<size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), size_t{1}, std::multiplies<>());
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
}

}  // namespace

Tensor::Tensor(std::vector<size_t> shape, float fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (product(shape_) != data_.size()) {
        throw std::invalid_argument("tensor: shape " + shape_str() + " does not match " +
                                    std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::matrix(size_t rows, size_t cols, float fill) { return Tensor({rows, cols}, fill); }
Tensor Tensor::vector(size_t n, float fill) { return Tensor({n}, fill); }
Tensor Tensor::scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const size_t r = rows.size();
    const size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(size_t n) {
    Tensor t = matrix(n, n);
    for (size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
}

size_t Tensor::rows() const {
    if (shape_.empty()) return 0;
    if (shape_.size() == 1) return 1;
    size_t r = 1;
    for (size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
    return r;
}

size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

std::span<float> Tensor::row(size_t i) { return {data_.data() + i * cols(), cols()}; }
std::span<const float> Tensor::row(size_t i) const { return {data_.data() + i * cols(), cols()}; }

Tensor Tensor::reshaped(std::vector<size_t> shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw std::invalid_argument("matmul: inner dimensions differ " + a.shape_str() + " x " +
                                    b.shape_str());
    }
    Tensor c = Tensor::matrix(m, n);
    std::vector<double> acc(n);
    for (size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* ar = a.data() + i * k;
        for (size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            const float* br = b.data() + p * n;
            for (size_t j = 0; j < n; ++j) acc[j] += av * br[j];
        }
        float* cr = c.data() + i * n;
        for (size_t j = 0; j < n; ++j) cr[j] = static_cast<float>(acc[j]);
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw std::invalid_argument("matmul_nt: inner dimensions differ " + a.shape_str() +
                                    " x " + b.shape_str() + "^T");
    }
    Tensor c = Tensor::matrix(m, n);
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) c(i, j) = static_cast<float>(dot(a.row(i), b.row(j)));
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    const size_t k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw std::invalid_argument("matmul_tn: inner dimensions differ " + a.shape_str() +
                                    "^T x " + b.shape_str());
    }
    std::vector<double> acc(m * n, 0.0);
    for (size_t p = 0; p < k; ++p) {
        const float* ar = a.data() + p * m;
        const float* br = b.data() + p * n;
        for (size_t i = 0; i < m; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* cr = acc.data() + i * n;
            for (size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
    Tensor c = Tensor::matrix(m, n);
    for (size_t i = 0; i < m * n; ++i) c[i] = static_cast<float>(acc[i]);
    return c;
}

Tensor transpose(const Tensor& a) {
    const size_t m = a.rows(), n = a.cols();
    Tensor t = Tensor::matrix(n, m);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
    return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor c = a;
    add_inplace(c, b);
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    Tensor c = a;
    for (size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

void add_inplace(Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void add_row_inplace(Tensor& a, std::span<const float> row) {
    if (row.size() != a.cols()) throw std::invalid_argument("add_row: width mismatch");
    for (size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        for (size_t j = 0; j < r.size(); ++j) r[j] += row[j];
    }
}

Tensor scaled(const Tensor& a, float s) {
    Tensor c = a;
    for (auto& v : c.values()) v *= s;
    return c;
}

Tensor softmax_rows(const Tensor& a, bool causal) {
    Tensor out(a.shape());
    const size_t n = a.cols();
    for (size_t i = 0; i < a.rows(); ++i) {
        const auto in = a.row(i);
        auto o = out.row(i);
        const size_t limit = causal ? std::min(n, i + 1) : n;
        double mx = -INFINITY;
        for (size_t j = 0; j < limit; ++j) mx = std::max(mx, static_cast<double>(in[j]));
        double sum = 0.0;
        std::vector<double> e(limit);
        for (size_t j = 0; j < limit; ++j) {
            e[j] = std::exp(static_cast<double>(in[j]) - mx);
            sum += e[j];
        }
        for (size_t j = 0; j < limit; ++j) o[j] = static_cast<float>(e[j] / sum);
        for (size_t j = limit; j < n; ++j) o[j] = 0.0f;
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d) {
        throw std::invalid_argument("layer_norm: gamma/beta width " + gamma.shape_str() +
                                    " does not match input " + x.shape_str());
    }
    Tensor out(x.shape());
    for (size_t i = 0; i < x.rows(); ++i) {
        const auto in = x.row(i);
        double mean = 0.0;
        for (float v : in) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (float v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        auto o = out.row(i);
        for (size_t j = 0; j < d; ++j) {
            o[j] = static_cast<float>((in[j] - mean) * rstd * gamma[j] + beta[j]);
        }
    }
    return out;
}

float gelu(float x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    const double xd = x;
    return static_cast<float>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.values()) v = gelu(v);
    return out;
}

Tensor prepend_ones(const Tensor& x) {
    const size_t m = x.rows(), n = x.cols();
    Tensor out = Tensor::matrix(m, n + 1);
    for (size_t i = 0; i < m; ++i) {
        out(i, 0) = 1.0f;
        std::copy_n(x.data() + i * n, n, out.data() + i * (n + 1) + 1);
    }
    return out;
}

Tensor slice_rows(const Tensor& x, size_t begin, size_t end) {
    if (begin > end || end > x.rows()) throw std::out_of_range("slice_rows: bad range");
    const size_t n = x.cols();
    std::vector<float> data(x.data() + begin * n, x.data() + end * n);
    return Tensor({end - begin, n}, std::move(data));
}

Tensor slice_cols(const Tensor& x, size_t begin, size_t end) {
    if (begin > end || end > x.cols()) throw std::out_of_range("slice_cols: bad range");
    Tensor out = Tensor::matrix(x.rows(), end - begin);
    for (size_t i = 0; i < x.rows(); ++i)
        for (size_t j = begin; j < end; ++j) out(i, j - begin) = x(i, j);
    return out;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same(a, b, "max_abs_diff");
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

void require_shape(const Tensor& t, const std::vector<size_t>& shape, const std::string& what) {
    if (t.shape() != shape) {
        Tensor expect(shape);
        throw std::invalid_argument(what + ": expected shape " + expect.shape_str() + ", got " +
                                    t.shape_str());
    }
}

}  // namespace dlens
