#include "dlens/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace dlens::ad {

namespace {

constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

}  // namespace

Var Graph::push(Op op, std::vector<size_t> inputs, Tensor value, Backward bw) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.owned = std::move(value);
    n.requires_grad = static_cast<bool>(bw);
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

bool Graph::any_requires_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
        if (nodes_.at(v.id).requires_grad) return true;
    return false;
}

const Tensor& Graph::value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.view ? *n.view : n.owned;
}

void Graph::accumulate(size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        add_inplace(n.grad, g);
    }
}

Var Graph::constant(Tensor value) { return push(Op::Constant, {}, std::move(value), nullptr); }

Var Graph::constant_view(const Tensor& value) {
    Var v = push(Op::Constant, {}, Tensor(), nullptr);
    nodes_[v.id].view = &value;
    return v;
}

Var Graph::parameter(Tensor value) {
    nodes_.push_back(Node{Op::Parameter, {}, std::move(value), nullptr, true, true, nullptr, {}, false});
    return Var{nodes_.size() - 1};
}

Var Graph::matmul(Var a, Var b) {
    Tensor out = dlens::matmul(value(a), value(b));
    Backward bw;
    if (any_requires_grad({a, b})) {
        bw = [a, b](Graph& g, const Tensor& grad) {
            if (g.requires_grad(a)) g.accumulate(a.id, dlens::matmul_nt(grad, g.value(b)));
            if (g.requires_grad(b)) g.accumulate(b.id, dlens::matmul_tn(g.value(a), grad));
        };
    }
    return push(Op::MatMul, {a.id, b.id}, std::move(out), std::move(bw));
}

Var Graph::matmul_nt(Var a, Var b) {
    Tensor out = dlens::matmul_nt(value(a), value(b));
    Backward bw;
    if (any_requires_grad({a, b})) {
        bw = [a, b](Graph& g, const Tensor& grad) {
            if (g.requires_grad(a)) g.accumulate(a.id, dlens::matmul(grad, g.value(b)));
            if (g.requires_grad(b)) g.accumulate(b.id, dlens::matmul_tn(grad, g.value(a)));
        };
    }
    return push(Op::MatMulNT, {a.id, b.id}, std::move(out), std::move(bw));
}

Var Graph::add(Var a, Var b) {
    Tensor out = dlens::add(value(a), value(b));
    Backward bw;
    if (any_requires_grad({a, b})) {
        bw = [a, b](Graph& g, const Tensor& grad) {
            g.accumulate(a.id, grad);
            g.accumulate(b.id, grad);
        };
    }
    return push(Op::Add, {a.id, b.id}, std::move(out), std::move(bw));
}

Var Graph::add_row(Var a, Var row) {
    Tensor out = value(a);
    add_row_inplace(out, value(row).values());
    Backward bw;
    if (any_requires_grad({a, row})) {
        bw = [a, row](Graph& g, const Tensor& grad) {
            g.accumulate(a.id, grad);
            if (g.requires_grad(row)) {
                Tensor r(g.value(row).shape());
                for (size_t i = 0; i < grad.rows(); ++i)
                    for (size_t j = 0; j < grad.cols(); ++j) r[j] += grad(i, j);
                g.accumulate(row.id, r);
            }
        };
    }
    return push(Op::AddRow, {a.id, row.id}, std::move(out), std::move(bw));
}

Var Graph::blend(Var a, Var alt, Var m) {
    const Tensor& av = value(a);
    const Tensor& lv = value(alt);
    const Tensor& mv = value(m);
    if (av.shape() != lv.shape()) throw std::invalid_argument("blend: operand shapes differ");
    if (mv.size() != av.cols()) throw std::invalid_argument("blend: mask width mismatch");
    Tensor out(av.shape());
    for (size_t i = 0; i < av.rows(); ++i)
        for (size_t j = 0; j < av.cols(); ++j)
            out(i, j) = mv[j] * av(i, j) + (1.0f - mv[j]) * lv(i, j);
    Backward bw;
    if (any_requires_grad({a, alt, m})) {
        bw = [a, alt, m](Graph& g, const Tensor& grad) {
            const Tensor& A = g.value(a);
            const Tensor& L = g.value(alt);
            const Tensor& M = g.value(m);
            if (g.requires_grad(a)) {
                Tensor d(A.shape());
                for (size_t i = 0; i < A.rows(); ++i)
                    for (size_t j = 0; j < A.cols(); ++j) d(i, j) = M[j] * grad(i, j);
                g.accumulate(a.id, d);
            }
            if (g.requires_grad(alt)) {
                Tensor d(L.shape());
                for (size_t i = 0; i < L.rows(); ++i)
                    for (size_t j = 0; j < L.cols(); ++j) d(i, j) = (1.0f - M[j]) * grad(i, j);
                g.accumulate(alt.id, d);
            }
            if (g.requires_grad(m)) {
                std::vector<double> acc(M.size(), 0.0);
                for (size_t i = 0; i < A.rows(); ++i)
                    for (size_t j = 0; j < A.cols(); ++j)
                        acc[j] += static_cast<double>(grad(i, j)) * (A(i, j) - L(i, j));
                Tensor d(M.shape());
                for (size_t j = 0; j < acc.size(); ++j) d[j] = static_cast<float>(acc[j]);
                g.accumulate(m.id, d);
            }
        };
    }
    return push(Op::Blend, {a.id, alt.id, m.id}, std::move(out), std::move(bw));
}

Var Graph::scale_cols(Var a, Var w) {
    const Tensor& av = value(a);
    const Tensor& wv = value(w);
    if (wv.size() != av.cols()) throw std::invalid_argument("scale_cols: width mismatch");
    Tensor out(av.shape());
    for (size_t i = 0; i < av.rows(); ++i)
        for (size_t j = 0; j < av.cols(); ++j) out(i, j) = av(i, j) * wv[j];
    Backward bw;
    if (any_requires_grad({a, w})) {
        bw = [a, w](Graph& g, const Tensor& grad) {
            const Tensor& A = g.value(a);
            const Tensor& W = g.value(w);
            if (g.requires_grad(a)) {
                Tensor d(A.shape());
                for (size_t i = 0; i < A.rows(); ++i)
                    for (size_t j = 0; j < A.cols(); ++j) d(i, j) = grad(i, j) * W[j];
                g.accumulate(a.id, d);
            }
            if (g.requires_grad(w)) {
                std::vector<double> acc(W.size(), 0.0);
                for (size_t i = 0; i < A.rows(); ++i)
                    for (size_t j = 0; j < A.cols(); ++j)
                        acc[j] += static_cast<double>(grad(i, j)) * A(i, j);
                Tensor d(W.shape());
                for (size_t j = 0; j < acc.size(); ++j) d[j] = static_cast<float>(acc[j]);
                g.accumulate(w.id, d);
            }
        };
    }
    return push(Op::ScaleCols, {a.id, w.id}, std::move(out), std::move(bw));
}

Var Graph::scale(Var a, float s) {
    Tensor out = scaled(value(a), s);
    Backward bw;
    if (requires_grad(a)) {
        bw = [a, s](Graph& g, const Tensor& grad) { g.accumulate(a.id, scaled(grad, s)); };
    }
    return push(Op::Scale, {a.id}, std::move(out), std::move(bw));
}

Var Graph::softmax_rows(Var a, bool causal) {
    Tensor out = dlens::softmax_rows(value(a), causal);
    Backward bw;
    if (requires_grad(a)) {
        const size_t self = nodes_.size();
        bw = [a, self](Graph& g, const Tensor& grad) {
            const Tensor& y = g.value(Var{self});
            Tensor d(y.shape());
            for (size_t i = 0; i < y.rows(); ++i) {
                double s = 0.0;
                for (size_t j = 0; j < y.cols(); ++j) s += static_cast<double>(grad(i, j)) * y(i, j);
                for (size_t j = 0; j < y.cols(); ++j)
                    d(i, j) = static_cast<float>(y(i, j) * (grad(i, j) - s));
            }
            g.accumulate(a.id, d);
        };
    }
    return push(Op::SoftmaxRows, {a.id}, std::move(out), std::move(bw));
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, float eps) {
    Tensor out = dlens::layer_norm(value(x), value(gamma), value(beta), eps);
    Backward bw;
    if (any_requires_grad({x, gamma, beta})) {
        bw = [x, gamma, beta, eps](Graph& g, const Tensor& grad) {
            const Tensor& X = g.value(x);
            const Tensor& G = g.value(gamma);
            const size_t d = X.cols();
            Tensor dx(X.shape());
            std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
            std::vector<double> xhat(d), dxhat(d);
            for (size_t i = 0; i < X.rows(); ++i) {
                const auto in = X.row(i);
                double mean = 0.0;
                for (float v : in) mean += v;
                mean /= static_cast<double>(d);
                double var = 0.0;
                for (float v : in) var += (v - mean) * (v - mean);
                var /= static_cast<double>(d);
                const double rstd = 1.0 / std::sqrt(var + eps);
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (size_t j = 0; j < d; ++j) {
                    xhat[j] = (in[j] - mean) * rstd;
                    dxhat[j] = static_cast<double>(grad(i, j)) * G[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                    dgamma[j] += static_cast<double>(grad(i, j)) * xhat[j];
                    dbeta[j] += grad(i, j);
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                for (size_t j = 0; j < d; ++j)
                    dx(i, j) = static_cast<float>(rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
            }
            if (g.requires_grad(x)) g.accumulate(x.id, dx);
            if (g.requires_grad(gamma)) {
                Tensor t(G.shape());
                for (size_t j = 0; j < d; ++j) t[j] = static_cast<float>(dgamma[j]);
                g.accumulate(gamma.id, t);
            }
            if (g.requires_grad(beta)) {
                Tensor t(g.value(beta).shape());
                for (size_t j = 0; j < d; ++j) t[j] = static_cast<float>(dbeta[j]);
                g.accumulate(beta.id, t);
            }
        };
    }
    return push(Op::LayerNorm, {x.id, gamma.id, beta.id}, std::move(out), std::move(bw));
}

Var Graph::gelu(Var x) {
    Tensor out = dlens::gelu(value(x));
    Backward bw;
    if (requires_grad(x)) {
        bw = [x](Graph& g, const Tensor& grad) {
            constexpr double k = 0.7978845608028654;
            const Tensor& X = g.value(x);
            Tensor d(X.shape());
            for (size_t i = 0; i < X.size(); ++i) {
                const double v = X[i];
                const double t = std::tanh(k * (v + 0.044715 * v * v * v));
                const double dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * v * v);
                d[i] = static_cast<float>(grad[i] * dv);
            }
            g.accumulate(x.id, d);
        };
    }
    return push(Op::Gelu, {x.id}, std::move(out), std::move(bw));
}

Var Graph::prepend_ones(Var x) {
    Tensor out = dlens::prepend_ones(value(x));
    Backward bw;
    if (requires_grad(x)) {
        bw = [x](Graph& g, const Tensor& grad) {
            g.accumulate(x.id, slice_cols(grad, 1, grad.cols()).reshaped(g.value(x).shape()));
        };
    }
    return push(Op::PrependOnes, {x.id}, std::move(out), std::move(bw));
}

Var Graph::slice_row(Var x, size_t row) {
    const Tensor& X = value(x);
    if (row >= X.rows()) throw std::out_of_range("slice_row: row out of range");
    Tensor out = slice_rows(X, row, row + 1);
    Backward bw;
    if (requires_grad(x)) {
        bw = [x, row](Graph& g, const Tensor& grad) {
            Tensor d(g.value(x).shape());
            auto r = d.row(row);
            for (size_t j = 0; j < r.size(); ++j) r[j] = grad[j];
            g.accumulate(x.id, d);
        };
    }
    return push(Op::SliceRow, {x.id}, std::move(out), std::move(bw));
}

Var Graph::sum(Var x) {
    double s = 0.0;
    for (float v : value(x).values()) s += v;
    Backward bw;
    if (requires_grad(x)) {
        bw = [x](Graph& g, const Tensor& grad) {
            g.accumulate(x.id, Tensor(g.value(x).shape(), grad[0]));
        };
    }
    return push(Op::Sum, {x.id}, Tensor::scalar(static_cast<float>(s)), std::move(bw));
}

Var Graph::kl_from_logits(std::span<const double> p, Var logits) {
    const Tensor& z = value(logits);
    if (z.rows() != 1 || z.cols() != p.size()) {
        throw std::invalid_argument("kl_from_logits: expected one row of " + std::to_string(p.size()) +
                                    " logits, got " + z.shape_str());
    }
    const size_t n = p.size();
    double mx = -INFINITY;
    for (float v : z.values()) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (float v : z.values()) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> q(n);
    double kl = 0.0;
    for (size_t j = 0; j < n; ++j) {
        double logq = z[j] - lse;
        q[j] = std::exp(logq);
        if (p[j] <= 0.0) continue;
        if (logq < kLogFloor) {
            logq = kLogFloor;
            ++kl_clamps_;
        }
        kl += p[j] * (std::log(p[j]) - logq);
    }
    Backward bw;
    if (requires_grad(logits)) {
        std::vector<double> diff(n);
        for (size_t j = 0; j < n; ++j) diff[j] = q[j] - p[j];
        bw = [logits, diff = std::move(diff)](Graph& g, const Tensor& grad) {
            Tensor d(g.value(logits).shape());
            for (size_t j = 0; j < diff.size(); ++j) d[j] = static_cast<float>(grad[0] * diff[j]);
            g.accumulate(logits.id, d);
        };
    }
    return push(Op::KLFromLogits, {logits.id}, Tensor::scalar(static_cast<float>(kl)), std::move(bw));
}

Var Graph::clamp01(Var x) {
    Tensor out = value(x);
    for (auto& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
    Backward bw;
    if (requires_grad(x)) {
        bw = [x](Graph& g, const Tensor& grad) { g.accumulate(x.id, grad); };
    }
    return push(Op::Clamp01, {x.id}, std::move(out), std::move(bw));
}

std::map<size_t, Tensor> backward(Graph& graph, Var loss) {
    if (!loss.valid() || loss.id >= graph.nodes_.size()) {
        throw std::invalid_argument("backward: loss node is not part of the graph");
    }
    if (graph.value(loss).size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got " + graph.value(loss).shape_str());
    }
    std::map<size_t, Tensor> grads;
    if (!graph.requires_grad(loss)) {
        for (size_t i = 0; i <= loss.id; ++i)
            if (graph.nodes_[i].trainable) grads.emplace(i, Tensor(graph.value(Var{i}).shape()));
        return grads;
    }
    graph.accumulate(loss.id, Tensor(graph.value(loss).shape(), 1.0f));
    for (size_t i = loss.id + 1; i-- > 0;) {
        auto& node = graph.nodes_[i];
        if (!node.has_grad || !node.backward) continue;
        Tensor g = std::move(node.grad);
        node.has_grad = false;
        node.backward(graph, g);
        node.grad = std::move(g);
        node.has_grad = true;
    }
    for (size_t i = 0; i <= loss.id; ++i) {
        auto& node = graph.nodes_[i];
        if (!node.trainable) continue;
        grads.emplace(i, node.has_grad ? node.grad : Tensor(graph.value(Var{i}).shape()));
    }
    return grads;
}

}  // namespace dlens::ad
