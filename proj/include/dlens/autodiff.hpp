#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "dlens/tensor.hpp"

namespace dlens::ad {

enum class Op : std::uint8_t {
    Constant,
    Parameter,
    MatMul,
    MatMulNT,
    Add,
    AddRow,
    Blend,
    ScaleCols,
    Scale,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    PrependOnes,
    SliceRow,
    Sum,
    KLFromLogits,
    Clamp01,
};

struct Var {
    size_t id = std::numeric_limits<size_t>::max();
    bool valid() const { return id != std::numeric_limits<size_t>::max(); }
};

// Append-only tape. Node ids are topologically ordered by construction.
// Nodes that do not depend on a trainable parameter carry no backward
// closure, so frozen weights never materialize gradients.
class Graph {
public:
    Var constant(Tensor value);
    // Non-owning: `value` must outlive the graph.
    Var constant_view(const Tensor& value);
    Var parameter(Tensor value);

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var add(Var a, Var b);
    Var add_row(Var a, Var row);
    // m * a + (1 - m) * alt, with m[r] broadcast over rows of a[n,r].
    Var blend(Var a, Var alt, Var m);
    Var scale_cols(Var a, Var w);
    Var scale(Var a, float s);
    Var softmax_rows(Var a, bool causal);
    Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);
    Var gelu(Var x);
    Var prepend_ones(Var x);
    Var slice_row(Var x, size_t row);
    Var sum(Var x);
    // KL(p || softmax(logits)) in nats over a single row of logits.
    Var kl_from_logits(std::span<const double> p, Var logits);
    // Clamp to [0,1] forward, identity gradient backward.
    Var clamp01(Var x);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool trainable(Var v) const { return nodes_.at(v.id).trainable; }
    Op op(Var v) const { return nodes_.at(v.id).op; }
    const std::vector<size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
    size_t size() const { return nodes_.size(); }
    // Number of log-probabilities clamped at log(1e-12) by kl_from_logits.
    size_t kl_clamp_events() const { return kl_clamps_; }

private:
    using Backward = std::function<void(Graph&, const Tensor& grad)>;

    struct Node {
        Op op;
        std::vector<size_t> inputs;
        Tensor owned;
        const Tensor* view = nullptr;
        bool requires_grad = false;
        bool trainable = false;
        Backward backward;
        Tensor grad;
        bool has_grad = false;
    };

    Var push(Op op, std::vector<size_t> inputs, Tensor value, Backward backward);
    bool any_requires_grad(std::initializer_list<Var> vars) const;
    void accumulate(size_t id, const Tensor& g);

    std::vector<Node> nodes_;
    size_t kl_clamps_ = 0;

    friend std::map<size_t, Tensor> backward(Graph& graph, Var loss);
};

// Reverse pass from a scalar loss. Returns gradients keyed by parameter node
// id; only trainable parameters appear.
std::map<size_t, Tensor> backward(Graph& graph, Var loss);

}  // namespace dlens::ad
