#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <vector>

#include "dtr/rng.hpp"
#include "dtr/tensor.hpp"

namespace dtr {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::uint32_t id = 0;

    const Tensor<T>& value() const { return graph->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is already topologically sorted and backward() walks it in
/// reverse, visiting each node once.
///
/// A graph built with record_gradients = false keeps only values; that is
/// the eval-mode path used for inference and teacher forwards.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

    explicit Graph(bool record_gradients = true) : recording_(record_gradients) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    // Leaf that never receives a gradient.
    Var<T> constant(Tensor<T> value);
    // Owned leaf that receives a gradient (used for gradient checks).
    Var<T> variable(Tensor<T> value);
    // Borrowed leaf; the tensor must outlive the graph. Repeated calls with
    // the same tensor return the same node.
    Var<T> parameter(const Tensor<T>& tensor);

    const Tensor<T>& value(Var<T> v) const {
        const Node& n = nodes_[v.id];
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(Var<T> v) const noexcept { return nodes_[v.id].requires_grad; }

    // Null when no gradient reached the node.
    const Tensor<T>* grad(Var<T> v) const {
        const Node& n = nodes_[v.id];
        return n.has_grad ? &n.grad : nullptr;
    }
    const Tensor<T>* grad_of(const Tensor<T>& parameter) const;

    /// Reverse-mode sweep from a scalar loss. May be called once per graph.
    void backward(Var<T> loss);

    /// Appends an op node. `fn` is dropped when nothing upstream needs a
    /// gradient or the graph is not recording.
    Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn);

    // Zero-initialised on first use. Only valid for nodes with requires_grad.
    Tensor<T>& grad_buffer(Var<T> v);

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
        bool has_grad = false;
    };

    Var<T> push(Node node);

    bool recording_;
    bool backward_done_ = false;
    std::vector<Node> nodes_;
    std::unordered_map<const Tensor<T>*, std::uint32_t> parameter_nodes_;
};

/// Differentiable op catalog. Every op checks operand shapes and throws
/// ShapeError naming both shapes on mismatch. Masks are 0/1 bytes.
namespace ops {

using Mask = std::span<const std::uint8_t>;

// [m, k] x [k, n] -> [m, n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// x [m, k] . w [k, n] + b [n]
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
// [m, n] . [n] -> [m]
template <typename T> Var<T> matvec(Var<T> x, Var<T> w);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
// a [m, n] + bias [n], broadcast over rows.
template <typename T> Var<T> add_row(Var<T> a, Var<T> bias);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> concat_rows(Var<T> a, Var<T> b);
template <typename T> Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count);
template <typename T> Var<T> gather_rows(Var<T> a, std::span<const std::uint32_t> rows);
// Rows of `table` selected by token id; ids outside the table are DataError.
template <typename T> Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids);
template <typename T> Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-12));
// Exact form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T> Var<T> gelu(Var<T> x);
// Row-wise softmax over positions with mask = 1; masked positions get 0.
template <typename T> Var<T> softmax(Var<T> x, Mask mask = {});
// Inverted dropout; identity when !train or rate == 0.
template <typename T> Var<T> dropout(Var<T> x, T rate, bool train, CounterRng& rng);
// Mean squared error over the elements of rows with row_mask = 1.
template <typename T> Var<T> mse(Var<T> a, Var<T> b, Mask row_mask = {});
// Mean over rows of -log softmax(logits)[target], softmax restricted to mask.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> targets, Mask mask = {});
// Mean over rows of KL(softmax(reference) || softmax(logits)) over mask.
template <typename T> Var<T> kl_divergence(Var<T> reference, Var<T> logits, Mask mask = {});

struct AttentionShape {
    std::size_t batch = 1;
    std::size_t heads = 1;
};

/// Multi-head scaled dot-product attention over q, k, v of shape
/// [batch * len, d]. key_mask has batch * len entries; masked keys get zero
/// weight from every query of the same sequence.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, Mask key_mask, AttentionShape shape, T dropout_rate,
                 bool train, CounterRng& rng);

}  // namespace ops
}  // namespace dtr
