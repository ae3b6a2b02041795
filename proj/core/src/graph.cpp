#include "dtr/graph.hpp"

#include <algorithm>

namespace dtr {

template <typename T>
Var<T> Graph<T>::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::variable(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = recording_;
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::parameter(const Tensor<T>& tensor) {
    if (auto it = parameter_nodes_.find(&tensor); it != parameter_nodes_.end()) {
        return Var<T>{this, it->second};
    }
    Node n;
    n.external = &tensor;
    n.requires_grad = recording_;
    Var<T> v = push(std::move(n));
    parameter_nodes_.emplace(&tensor, v.id);
    return v;
}

template <typename T>
const Tensor<T>* Graph<T>::grad_of(const Tensor<T>& parameter) const {
    auto it = parameter_nodes_.find(&parameter);
    if (it == parameter_nodes_.end()) return nullptr;
    return grad(Var<T>{const_cast<Graph*>(this), it->second});
}

template <typename T>
Var<T> Graph<T>::emit(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    if (recording_) {
        n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                      [this](Var<T> p) { return nodes_[p.id].requires_grad; });
        if (n.requires_grad) n.backward = std::move(fn);
    }
    return push(std::move(n));
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
        n.grad = Tensor<T>(value(v).shape());
        n.has_grad = true;
    }
    return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
    if (value(loss).size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_string(value(loss).shape()));
    }
    if (!recording_) throw Error("backward: graph was built without gradient recording");
    if (backward_done_) throw Error("backward: already called on this graph");
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;

    grad_buffer(loss)[0] = T{1};
    for (std::int64_t id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.has_grad && n.backward) n.backward(*this, n.grad);
    }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace dtr
