#include "danp/autodiff.hpp"

#include <string>

namespace danp {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    if (validate_) value.validate("constant");
    nodes_.push_back(Node{std::move(value), {}, {}, false, true});
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
    if (validate_) value.validate("leaf");
    value.set_requires_grad(true);
    nodes_.push_back(Node{std::move(value), {}, {}, true, true});
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn backward) {
    if (consumed_) throw ContractError("cannot record on a tape after backward()");
    bool needs = false;
    for (auto id : inputs) needs = needs || nodes_[id].needs_grad;
    if (validate_) value.validate("op output #" + std::to_string(nodes_.size()));
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs, false});
    return {this, nodes_.size() - 1};
}

template <typename T>
std::vector<T>& Tape<T>::grad(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) node.grad.assign(node.value.numel(), T{0});
    return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("loss was recorded on a different tape");
    if (nodes_.empty()) throw ContractError("backward on an empty tape");
    if (nodes_[loss.id].value.numel() != 1)
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    if (consumed_) throw ContractError("backward already ran on this tape");
    consumed_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.is_leaf) continue;
        if (node.needs_grad && !node.grad.empty() && node.backward) node.backward(*this, i);
        // Every consumer of node i has already run, so it is dead now.
        node.grad = {};
        node.grad.shrink_to_fit();
        node.backward = {};
        node.value = Tensor<T>();
    }
}

template <typename T>
std::vector<T> Tape<T>::leaf_grad(Var<T> leaf) const {
    const Node& node = nodes_[leaf.id];
    if (!node.is_leaf) throw ContractError("leaf_grad on a non-leaf node");
    if (node.grad.empty()) return std::vector<T>(node.value.numel(), T{0});
    return node.grad;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace danp
