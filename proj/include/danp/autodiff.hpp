#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "danp/tensor.hpp"

namespace danp {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode tape. Operations are appended in creation order, so the
/// recorded sequence is topologically sorted by construction; backward()
/// walks it once in reverse.
template <typename T>
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> leaf(Tensor<T> value);

    /// Records an op. The node needs a gradient iff any input does.
    Var<T> record(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn backward);

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Gradient slot, zero-filled on first touch.
    std::vector<T>& grad(std::size_t id);
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    /// Seeds d(loss)/d(loss) = 1 and accumulates into every leaf's grad
    /// slot. Intermediate values and gradients are released as they are
    /// consumed, so a tape supports exactly one backward pass.
    void backward(Var<T> loss);

    /// Gradient of a leaf after backward(); zeros if the leaf was unused.
    std::vector<T> leaf_grad(Var<T> leaf) const;

    std::size_t size() const { return nodes_.size(); }

    /// When on, every recorded value is checked for NaN/Inf.
    void set_validate(bool on) { validate_ = on; }

  private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        BackwardFn backward;
        bool needs_grad = false;
        bool is_leaf = false;
    };

    std::vector<Node> nodes_;
    bool validate_ = false;
    bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(id);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace danp
