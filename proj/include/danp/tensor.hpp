#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace danp {

/// Shapes disagree for an operation (the message names both shapes).
class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Caller violated a documented precondition.
class ContractError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf was found by a validation hook.
class NonFiniteError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array. Rank 1 and 2 cover everything the model needs;
/// higher ranks are allowed for storage and reshape only.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0});
    Tensor(Shape shape, std::vector<T> data);

    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);
    static Tensor vector(std::initializer_list<T> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Matrix view: leading extents are folded into rows.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    /// Throws NonFiniteError naming `what` and the first offending index.
    void validate(std::string_view what) const;
    bool all_finite() const;

    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        out.set_requires_grad(requires_grad_);
        return out;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

  private:
    Shape shape_;
    std::vector<T> data_;
    bool requires_grad_ = false;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace danp
