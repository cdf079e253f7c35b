#include "danp/tensor.hpp"

#include <cmath>
#include <sstream>

namespace danp {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

namespace {
void check_extents(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}
}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                             " values, got " + std::to_string(data_.size()));
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> data;
    std::size_t ncols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
        if (r.size() != ncols) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), ncols}, std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    if (shape_.size() < 2) return 1;
    return data_.size() / shape_.back();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    return shape_.empty() ? 0 : shape_.back();
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
void Tensor<T>::validate(std::string_view what) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            std::ostringstream os;
            os << "non-finite value " << data_[i] << " at flat index " << i << " of " << what << ' '
               << shape_str(shape_);
            throw NonFiniteError(os.str());
        }
    }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    Tensor out(std::move(shape), data_);
    out.requires_grad_ = requires_grad_;
    return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace danp
