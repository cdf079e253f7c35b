#include "danp/params.hpp"

namespace danp {

ParamGroup param_group(const std::string& key) {
    return key.rfind("dec.", 0) == 0 ? ParamGroup::decoder : ParamGroup::encoder;
}

template <typename T>
void ParamStore<T>::insert(std::string key, Tensor<T> value) {
    if (key.empty()) throw ContractError("parameter key must be non-empty");
    value.set_requires_grad(true);
    tensors_.insert_or_assign(std::move(key), std::move(value));
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& key) const {
    auto it = tensors_.find(key);
    if (it == tensors_.end()) throw ContractError("unknown parameter key '" + key + "'");
    return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& key) {
    auto it = tensors_.find(key);
    if (it == tensors_.end()) throw ContractError("unknown parameter key '" + key + "'");
    return it->second;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors_) n += v.numel();
    return n;
}

template <typename T>
std::vector<std::string> ParamStore<T>::keys() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [k, v] : tensors_) out.push_back(k);
    return out;
}

template <typename T>
Var<T> ParamBinding<T>::operator()(const std::string& key) {
    auto it = bound_.find(key);
    if (it != bound_.end()) return it->second;
    const Tensor<T>& value = store_->at(key);
    Var<T> var = trainable_ ? tape_->leaf(value) : tape_->constant(value);
    bound_.emplace(key, var);
    return var;
}

template <typename T>
GradStore<T> ParamBinding<T>::grads() const {
    GradStore<T> out;
    for (const auto& [key, value] : *store_) {
        auto it = bound_.find(key);
        if (it == bound_.end() || !trainable_)
            out.emplace(key, std::vector<T>(value.numel(), T{0}));
        else
            out.emplace(key, tape_->leaf_grad(it->second));
    }
    return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class ParamBinding<float>;
template class ParamBinding<double>;

}  // namespace danp
