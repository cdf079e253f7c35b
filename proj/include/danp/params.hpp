#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "danp/autodiff.hpp"

namespace danp {

/// Parameter groups used by freeze fine-tuning.
enum class ParamGroup { encoder, decoder };

/// Decoder keys live under "dec."; everything else is encoder.
ParamGroup param_group(const std::string& key);

/// Named learnable tensors. Keys iterate in lexicographic order.
template <typename T>
class ParamStore {
  public:
    using Map = std::map<std::string, Tensor<T>>;

    void insert(std::string key, Tensor<T> value);
    bool contains(const std::string& key) const { return tensors_.count(key) != 0; }
    const Tensor<T>& at(const std::string& key) const;
    Tensor<T>& at(const std::string& key);

    std::size_t size() const { return tensors_.size(); }
    std::size_t parameter_count() const;
    std::vector<std::string> keys() const;

    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }
    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [k, v] : tensors_) out.insert(k, v.template cast<U>());
        return out;
    }

    friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.tensors_ == b.tensors_; }

  private:
    Map tensors_;
};

/// Gradients keyed like a ParamStore.
template <typename T>
using GradStore = std::map<std::string, std::vector<T>>;

/// Lazily binds store entries as tape leaves and collects their gradients.
template <typename T>
class ParamBinding {
  public:
    /// With trainable=false parameters enter the tape as constants.
    ParamBinding(Tape<T>& tape, const ParamStore<T>& store, bool trainable = true)
        : tape_(&tape), store_(&store), trainable_(trainable) {}

    Var<T> operator()(const std::string& key);

    Tape<T>& tape() { return *tape_; }
    const ParamStore<T>& store() const { return *store_; }

    /// Gradients for every key of the store (zeros for unused keys).
    GradStore<T> grads() const;

  private:
    Tape<T>* tape_;
    const ParamStore<T>* store_;
    bool trainable_;
    std::map<std::string, Var<T>> bound_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class ParamBinding<float>;
extern template class ParamBinding<double>;

}  // namespace danp
