#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>

#include "danp/params.hpp"

namespace danp {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// L2 penalty folded into the gradient.
    double weight_decay = 0.0;
};

template <typename T>
struct OptimizerState {
    AdamHyper hyper;
    double base_lr = 1e-3;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<T>> first_moment;
    std::map<std::string, std::vector<T>> second_moment;
};

/// One bias-corrected Adam update. Keys in `frozen` are left untouched and
/// their moments are not created. The step counter advances by one.
template <typename T>
void adam_step(ParamStore<T>& params, const GradStore<T>& grads, OptimizerState<T>& state, double lr,
               const std::set<std::string>& frozen = {});

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)); steps past the end
/// are clamped to the final value.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr);

/// max over parameter entries of |autodiff - central difference| /
/// max(|central difference|, 1e-8). `loss_and_grads` returns the loss and
/// fills analytic gradients; `loss` only evaluates.
double finite_diff_check(ParamStore<double>& params,
                         const std::function<double(const ParamStore<double>&, GradStore<double>&)>& loss_and_grads,
                         const std::function<double(const ParamStore<double>&)>& loss, double eps = 1e-3);

extern template void adam_step(ParamStore<float>&, const GradStore<float>&, OptimizerState<float>&, double,
                               const std::set<std::string>&);
extern template void adam_step(ParamStore<double>&, const GradStore<double>&, OptimizerState<double>&, double,
                               const std::set<std::string>&);

}  // namespace danp
