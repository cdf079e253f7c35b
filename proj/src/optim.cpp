#include "danp/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace danp {

template <typename T>
void adam_step(ParamStore<T>& params, const GradStore<T>& grads, OptimizerState<T>& state, double lr,
               const std::set<std::string>& frozen) {
    const auto& h = state.hyper;
    const std::uint64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    for (auto& [key, param] : params) {
        if (frozen.count(key)) continue;
        auto git = grads.find(key);
        if (git == grads.end()) throw ContractError("adam_step: no gradient for '" + key + "'");
        const auto& g = git->second;
        if (g.size() != param.numel())
            throw DimensionError("adam_step: gradient for '" + key + "' has " + std::to_string(g.size()) +
                                 " entries, parameter " + shape_str(param.shape()));
        auto& m = state.first_moment[key];
        auto& v = state.second_moment[key];
        if (m.empty()) m.assign(g.size(), T{0});
        if (v.empty()) v.assign(g.size(), T{0});
        auto data = param.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double gi = static_cast<double>(g[i]) + h.weight_decay * static_cast<double>(data[i]);
            double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
            double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + h.eps);
            data[i] = static_cast<T>(static_cast<double>(data[i]) - update);
        }
    }
    state.step = t;
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
    if (total_steps == 0) return base_lr;
    const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double finite_diff_check(ParamStore<double>& params,
                         const std::function<double(const ParamStore<double>&, GradStore<double>&)>& loss_and_grads,
                         const std::function<double(const ParamStore<double>&)>& loss, double eps) {
    GradStore<double> analytic;
    loss_and_grads(params, analytic);
    double worst = 0.0;
    for (auto& [key, tensor] : params) {
        const auto& g = analytic.at(key);
        auto data = tensor.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double up = loss(params);
            data[i] = saved - eps;
            const double down = loss(params);
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double err = std::abs(g[i] - numeric) / std::max(std::abs(numeric), 1e-8);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

template void adam_step(ParamStore<float>&, const GradStore<float>&, OptimizerState<float>&, double,
                        const std::set<std::string>&);
template void adam_step(ParamStore<double>&, const GradStore<double>&, OptimizerState<double>&, double,
                        const std::set<std::string>&);

}  // namespace danp
