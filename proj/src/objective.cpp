#include "danp/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "danp/parallel.hpp"

namespace danp {

double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double gaussian_loglik(double y, double mu, double sigma) {
    if (!(sigma > 0.0)) throw ContractError("gaussian_loglik: sigma must be positive");
    const double r = (y - mu) / sigma;
    return -std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * r * r;
}

double kl_diag_gaussians(std::span<const double> m1, std::span<const double> v1, std::span<const double> m2,
                         std::span<const double> v2) {
    if (v1.size() != m1.size() || m2.size() != m1.size() || v2.size() != m1.size())
        throw DimensionError("kl_diag_gaussians: length mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < m1.size(); ++i) {
        if (!(v1[i] > 0.0) || !(v2[i] > 0.0)) throw ContractError("kl_diag_gaussians: variances must be positive");
        const double d = m1[i] - m2[i];
        kl += 0.5 * (std::log(v2[i] / v1[i]) + (v1[i] + d * d) / v2[i] - 1.0);
    }
    return kl;
}

double crps_gaussian(double y, double mu, double sigma) {
    if (!(sigma > 0.0)) throw ContractError("crps_gaussian: sigma must be positive");
    const double z = (y - mu) / sigma;
    return sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / std::sqrt(std::numbers::pi));
}

double log_mean_exp(std::span<const double> values) {
    if (values.empty()) throw ContractError("log_mean_exp: no values");
    const double hi = *std::max_element(values.begin(), values.end());
    if (!std::isfinite(hi)) return hi;
    double acc = 0.0;
    for (double v : values) acc += std::exp(v - hi);
    return hi + std::log(acc / static_cast<double>(values.size()));
}

// ---------------------------------------------------------------------------
// ELBO

namespace {

std::vector<std::size_t> all_points(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

std::vector<std::size_t> token_rows(const std::vector<std::size_t>& points, std::size_t d_y) {
    std::vector<std::size_t> rows;
    rows.reserve(points.size() * d_y);
    for (auto k : points)
        for (std::size_t l = 0; l < d_y; ++l) rows.push_back(k * d_y + l);
    return rows;
}

template <typename T>
Var<T> loglik_of(Var<T> out, const Tensor<T>& y) {
    return ops::gaussian_loglik_sum(ops::slice_cols(out, 0, 1), ops::slice_cols(out, 1, 1), y);
}

}  // namespace

template <typename T>
Var<T> elbo_graph(DanpGraph<T>& graph, const TaskBatch& task, Rng& rng, std::size_t latent_samples) {
    const ModelConfig& config = graph.config();
    check_task_compatible(task, config);
    if (latent_samples == 0) throw ContractError("elbo: need at least one latent sample");
    const std::size_t n = task.n(), dy = task.d_y;
    const auto context = task.sorted_context();
    const auto points = all_points(n);
    auto flags = task.context_flags();
    std::vector<bool> hide(n);
    for (std::size_t k = 0; k < n; ++k) hide[k] = !flags[k];

    Tensor<T> y({n * dy, 1});
    for (std::size_t i = 0; i < n * dy; ++i) y[i] = static_cast<T>(task.y[i]);

    Var<T> tokens = graph.tokens(task, points, hide);
    Var<T> r_det = graph.deterministic_path(tokens, build_mask(n, dy, context, config.target_self_attend));
    Var<T> det_part = graph.decoder_det_part(r_det);
    const T norm = T(-1) / static_cast<T>(n * dy);
    if (!config.enable_latent) return ops::scale(loglik_of(graph.decode(det_part, std::nullopt), y), norm);

    LatentStats<T> prior = graph.latent_path(ops::gather_rows(tokens, token_rows(context, dy)));
    Var<T> full_tokens = graph.tokens(task, points, std::vector<bool>(n, false));
    LatentStats<T> post = graph.latent_path(full_tokens);
    Var<T> ll = loglik_of(graph.decode(det_part, graph.sample_latent(post, rng)), y);
    for (std::size_t s = 1; s < latent_samples; ++s)
        ll = ops::add(ll, loglik_of(graph.decode(det_part, graph.sample_latent(post, rng)), y));
    if (latent_samples > 1) ll = ops::scale(ll, T(1) / static_cast<T>(latent_samples));
    Var<T> kl = ops::kl_diag(post.mean, post.variance, prior.mean, prior.variance);
    return ops::scale(ops::sub(ll, kl), norm);
}

template <typename T>
double elbo_loss(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config, Rng& rng,
                 std::size_t latent_samples, GradStore<T>* grads) {
    DanpGraph<T> graph(config, params, grads != nullptr);
    Var<T> loss = elbo_graph(graph, task, rng, latent_samples);
    const double value = static_cast<double>(loss.value()[0]);
    if (grads) {
        graph.tape().backward(loss);
        *grads = graph.binding().grads();
    }
    return value;
}

// ---------------------------------------------------------------------------
// Metrics

template <typename T>
double normalized_loglik(const TaskBatch& task, const std::vector<PredictiveDistribution<T>>& samples,
                         PointSet which) {
    if (samples.empty()) throw ContractError("normalized_loglik: no samples");
    const auto points = which == PointSet::context ? task.sorted_context() : task.targets();
    const std::size_t dy = task.d_y;
    std::vector<double> per_sample(samples.size());
    double total = 0.0;
    for (auto k : points) {
        for (std::size_t s = 0; s < samples.size(); ++s) {
            double lp = 0.0;
            for (std::size_t l = 0; l < dy; ++l) {
                const std::size_t i = k * dy + l;
                lp += gaussian_loglik(task.y[i], static_cast<double>(samples[s].mean[i]),
                                      static_cast<double>(samples[s].std[i]));
            }
            per_sample[s] = lp;
        }
        total += log_mean_exp(per_sample);
    }
    return total / static_cast<double>(points.size() * dy);
}

template <typename T>
double normalized_loglik(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config,
                         std::size_t K, Rng& rng, PointSet which) {
    if (K == 0) throw ContractError("normalized_loglik: K must be at least 1");
    return normalized_loglik(task, predict_samples(task, params, config, K, rng), which);
}

std::vector<double> default_calibration_levels() {
    std::vector<double> levels;
    for (int i = 1; i <= 19; ++i) levels.push_back(i / 20.0);
    return levels;
}

CalibrationResult calibration_metrics(std::span<const double> mean, std::span<const double> std,
                                      std::span<const double> truth, const std::vector<double>& levels) {
    if (mean.size() != std.size() || mean.size() != truth.size())
        throw DimensionError("calibration_metrics: length mismatch");
    if (mean.empty()) throw ContractError("calibration_metrics: no forecasts");
    if (levels.empty()) throw ContractError("calibration_metrics: no levels");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (!(levels[i] > 0.0 && levels[i] < 1.0)) throw ContractError("calibration_metrics: levels must lie in (0,1)");
        if (i > 0 && !(levels[i] > levels[i - 1]))
            throw ContractError("calibration_metrics: levels must be strictly increasing");
    }
    std::vector<double> pit(mean.size());
    for (std::size_t i = 0; i < mean.size(); ++i) {
        if (!(std[i] > 0.0)) throw ContractError("calibration_metrics: std must be positive");
        pit[i] = std_normal_cdf((truth[i] - mean[i]) / std[i]);
    }
    std::sort(pit.begin(), pit.end());
    const double count = static_cast<double>(pit.size());
    auto frac_below = [&](double u) {
        return static_cast<double>(std::upper_bound(pit.begin(), pit.end(), u) - pit.begin()) / count;
    };

    CalibrationResult r;
    double sq = 0.0, ab = 0.0;
    for (double q : levels) {
        const double p = frac_below(q);
        r.observed.push_back(p);
        sq += (p - q) * (p - q);
        ab += std::abs(p - q);
        const double lo = 0.5 - 0.5 * q, hi = 0.5 + 0.5 * q;
        const double inside =
            static_cast<double>(std::upper_bound(pit.begin(), pit.end(), hi) - std::lower_bound(pit.begin(), pit.end(), lo));
        r.ci_coverage[q] = inside / count;
    }
    const double L = static_cast<double>(levels.size());
    r.rmsce = std::sqrt(sq / L);
    r.mace = ab / L;
    for (std::size_t i = 1; i < levels.size(); ++i) {
        const double g0 = std::abs(r.observed[i - 1] - levels[i - 1]);
        const double g1 = std::abs(r.observed[i] - levels[i]);
        r.miscal_area += 0.5 * (g0 + g1) * (levels[i] - levels[i - 1]);
    }
    return r;
}

template <typename T>
MetricReport evaluate_task(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config,
                           std::size_t K, Rng& rng) {
    if (K == 0) throw ContractError("evaluate_task: K must be at least 1");
    const auto samples = predict_samples(task, params, config, K, rng);
    MetricReport r;
    r.context_ll = normalized_loglik(task, samples, PointSet::context);
    r.target_ll = normalized_loglik(task, samples, PointSet::target);

    const std::size_t total = task.n() * task.d_y;
    std::vector<double> mu(total), sd(total);
    const double S = static_cast<double>(samples.size());
    for (std::size_t i = 0; i < total; ++i) {
        double m = 0.0, m2 = 0.0;
        for (const auto& s : samples) {
            const double a = static_cast<double>(s.mean[i]), b = static_cast<double>(s.std[i]);
            m += a;
            m2 += a * a + b * b;
        }
        m /= S;
        mu[i] = m;
        sd[i] = std::sqrt(std::max(m2 / S - m * m, 1e-300));
    }
    auto crps_over = [&](const std::vector<std::size_t>& points) {
        double acc = 0.0;
        for (auto k : points)
            for (std::size_t l = 0; l < task.d_y; ++l) {
                const std::size_t i = k * task.d_y + l;
                acc += crps_gaussian(task.y[i], mu[i], sd[i]);
            }
        return acc / static_cast<double>(points.size() * task.d_y);
    };
    const auto targets = task.targets();
    r.crps_context = crps_over(task.sorted_context());
    r.crps_target = crps_over(targets);

    std::vector<double> tm, ts, ty;
    for (auto k : targets)
        for (std::size_t l = 0; l < task.d_y; ++l) {
            const std::size_t i = k * task.d_y + l;
            tm.push_back(mu[i]);
            ts.push_back(sd[i]);
            ty.push_back(task.y[i]);
        }
    const auto cal = calibration_metrics(tm, ts, ty);
    r.ci_coverage = cal.ci_coverage;
    r.rmsce = cal.rmsce;
    r.mace = cal.mace;
    r.miscal_area = cal.miscal_area;
    return r;
}

template <typename T>
std::vector<MetricReport> evaluate_tasks(const std::vector<TaskBatch>& tasks, const ParamStore<T>& params,
                                         const ModelConfig& config, std::size_t K, std::uint64_t seed,
                                         std::size_t threads) {
    std::vector<MetricReport> out(tasks.size());
    parallel_for(tasks.size(), threads, [&](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        out[i] = evaluate_task(tasks[i], params, config, K, rng);
    });
    return out;
}

MetricSummary summarize(const std::vector<MetricReport>& reports) {
    MetricSummary s;
    s.tasks = reports.size();
    if (reports.empty()) return s;
    const double N = static_cast<double>(reports.size());
    auto stat = [&](auto get, double& mean, double& sd) {
        double m = 0.0;
        for (const auto& r : reports) m += get(r);
        m /= N;
        double v = 0.0;
        for (const auto& r : reports) v += (get(r) - m) * (get(r) - m);
        mean = m;
        sd = std::sqrt(v / N);
    };
    stat([](const MetricReport& r) { return r.context_ll; }, s.mean.context_ll, s.std.context_ll);
    stat([](const MetricReport& r) { return r.target_ll; }, s.mean.target_ll, s.std.target_ll);
    stat([](const MetricReport& r) { return r.crps_context; }, s.mean.crps_context, s.std.crps_context);
    stat([](const MetricReport& r) { return r.crps_target; }, s.mean.crps_target, s.std.crps_target);
    stat([](const MetricReport& r) { return r.rmsce; }, s.mean.rmsce, s.std.rmsce);
    stat([](const MetricReport& r) { return r.mace; }, s.mean.mace, s.std.mace);
    stat([](const MetricReport& r) { return r.miscal_area; }, s.mean.miscal_area, s.std.miscal_area);
    for (const auto& [level, _] : reports.front().ci_coverage)
        stat([level = level](const MetricReport& r) { return r.ci_coverage.at(level); }, s.mean.ci_coverage[level],
             s.std.ci_coverage[level]);
    return s;
}

// ---------------------------------------------------------------------------
// Training

void TrainSpec::validate() const {
    if (total_steps == 0) throw ConfigError("total_steps", "must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size", "must be at least 1");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr", "must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay", "must be non-negative");
    if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) throw ConfigError("clip_norm", "must be non-negative");
    if (elbo_latent_samples == 0) throw ConfigError("elbo_latent_samples", "must be at least 1");
    if (eval_latent_samples == 0) throw ConfigError("eval_latent_samples", "must be at least 1");
}

namespace {

constexpr std::uint64_t kElboStream = 0x454c424f;  // per-task latent noise

}  // namespace

TrainResult train(const TaskSource& source, const ModelConfig& config, const TrainSpec& spec,
                  std::optional<ParamStore<float>> initial, const std::set<std::string>& frozen,
                  const std::function<void(const CurvePoint&)>& on_step) {
    config.validate();
    spec.validate();
    TrainResult result;
    result.params = initial ? std::move(*initial) : init_params<float>(config, spec.seed);
    OptimizerState<float> opt;
    opt.hyper.weight_decay = spec.weight_decay;
    opt.base_lr = spec.base_lr;
    const std::size_t threads = resolve_threads(spec.threads);
    const std::uint64_t noise_seed = derive_seed(spec.seed, kElboStream);

    std::vector<GradStore<float>> grads(spec.batch_size);
    std::vector<double> losses(spec.batch_size);
    for (std::uint64_t step = 0; step < spec.total_steps; ++step) {
        parallel_for(spec.batch_size, threads, [&](std::size_t b) {
            const std::uint64_t index = step * spec.batch_size + b;
            const TaskBatch task = source(index);
            Rng rng(derive_seed(noise_seed, index));
            losses[b] = elbo_loss(task, result.params, config, rng, spec.elbo_latent_samples, &grads[b]);
        });
        double loss = 0.0;
        for (double l : losses) loss += l;
        loss /= static_cast<double>(spec.batch_size);
        if (!std::isfinite(loss)) throw NumericAbortError(step, "non-finite training loss");

        GradStore<float> mean_grad;
        const float inv = 1.0f / static_cast<float>(spec.batch_size);
        for (const auto& [key, tensor] : result.params) {
            std::vector<float> acc(tensor.numel(), 0.0f);
            for (const auto& g : grads) {
                const auto& gk = g.at(key);
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gk[i];
            }
            for (auto& a : acc) {
                a *= inv;
                if (!std::isfinite(a)) throw NumericAbortError(step, "non-finite gradient for '" + key + "'");
            }
            mean_grad.emplace(key, std::move(acc));
        }
        if (spec.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& [key, g] : mean_grad)
                for (float v : g) sq += static_cast<double>(v) * v;
            const double norm = std::sqrt(sq);
            if (norm > spec.clip_norm) {
                const auto f = static_cast<float>(spec.clip_norm / norm);
                for (auto& [key, g] : mean_grad)
                    for (auto& v : g) v *= f;
            }
        }
        const double lr = cosine_lr(step, spec.total_steps, spec.base_lr);
        adam_step(result.params, mean_grad, opt, lr, frozen);
        CurvePoint point{step, lr, loss};
        result.curve.push_back(point);
        if (on_step) on_step(point);
    }
    result.steps = spec.total_steps;
    return result;
}

TrainResult finetune(const ParamStore<float>& pretrained, const std::vector<TaskBatch>& tasks,
                     const ModelConfig& config, FinetuneMode mode, const TrainSpec& spec) {
    if (tasks.empty()) throw ContractError("finetune: empty task list");
    std::set<std::string> frozen;
    if (mode == FinetuneMode::freeze)
        for (const auto& key : pretrained.keys())
            if (param_group(key) == ParamGroup::encoder) frozen.insert(key);
    TaskSource source = [&tasks](std::uint64_t index) { return tasks[index % tasks.size()]; };
    return train(source, config, spec, pretrained, frozen);
}

#define DANP_INSTANTIATE_OBJECTIVE(T)                                                                             \
    template Var<T> elbo_graph<T>(DanpGraph<T>&, const TaskBatch&, Rng&, std::size_t);                           \
    template double elbo_loss<T>(const TaskBatch&, const ParamStore<T>&, const ModelConfig&, Rng&, std::size_t, \
                                 GradStore<T>*);                                                                  \
    template double normalized_loglik<T>(const TaskBatch&, const std::vector<PredictiveDistribution<T>>&,       \
                                         PointSet);                                                               \
    template double normalized_loglik<T>(const TaskBatch&, const ParamStore<T>&, const ModelConfig&,            \
                                         std::size_t, Rng&, PointSet);                                            \
    template MetricReport evaluate_task<T>(const TaskBatch&, const ParamStore<T>&, const ModelConfig&,          \
                                           std::size_t, Rng&);                                                    \
    template std::vector<MetricReport> evaluate_tasks<T>(const std::vector<TaskBatch>&, const ParamStore<T>&,   \
                                                         const ModelConfig&, std::size_t, std::uint64_t,         \
                                                         std::size_t);

DANP_INSTANTIATE_OBJECTIVE(float)
DANP_INSTANTIATE_OBJECTIVE(double)

#undef DANP_INSTANTIATE_OBJECTIVE

}  // namespace danp
