#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "danp/model.hpp"
#include "danp/optim.hpp"

namespace danp {

/// Training stopped on a non-finite loss.
class NumericAbortError : public std::runtime_error {
  public:
    NumericAbortError(std::uint64_t step, const std::string& message)
        : std::runtime_error("step " + std::to_string(step) + ": " + message), step_(step) {}
    std::uint64_t step() const { return step_; }

  private:
    std::uint64_t step_;
};

double std_normal_pdf(double z);
double std_normal_cdf(double z);

/// log N(y | mu, sigma^2). Throws ContractError for sigma <= 0.
double gaussian_loglik(double y, double mu, double sigma);

/// KL(N(m1, diag v1) || N(m2, diag v2)). Throws ContractError for
/// non-positive variances or mismatched lengths.
double kl_diag_gaussians(std::span<const double> m1, std::span<const double> v1, std::span<const double> m2,
                         std::span<const double> v2);

/// Closed-form CRPS of a Gaussian forecast.
double crps_gaussian(double y, double mu, double sigma);

/// log((1/K) sum exp(v_j)), stable.
double log_mean_exp(std::span<const double> values);

/// Negative ELBO per output, recorded on the graph's tape. Without the
/// latent path this is the negative mean log-likelihood over all n*d_y
/// outputs.
template <typename T>
Var<T> elbo_graph(DanpGraph<T>& graph, const TaskBatch& task, Rng& rng, std::size_t latent_samples = 1);

/// Loss value; fills `grads` (every parameter key) when given.
template <typename T>
double elbo_loss(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config, Rng& rng,
                 std::size_t latent_samples = 1, GradStore<T>* grads = nullptr);

enum class PointSet { context, target };

/// Per-point, per-output-dim log-likelihood of one point set; latent
/// models use a log-mean-exp over the samples.
template <typename T>
double normalized_loglik(const TaskBatch& task, const std::vector<PredictiveDistribution<T>>& samples,
                         PointSet which);

template <typename T>
double normalized_loglik(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config,
                         std::size_t K, Rng& rng, PointSet which);

/// 0.05, 0.10, ..., 0.95.
std::vector<double> default_calibration_levels();

struct CalibrationResult {
    double rmsce = 0.0;
    double mace = 0.0;
    double miscal_area = 0.0;
    std::vector<double> observed;           // fraction below the level-quantile
    std::map<double, double> ci_coverage;  // central interval at each level
};

/// Gaussian forecasts (mean[i], std[i]) against truth[i].
CalibrationResult calibration_metrics(std::span<const double> mean, std::span<const double> std,
                                      std::span<const double> truth,
                                      const std::vector<double>& levels = default_calibration_levels());

struct MetricReport {
    double context_ll = 0.0;
    double target_ll = 0.0;
    double crps_context = 0.0;
    double crps_target = 0.0;
    std::map<double, double> ci_coverage;
    double rmsce = 0.0;
    double mace = 0.0;
    double miscal_area = 0.0;
};

/// All metrics for one task with K latent samples from q(r | context).
/// CRPS and calibration use the moment-matched Gaussian of the samples.
template <typename T>
MetricReport evaluate_task(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config,
                           std::size_t K, Rng& rng);

/// Task i uses rng seed derive_seed(seed, i).
template <typename T>
std::vector<MetricReport> evaluate_tasks(const std::vector<TaskBatch>& tasks, const ParamStore<T>& params,
                                         const ModelConfig& config, std::size_t K, std::uint64_t seed,
                                         std::size_t threads = 1);

struct MetricSummary {
    MetricReport mean;
    MetricReport std;
    std::size_t tasks = 0;
};

MetricSummary summarize(const std::vector<MetricReport>& reports);

struct TrainSpec {
    std::uint64_t total_steps = 1000;
    std::size_t batch_size = 16;
    double base_lr = 1e-4;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // global gradient-norm cap; 0 disables
    std::uint64_t seed = 0;
    std::size_t elbo_latent_samples = 1;
    std::size_t eval_latent_samples = 50;
    std::size_t threads = 1;

    /// Throws ConfigError naming the first bad field.
    void validate() const;
    friend bool operator==(const TrainSpec&, const TrainSpec&) = default;
};

struct CurvePoint {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

/// Deterministic task source: the same index always yields the same task.
using TaskSource = std::function<TaskBatch(std::uint64_t index)>;

struct TrainResult {
    ParamStore<float> params;
    std::vector<CurvePoint> curve;
    std::uint64_t steps = 0;
};

/// Step s uses tasks s*batch .. s*batch+batch-1 of the source. Parameters
/// start from `initial` or from init_params(config, spec.seed). Keys in
/// `frozen` never change.
TrainResult train(const TaskSource& source, const ModelConfig& config, const TrainSpec& spec,
                  std::optional<ParamStore<float>> initial = std::nullopt, const std::set<std::string>& frozen = {},
                  const std::function<void(const CurvePoint&)>& on_step = {});

enum class FinetuneMode { full, freeze };

/// Cycles the finite task list in order; freeze mode holds every
/// encoder-group tensor fixed.
TrainResult finetune(const ParamStore<float>& pretrained, const std::vector<TaskBatch>& tasks,
                     const ModelConfig& config, FinetuneMode mode, const TrainSpec& spec);

}  // namespace danp
