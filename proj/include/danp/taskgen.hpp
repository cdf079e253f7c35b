#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "danp/objective.hpp"
#include "danp/rng.hpp"
#include "danp/task.hpp"

namespace danp {

enum class KernelFamily { rbf, matern52 };

KernelFamily parse_kernel_family(const std::string& name);
std::string kernel_family_name(KernelFamily family);

struct KernelSpec {
    KernelFamily family = KernelFamily::rbf;
    double s = 1.0;    // output scale
    double ell = 0.3;  // length scale
    double noise_std = 0.02;

    void validate() const;
};

/// rbf: s^2 exp(-d^2 / (2 l^2)); matern52: s^2 (1 + sqrt5 d/l + 5 d^2/(3 l^2)) exp(-sqrt5 d/l).
double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b);

/// n x n Gram matrix (row-major) of rows of x (n x d).
std::vector<double> gram_matrix(const KernelSpec& spec, std::span<const double> x, std::size_t d);

/// |c| ~ U{5 d^2, ..., 45 d^2}, then |t| ~ U{5 d^2, ..., 50 d^2 - |c|}.
std::pair<std::size_t, std::size_t> sample_counts(std::size_t d_x, Rng& rng);

/// Counters for degenerate Gram matrices met while sampling.
struct GpSampleLog {
    std::size_t jitter_escalations = 0;
    std::size_t resamples = 0;
};

/// One GP regression task: counts from sample_counts, inputs U(-2, 2),
/// s ~ U(0.1, 1), l ~ U(0.1, 0.6), d_y independent output channels with
/// observation noise, context = first |c| entries of a random permutation.
TaskBatch sample_gp_task(std::size_t d_x, std::size_t d_y, KernelFamily family, Rng& rng, double noise_std = 0.02,
                         GpSampleLog* log = nullptr);

enum class ScenarioKind { from_scratch, zero_shot, fine_tune };

ScenarioKind parse_scenario_kind(const std::string& name);
std::string scenario_kind_name(ScenarioKind kind);

struct ScenarioParams {
    ScenarioKind kind = ScenarioKind::from_scratch;
    std::vector<std::size_t> train_dims{1};
    std::vector<std::size_t> eval_dims{1};
    std::size_t d_y = 1;
    std::vector<KernelFamily> families{KernelFamily::rbf};
    std::size_t finetune_tasks = 160;
    std::size_t eval_tasks = 3000;
    double noise_std = 0.02;

    friend bool operator==(const ScenarioParams&, const ScenarioParams&) = default;
};

/// Task streams and suites, all pure functions of (params, seed, index).
/// from_scratch trains on train_dims[0]; zero_shot and fine_tune draw d_x
/// uniformly from train_dims per task. fine_tune additionally holds a
/// fixed list of finetune_tasks tasks at eval_dims[0].
class Scenario {
  public:
    Scenario(ScenarioParams params, std::uint64_t seed);

    const ScenarioParams& params() const { return params_; }
    /// Input dimension of training task `index`.
    std::size_t train_dim(std::uint64_t index) const;
    TaskBatch train_task(std::uint64_t index) const;
    TaskSource stream() const;
    /// `count` tasks at input dimension d_x (0 means params.eval_tasks).
    std::vector<TaskBatch> eval_suite(std::size_t d_x, std::size_t count = 0) const;
    const std::vector<TaskBatch>& finetune_list() const { return finetune_; }

  private:
    TaskBatch task_at(std::uint64_t stream, std::size_t d_x, std::uint64_t index) const;

    ScenarioParams params_;
    std::uint64_t seed_;
    std::vector<TaskBatch> finetune_;
};

/// Builds a scenario after checking its dimension sets.
Scenario build_scenario(const ScenarioParams& params, std::uint64_t seed);

class TaskFileError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Reads a "DANP-TASK v1 d_x=.. d_y=.. n=.." table and draws a context via
/// the count law, clipped so at least one target remains. The remaining
/// points are all targets.
TaskBatch grid_task_from_file(const std::string& path, Rng& rng);

}  // namespace danp
