#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "danp/model.hpp"
#include "danp/rng.hpp"
#include "danp/task.hpp"

namespace danp {

enum class ObjectiveName { ackley, cosine, rastrigin, gp_sample };

ObjectiveName parse_objective_name(const std::string& name);
std::string objective_name_str(ObjectiveName name);

/// Benchmark function on a box domain, minimized. gp_sample is a GP path
/// (RBF, s=1, l=0.3) realized lazily by conditioning on earlier queries,
/// so one instance must see its queries in order.
class Objective {
  public:
    Objective(ObjectiveName name, std::size_t dim, std::uint64_t seed = 0, double lo = -2.0, double hi = 2.0);

    ObjectiveName name() const { return name_; }
    std::size_t dim() const { return dim_; }
    double lo() const { return lo_; }
    double hi() const { return hi_; }
    /// Points outside the box are clipped and counted.
    double operator()(std::span<const double> x);
    /// Known minimum value; empty for gp_sample.
    std::optional<double> optimum() const;
    std::size_t clipped() const { return clipped_; }

  private:
    ObjectiveName name_;
    std::size_t dim_;
    double lo_, hi_;
    Rng rng_;
    std::vector<double> seen_x_, seen_f_;
    std::size_t clipped_ = 0;
};

double ackley(std::span<const double> x);
double cosine_objective(std::span<const double> x);
double rastrigin(std::span<const double> x);

/// Minimization EI: (best - mu) Phi(z) + sigma phi(z), z = (best - mu) / sigma;
/// max(best - mu, 0) at sigma = 0. Throws ContractError for sigma < 0.
double expected_improvement(double mu, double sigma, double best);

/// Predictive (mean, std) for every target point of the task, in target
/// order.
using Surrogate = std::function<std::pair<std::vector<double>, std::vector<double>>(const TaskBatch&)>;

/// Moment-matched predictive of a trained model over K latent draws.
Surrogate make_model_surrogate(const ParamStore<float>& params, const ModelConfig& config, std::size_t K,
                               std::uint64_t seed);

enum class Acquisition { ei, random };

struct BoOptions {
    std::size_t iterations = 50;
    std::size_t init_points = 5;
    std::size_t pool_size = 256;
    Acquisition acquisition = Acquisition::ei;
};

struct BoRun {
    std::vector<std::vector<double>> xs;
    std::vector<double> ys;
    std::vector<double> best;  // best-so-far after each observation
    std::size_t fallbacks = 0;  // iterations where EI vanished on the pool
};

/// Initial design of init_points uniform points, then one query per
/// iteration chosen from a fresh uniform pool. With Acquisition::ei the
/// surrogate sees the history (y z-scored) as context and the pool as
/// targets; ties go to the lowest pool index.
BoRun bo_loop(Objective& objective, const Surrogate& surrogate, const BoOptions& options, Rng& rng);

struct RegretTraces {
    std::vector<double> simple;
    std::vector<double> cumulative;
    std::vector<double> normalized;
};

/// simple = best - y_star; normalized = (best - y_min) / (y_max - y_min)
/// with y_min = y_star and y_max the largest observed value unless given.
RegretTraces regret(const BoRun& run, double y_star, std::optional<double> y_max = std::nullopt);

struct BoRecord {
    std::uint64_t run_seed = 0;
    std::string objective;
    BoRun run;
    RegretTraces traces;
};

/// CSV with columns run_seed, objective, dim, iter, query_x1..query_xd, y,
/// best, simple_regret, cumulative_regret, normalized_regret. iter counts
/// observations from 1, initial design included.
void write_bo_csv(std::ostream& out, const std::vector<BoRecord>& records);

}  // namespace danp
