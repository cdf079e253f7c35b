#include "danp/bo.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <numbers>

#include "danp/objective.hpp"
#include "danp/taskgen.hpp"

namespace danp {

ObjectiveName parse_objective_name(const std::string& name) {
    if (name == "ackley") return ObjectiveName::ackley;
    if (name == "cosine") return ObjectiveName::cosine;
    if (name == "rastrigin") return ObjectiveName::rastrigin;
    if (name == "gp_sample") return ObjectiveName::gp_sample;
    throw ConfigError("objective", "unknown objective '" + name + "'");
}

std::string objective_name_str(ObjectiveName name) {
    switch (name) {
        case ObjectiveName::ackley: return "ackley";
        case ObjectiveName::cosine: return "cosine";
        case ObjectiveName::rastrigin: return "rastrigin";
        case ObjectiveName::gp_sample: return "gp_sample";
    }
    return "";
}

double ackley(std::span<const double> x) {
    constexpr double a = 20.0, b = 0.2, c = 2.0 * std::numbers::pi;
    const double d = static_cast<double>(x.size());
    double sq = 0.0, cs = 0.0;
    for (double v : x) {
        sq += v * v;
        cs += std::cos(c * v);
    }
    return (a - a * std::exp(-b * std::sqrt(sq / d))) + (std::numbers::e - std::exp(cs / d));
}

double cosine_objective(std::span<const double> x) {
    double f = 0.0;
    for (double v : x) f += std::cos(v) * (0.1 / (2.0 * std::numbers::pi) * std::abs(v) - 1.0);
    return f;
}

double rastrigin(std::span<const double> x) {
    double f = 10.0 * static_cast<double>(x.size());
    for (double v : x) f += v * v - 10.0 * std::cos(2.0 * std::numbers::pi * v);
    return f;
}

Objective::Objective(ObjectiveName name, std::size_t dim, std::uint64_t seed, double lo, double hi)
    : name_(name), dim_(dim), lo_(lo), hi_(hi), rng_(seed) {
    if (dim == 0) throw ConfigError("dim", "must be positive");
    if (!(hi > lo)) throw ConfigError("domain", "upper bound must exceed lower bound");
}

double Objective::operator()(std::span<const double> x_in) {
    if (x_in.size() != dim_)
        throw DimensionError("objective expects dimension " + std::to_string(dim_) + ", got " +
                             std::to_string(x_in.size()));
    std::vector<double> x(x_in.begin(), x_in.end());
    bool clipped = false;
    for (auto& v : x) {
        const double c = std::clamp(v, lo_, hi_);
        clipped |= c != v;
        v = c;
    }
    if (clipped) ++clipped_;
    switch (name_) {
        case ObjectiveName::ackley: return ackley(x);
        case ObjectiveName::cosine: return cosine_objective(x);
        case ObjectiveName::rastrigin: return rastrigin(x);
        case ObjectiveName::gp_sample: break;
    }
    const KernelSpec k{KernelFamily::rbf, 1.0, 0.3, 0.1};
    const std::size_t m = seen_f_.size();
    double mean = 0.0, var = 1.0;
    if (m > 0) {
        Eigen::MatrixXd K(m, m);
        Eigen::VectorXd kx(m), f(m);
        for (std::size_t i = 0; i < m; ++i) {
            std::span<const double> xi(seen_x_.data() + i * dim_, dim_);
            for (std::size_t j = 0; j <= i; ++j) {
                const double v = kernel_eval(k, xi, std::span<const double>(seen_x_.data() + j * dim_, dim_));
                K(i, j) = v;
                K(j, i) = v;
            }
            K(i, i) += 1e-8;
            kx[i] = kernel_eval(k, xi, x);
            f[i] = seen_f_[i];
        }
        Eigen::LLT<Eigen::MatrixXd> llt(K);
        const Eigen::VectorXd alpha = llt.solve(f);
        const Eigen::VectorXd v = llt.matrixL().solve(kx);
        mean = kx.dot(alpha);
        var = std::max(1.0 - v.squaredNorm(), 0.0);
    }
    const double value = mean + std::sqrt(var) * rng_.normal();
    seen_x_.insert(seen_x_.end(), x.begin(), x.end());
    seen_f_.push_back(value);
    return value;
}

std::optional<double> Objective::optimum() const {
    switch (name_) {
        case ObjectiveName::ackley:
        case ObjectiveName::rastrigin: return 0.0;
        case ObjectiveName::cosine: return -static_cast<double>(dim_);
        case ObjectiveName::gp_sample: return std::nullopt;
    }
    return std::nullopt;
}

double expected_improvement(double mu, double sigma, double best) {
    if (sigma < 0.0) throw ContractError("expected_improvement: sigma must be non-negative");
    const double gain = best - mu;
    if (sigma == 0.0) return std::max(gain, 0.0);
    const double z = gain / sigma;
    return std::max(gain * std_normal_cdf(z) + sigma * std_normal_pdf(z), 0.0);
}

Surrogate make_model_surrogate(const ParamStore<float>& params, const ModelConfig& config, std::size_t K,
                               std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [&params, config, K, rng](const TaskBatch& task) {
        const auto samples = predict_samples(task, params, config, K, *rng);
        const auto targets = task.targets();
        std::vector<double> mu, sd;
        const double S = static_cast<double>(samples.size());
        for (auto k : targets) {
            double m = 0.0, m2 = 0.0;
            for (const auto& s : samples) {
                const double a = s.mean[k], b = s.std[k];
                m += a;
                m2 += a * a + b * b;
            }
            m /= S;
            mu.push_back(m);
            sd.push_back(std::sqrt(std::max(m2 / S - m * m, 0.0)));
        }
        return std::make_pair(mu, sd);
    };
}

BoRun bo_loop(Objective& objective, const Surrogate& surrogate, const BoOptions& options, Rng& rng) {
    if (options.init_points == 0) throw ConfigError("init_points", "must be positive");
    if (options.pool_size == 0) throw ConfigError("pool_size", "must be positive");
    if (options.acquisition == Acquisition::ei && !surrogate)
        throw ConfigError("surrogate", "EI acquisition needs a surrogate");
    const std::size_t d = objective.dim();
    BoRun run;
    auto observe = [&](std::vector<double> x) {
        const double y = objective(x);
        run.best.push_back(run.ys.empty() ? y : std::min(run.best.back(), y));
        run.xs.push_back(std::move(x));
        run.ys.push_back(y);
    };
    auto draw_point = [&] {
        std::vector<double> x(d);
        for (auto& v : x) v = rng.uniform(objective.lo(), objective.hi());
        return x;
    };
    for (std::size_t i = 0; i < options.init_points; ++i) observe(draw_point());

    for (std::size_t it = 0; it < options.iterations; ++it) {
        std::vector<std::vector<double>> pool(options.pool_size);
        for (auto& p : pool) p = draw_point();
        if (options.acquisition == Acquisition::random) {
            const auto pick = rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1);
            observe(pool[static_cast<std::size_t>(pick)]);
            continue;
        }
        const std::size_t m = run.ys.size();
        double mean = 0.0;
        for (double y : run.ys) mean += y;
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (double y : run.ys) var += (y - mean) * (y - mean);
        const double sd = var > 0.0 ? std::sqrt(var / static_cast<double>(m)) : 1.0;

        TaskBatch task;
        task.d_x = d;
        task.d_y = 1;
        for (std::size_t i = 0; i < m; ++i) {
            task.x.insert(task.x.end(), run.xs[i].begin(), run.xs[i].end());
            task.y.push_back((run.ys[i] - mean) / sd);
            task.context.push_back(i);
        }
        for (const auto& p : pool) {
            task.x.insert(task.x.end(), p.begin(), p.end());
            task.y.push_back(0.0);
        }
        const auto [mu, sigma] = surrogate(task);
        if (mu.size() != pool.size() || sigma.size() != pool.size())
            throw DimensionError("surrogate returned the wrong number of predictions");
        const double best = (run.best.back() - mean) / sd;
        std::size_t arg = 0;
        double top = -1.0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const double ei = expected_improvement(mu[i], sigma[i], best);
            if (ei > top) {
                top = ei;
                arg = i;
            }
        }
        if (!(top > 0.0)) {
            ++run.fallbacks;
            arg = static_cast<std::size_t>(std::max_element(sigma.begin(), sigma.end()) - sigma.begin());
        }
        observe(pool[arg]);
    }
    return run;
}

RegretTraces regret(const BoRun& run, double y_star, std::optional<double> y_max) {
    if (run.best.empty()) throw ContractError("regret: empty run");
    const double hi = y_max ? *y_max : *std::max_element(run.ys.begin(), run.ys.end());
    if (!(hi > y_star)) throw ContractError("regret: degenerate objective range (y_max == y_min)");
    RegretTraces r;
    double cum = 0.0;
    for (double b : run.best) {
        const double s = b - y_star;
        cum += s;
        r.simple.push_back(s);
        r.cumulative.push_back(cum);
        r.normalized.push_back(s / (hi - y_star));
    }
    return r;
}

void write_bo_csv(std::ostream& out, const std::vector<BoRecord>& records) {
    const std::size_t d = records.empty() || records.front().run.xs.empty() ? 0 : records.front().run.xs.front().size();
    out << "run_seed,objective,dim,iter";
    for (std::size_t j = 1; j <= d; ++j) out << ",query_x" << j;
    out << ",y,best,simple_regret,cumulative_regret,normalized_regret\n";
    out << std::setprecision(17);
    for (const auto& rec : records) {
        const auto& run = rec.run;
        for (std::size_t i = 0; i < run.ys.size(); ++i) {
            out << rec.run_seed << ',' << rec.objective << ',' << d << ',' << (i + 1);
            for (double v : run.xs[i]) out << ',' << v;
            out << ',' << run.ys[i] << ',' << run.best[i] << ',' << rec.traces.simple[i] << ','
                << rec.traces.cumulative[i] << ',' << rec.traces.normalized[i] << '\n';
        }
    }
}

}  // namespace danp
