// danp: train, evaluate, fine-tune and run BO with dimension-agnostic NPs.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "danp/bo.hpp"
#include "danp/checkpoint.hpp"
#include "danp/config.hpp"
#include "danp/parallel.hpp"

using namespace danp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 2, kNumeric = 3, kDims = 4 };

class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

json metrics_json(const MetricReport& r) {
    json cov = json::object();
    for (const auto& [q, v] : r.ci_coverage) {
        std::ostringstream key;
        key << std::fixed << std::setprecision(2) << q;
        cov[key.str()] = v;
    }
    return json{{"context_ll", r.context_ll}, {"target_ll", r.target_ll},   {"crps_context", r.crps_context},
                {"crps_target", r.crps_target}, {"ci_coverage", cov},      {"rmsce", r.rmsce},
                {"mace", r.mace},               {"miscal_area", r.miscal_area}};
}

json summary_json(const MetricSummary& s) {
    return json{{"tasks", s.tasks}, {"mean", metrics_json(s.mean)}, {"std", metrics_json(s.std)}};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write '" + path + "'");
    out << text;
    if (!out) throw UsageError("write failed for '" + path + "'");
}

std::string curve_path(const RunConfig& cfg, const std::string& ckpt_path) {
    if (!cfg.io.curve.empty()) return cfg.io.curve;
    fs::path p(ckpt_path);
    return (p.parent_path() / "curve.csv").string();
}

void write_curve(const std::string& path, const std::vector<CurvePoint>& curve) {
    std::ostringstream out;
    out << "step,lr,loss\n";
    out << std::setprecision(9);
    for (const auto& c : curve) out << c.step << ',' << c.lr << ',' << c.loss << '\n';
    write_text(path, out.str());
}

MetricSummary evaluate_suite(const std::vector<TaskBatch>& tasks, const Checkpoint& ck, std::size_t K,
                             std::uint64_t seed, std::size_t threads) {
    for (const auto& t : tasks) check_task_compatible(t, ck.config.model);
    return summarize(evaluate_tasks(tasks, ck.params, ck.config.model, K, seed, threads));
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, out;
    std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a, std::size_t threads) {
    RunConfig cfg = load_run_config(a.config);
    cfg.train.seed = a.seed;
    cfg.validate();
    Scenario scenario(cfg.scenario, a.seed);
    TrainSpec spec = cfg.train;
    spec.threads = threads;
    auto result = train(scenario.stream(), cfg.model, spec);

    Checkpoint ck{cfg, std::move(result.params), Rng(derive_seed(a.seed, result.steps)).state(), result.steps};
    save_checkpoint(a.out, ck);
    const auto curve = curve_path(cfg, a.out);
    write_curve(curve, result.curve);
    std::cout << "trained " << result.steps << " steps; final loss "
              << (result.curve.empty() ? 0.0 : result.curve.back().loss) << "\n"
              << "checkpoint " << a.out << "\ncurve " << curve << "\n";
    return kOk;
}

struct EvalArgs {
    std::string ckpt, kernel = "rbf", report;
    std::vector<std::size_t> dims;
    std::size_t tasks = 0, K = 0;
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a, std::size_t threads) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    ScenarioParams sp = ck.config.scenario;
    sp.kind = ScenarioKind::from_scratch;
    sp.families = {parse_kernel_family(a.kernel)};
    const std::size_t K = a.K ? a.K : ck.config.train.eval_latent_samples;
    json report = json::array();
    for (auto d : a.dims) {
        if (d == 0) throw ConfigError("dims", "dims must be positive");
        Scenario scenario(sp, a.seed);
        const auto tasks = scenario.eval_suite(d, a.tasks);
        const auto s = evaluate_suite(tasks, ck, K, a.seed, threads);
        json entry = summary_json(s);
        entry["d_x"] = d;
        entry["d_y"] = sp.d_y;
        entry["kernel"] = a.kernel;
        entry["K"] = K;
        report.push_back(entry);
        std::cout << "d_x=" << d << " context_ll " << s.mean.context_ll << " +- " << s.std.context_ll
                  << "  target_ll " << s.mean.target_ll << " +- " << s.std.target_ll << "\n";
    }
    if (!a.report.empty()) write_text(a.report, report.dump(2) + "\n");
    return kOk;
}

struct FinetuneArgs {
    std::string ckpt, mode, config, out, report;
    std::uint64_t seed = 0;
};

int cmd_finetune(const FinetuneArgs& a, std::size_t threads) {
    FinetuneMode mode;
    if (a.mode == "full") mode = FinetuneMode::full;
    else if (a.mode == "freeze") mode = FinetuneMode::freeze;
    else throw ConfigError("mode", "expected 'full' or 'freeze', got '" + a.mode + "'");

    const Checkpoint base = load_checkpoint(a.ckpt);
    RunConfig cfg = load_run_config(a.config);
    cfg.model = base.config.model;
    cfg.train.seed = a.seed;
    cfg.scenario.kind = ScenarioKind::fine_tune;
    cfg.validate();
    Scenario scenario(cfg.scenario, a.seed);
    for (const auto& t : scenario.finetune_list()) check_task_compatible(t, cfg.model);

    TrainSpec spec = cfg.train;
    spec.threads = threads;
    auto result = finetune(base.params, scenario.finetune_list(), cfg.model, mode, spec);
    Checkpoint tuned{cfg, std::move(result.params), Rng(derive_seed(a.seed, result.steps)).state(), result.steps};
    save_checkpoint(a.out, tuned);
    write_curve(curve_path(cfg, a.out), result.curve);

    const std::size_t d = cfg.scenario.eval_dims.front();
    const auto tasks = scenario.eval_suite(d);
    const std::size_t K = cfg.train.eval_latent_samples;
    const auto before = evaluate_suite(tasks, base, K, a.seed, threads);
    const auto after = evaluate_suite(tasks, tuned, K, a.seed, threads);
    json report = {{"mode", a.mode}, {"d_x", d}, {"before", summary_json(before)}, {"after", summary_json(after)}};
    const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
    write_text(report_path, report.dump(2) + "\n");
    std::cout << "target_ll before " << before.mean.target_ll << " after " << after.mean.target_ll << "\n"
              << "checkpoint " << a.out << "\nreport " << report_path << "\n";
    return kOk;
}

struct BoArgs {
    std::string ckpt, objective, function = "cosine", out;
    std::size_t dim = 2, iters = 50, repeats = 10, init = 5, pool = 256, K = 16;
    std::uint64_t seed = 0;
};

int cmd_bo(const BoArgs& a, std::size_t threads) {
    const bool random_search = a.objective == "random";
    const ObjectiveName fn = parse_objective_name(random_search ? a.function : a.objective);
    if (a.dim == 0) throw ConfigError("dim", "must be positive");
    std::optional<Checkpoint> ck;
    if (!random_search) {
        if (a.ckpt.empty()) throw UsageError("--ckpt is required unless --objective random");
        ck = load_checkpoint(a.ckpt);
        TaskBatch probe;
        probe.d_x = a.dim;
        probe.d_y = 1;
        probe.x.assign(2 * a.dim, 0.0);
        probe.y.assign(2, 0.0);
        probe.context = {0};
        check_task_compatible(probe, ck->config.model);
    }
    BoOptions opt;
    opt.iterations = a.iters;
    opt.init_points = a.init;
    opt.pool_size = a.pool;
    opt.acquisition = random_search ? Acquisition::random : Acquisition::ei;

    std::vector<BoRecord> records(a.repeats);
    parallel_for(a.repeats, threads, [&](std::size_t r) {
        const std::uint64_t run_seed = derive_seed(a.seed, r);
        Objective objective(fn, a.dim, run_seed);
        Surrogate surrogate;
        if (ck) surrogate = make_model_surrogate(ck->params, ck->config.model, a.K, derive_seed(run_seed, 1));
        Rng rng(run_seed);
        BoRecord rec;
        rec.run_seed = run_seed;
        rec.objective = objective_name_str(fn);
        rec.run = bo_loop(objective, surrogate, opt, rng);
        const auto opt_value = objective.optimum();
        const double y_star =
            opt_value ? *opt_value : *std::min_element(rec.run.ys.begin(), rec.run.ys.end());
        rec.traces = regret(rec.run, y_star);
        records[r] = std::move(rec);
    });

    std::ostringstream csv;
    write_bo_csv(csv, records);
    if (!a.out.empty()) write_text(a.out, csv.str());
    else std::cout << csv.str();
    double mean = 0.0;
    for (const auto& r : records) mean += r.traces.simple.back();
    mean /= static_cast<double>(records.size());
    std::cerr << "mean final simple regret " << mean << " over " << records.size() << " runs\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dimension-agnostic neural processes"};
    app.require_subcommand(1);
    std::size_t threads = 1;
    app.add_option("--threads", threads, "worker threads (DANP_THREADS overrides)")->check(CLI::PositiveNumber);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model on a GP scenario");
    train_cmd->add_option("--config", ta.config, "run config (JSON)")->required();
    train_cmd->add_option("--seed", ta.seed, "run seed");
    train_cmd->add_option("--out", ta.out, "checkpoint path")->required();

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on GP tasks");
    eval_cmd->add_option("--ckpt", ea.ckpt, "checkpoint")->required();
    eval_cmd->add_option("--dims", ea.dims, "input dimensions")->delimiter(',')->required();
    eval_cmd->add_option("--kernel", ea.kernel, "rbf or matern52");
    eval_cmd->add_option("--tasks", ea.tasks, "tasks per dim (default: scenario eval_tasks)");
    eval_cmd->add_option("--K", ea.K, "latent samples (default: train.eval_latent_samples)");
    eval_cmd->add_option("--seed", ea.seed, "evaluation suite seed");
    eval_cmd->add_option("--report", ea.report, "JSON report path");

    FinetuneArgs fa;
    auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a checkpoint on a new dimension");
    ft_cmd->add_option("--ckpt", fa.ckpt, "pretrained checkpoint")->required();
    ft_cmd->add_option("--mode", fa.mode, "full or freeze")->required();
    ft_cmd->add_option("--config", fa.config, "fine-tune config (JSON)")->required();
    ft_cmd->add_option("--out", fa.out, "output checkpoint")->required();
    ft_cmd->add_option("--seed", fa.seed, "run seed");
    ft_cmd->add_option("--report", fa.report, "report path (default: <out>.report.json)");

    BoArgs ba;
    auto* bo_cmd = app.add_subcommand("bo", "Bayesian optimization with an NP surrogate");
    bo_cmd->add_option("--ckpt", ba.ckpt, "surrogate checkpoint");
    bo_cmd->add_option("--objective", ba.objective, "ackley, cosine, rastrigin, gp_sample or random")->required();
    bo_cmd->add_option("--function", ba.function, "benchmark searched by --objective random");
    bo_cmd->add_option("--dim", ba.dim, "input dimension");
    bo_cmd->add_option("--iters", ba.iters, "iterations after the initial design");
    bo_cmd->add_option("--repeats", ba.repeats, "independent runs");
    bo_cmd->add_option("--init", ba.init, "initial design size");
    bo_cmd->add_option("--pool", ba.pool, "candidate pool size");
    bo_cmd->add_option("--K", ba.K, "latent samples per prediction");
    bo_cmd->add_option("--seed", ba.seed, "base seed");
    bo_cmd->add_option("--out", ba.out, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    const std::size_t workers = resolve_threads(threads);
    try {
        if (*train_cmd) return cmd_train(ta, workers);
        if (*eval_cmd) return cmd_eval(ea, workers);
        if (*ft_cmd) return cmd_finetune(fa, workers);
        if (*bo_cmd) return cmd_bo(ba, workers);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericAbortError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kNumeric;
    } catch (const DimensionMismatchError& e) {
        std::cerr << "dimension mismatch: " << e.what() << "\n";
        return kDims;
    } catch (const TaskFileError& e) {
        std::cerr << "task file error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kUsage;
}
