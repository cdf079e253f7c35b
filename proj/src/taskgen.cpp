#include "danp/taskgen.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

namespace danp {

KernelFamily parse_kernel_family(const std::string& name) {
    if (name == "rbf") return KernelFamily::rbf;
    if (name == "matern52") return KernelFamily::matern52;
    throw ConfigError("kernel", "unknown kernel family '" + name + "'");
}

std::string kernel_family_name(KernelFamily family) { return family == KernelFamily::rbf ? "rbf" : "matern52"; }

void KernelSpec::validate() const {
    if (!(s > 0.0)) throw ContractError("kernel: s must be positive");
    if (!(ell > 0.0)) throw ContractError("kernel: length scale must be positive");
    if (!(noise_std > 0.0)) throw ContractError("kernel: noise_std must be positive");
}

double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("kernel_eval: points of dimension " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    const double s2 = spec.s * spec.s;
    if (spec.family == KernelFamily::rbf) return s2 * std::exp(-d2 / (2.0 * spec.ell * spec.ell));
    const double r = std::sqrt(5.0 * d2) / spec.ell;
    return s2 * (1.0 + r + r * r / 3.0) * std::exp(-r);
}

std::vector<double> gram_matrix(const KernelSpec& spec, std::span<const double> x, std::size_t d) {
    if (d == 0 || x.size() % d != 0) throw DimensionError("gram_matrix: ragged inputs");
    const std::size_t n = x.size() / d;
    std::vector<double> K(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        K[i * n + i] = spec.s * spec.s;
        for (std::size_t j = 0; j < i; ++j) {
            const double v = kernel_eval(spec, x.subspan(i * d, d), x.subspan(j * d, d));
            K[i * n + j] = v;
            K[j * n + i] = v;
        }
    }
    return K;
}

std::pair<std::size_t, std::size_t> sample_counts(std::size_t d_x, Rng& rng) {
    if (d_x == 0) throw ContractError("sample_counts: d_x must be positive");
    const auto unit = static_cast<std::int64_t>(d_x * d_x);
    const auto c = rng.uniform_int(5 * unit, 45 * unit);
    const auto t = rng.uniform_int(5 * unit, 50 * unit - c);
    return {static_cast<std::size_t>(c), static_cast<std::size_t>(t)};
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<std::size_t> random_context(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
        std::swap(perm[i], perm[j]);
    }
    perm.resize(count);
    return perm;
}

}  // namespace

TaskBatch sample_gp_task(std::size_t d_x, std::size_t d_y, KernelFamily family, Rng& rng, double noise_std,
                         GpSampleLog* log) {
    if (d_x == 0 || d_y == 0) throw ContractError("sample_gp_task: dims must be positive");
    for (std::uint64_t attempt = 0;; ++attempt) {
        const auto [nc, nt] = sample_counts(d_x, rng);
        const std::size_t n = nc + nt;
        TaskBatch task;
        task.d_x = d_x;
        task.d_y = d_y;
        task.x.resize(n * d_x);
        for (auto& v : task.x) v = rng.uniform(-2.0, 2.0);
        KernelSpec spec{family, rng.uniform(0.1, 1.0), rng.uniform(0.1, 0.6), noise_std};

        const auto K = gram_matrix(spec, task.x, d_x);
        Eigen::Map<const RowMatrix> Km(K.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        bool ok = false;
        Eigen::MatrixXd L;
        for (double jitter : {1e-6, 1e-4}) {
            Eigen::MatrixXd A = Km;
            A.diagonal().array() += noise_std * noise_std + jitter;
            Eigen::LLT<Eigen::MatrixXd> llt(A);
            if (llt.info() == Eigen::Success) {
                L = llt.matrixL();
                ok = true;
                break;
            }
            if (log) ++log->jitter_escalations;
        }
        if (!ok) {
            if (log) ++log->resamples;
            rng = Rng(derive_seed(rng.next_u64(), attempt));
            continue;
        }

        task.y.resize(n * d_y);
        Eigen::VectorXd z(static_cast<Eigen::Index>(n));
        for (std::size_t l = 0; l < d_y; ++l) {
            for (std::size_t i = 0; i < n; ++i) z[static_cast<Eigen::Index>(i)] = rng.normal();
            Eigen::VectorXd f = L * z;
            for (std::size_t i = 0; i < n; ++i) task.y[i * d_y + l] = f[static_cast<Eigen::Index>(i)];
        }
        task.context = random_context(n, nc, rng);
        return task;
    }
}

ScenarioKind parse_scenario_kind(const std::string& name) {
    if (name == "from_scratch") return ScenarioKind::from_scratch;
    if (name == "zero_shot") return ScenarioKind::zero_shot;
    if (name == "fine_tune") return ScenarioKind::fine_tune;
    throw ConfigError("scenario.name", "unknown scenario '" + name + "'");
}

std::string scenario_kind_name(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::from_scratch: return "from_scratch";
        case ScenarioKind::zero_shot: return "zero_shot";
        case ScenarioKind::fine_tune: return "fine_tune";
    }
    return "";
}

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kFinetuneStream = 2;
constexpr std::uint64_t kEvalStream = 3;

}  // namespace

Scenario::Scenario(ScenarioParams params, std::uint64_t seed) : params_(std::move(params)), seed_(seed) {
    if (params_.train_dims.empty()) throw ConfigError("scenario.train_dims", "must not be empty");
    if (params_.eval_dims.empty()) throw ConfigError("scenario.eval_dims", "must not be empty");
    if (params_.families.empty()) throw ConfigError("scenario.kernels", "must not be empty");
    for (auto d : params_.train_dims)
        if (d == 0) throw ConfigError("scenario.train_dims", "dims must be positive");
    for (auto d : params_.eval_dims)
        if (d == 0) throw ConfigError("scenario.eval_dims", "dims must be positive");
    if (params_.d_y == 0) throw ConfigError("scenario.d_y", "must be positive");
    if (!(params_.noise_std > 0.0)) throw ConfigError("scenario.noise_std", "must be positive");
    if (params_.kind == ScenarioKind::fine_tune) {
        if (params_.finetune_tasks == 0) throw ConfigError("scenario.finetune_tasks", "must be positive");
        finetune_.reserve(params_.finetune_tasks);
        for (std::size_t i = 0; i < params_.finetune_tasks; ++i)
            finetune_.push_back(task_at(kFinetuneStream, params_.eval_dims.front(), i));
    }
}

TaskBatch Scenario::task_at(std::uint64_t stream, std::size_t d_x, std::uint64_t index) const {
    Rng rng(derive_seed(derive_seed(seed_, stream), index));
    const auto& fam = params_.families;
    const KernelFamily family =
        fam.size() == 1 ? fam.front()
                        : fam[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(fam.size()) - 1))];
    return sample_gp_task(d_x, params_.d_y, family, rng, params_.noise_std);
}

std::size_t Scenario::train_dim(std::uint64_t index) const {
    const auto& dims = params_.train_dims;
    if (params_.kind == ScenarioKind::from_scratch || dims.size() == 1) return dims.front();
    Rng pick(derive_seed(derive_seed(seed_, kTrainStream ^ 0xd1d1), index));
    return dims[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(dims.size()) - 1))];
}

TaskBatch Scenario::train_task(std::uint64_t index) const { return task_at(kTrainStream, train_dim(index), index); }

TaskSource Scenario::stream() const {
    return [self = *this](std::uint64_t index) { return self.train_task(index); };
}

std::vector<TaskBatch> Scenario::eval_suite(std::size_t d_x, std::size_t count) const {
    if (d_x == 0) throw ConfigError("dims", "dims must be positive");
    if (count == 0) count = params_.eval_tasks;
    std::vector<TaskBatch> out;
    out.reserve(count);
    const std::uint64_t stream = derive_seed(kEvalStream, d_x);
    for (std::size_t i = 0; i < count; ++i) out.push_back(task_at(stream, d_x, i));
    return out;
}

Scenario build_scenario(const ScenarioParams& params, std::uint64_t seed) { return Scenario(params, seed); }

// ---------------------------------------------------------------------------
// Task files

namespace {

std::size_t header_field(const std::string& token, const std::string& name, std::size_t line) {
    const std::string prefix = name + "=";
    if (token.rfind(prefix, 0) != 0)
        throw TaskFileError("line " + std::to_string(line) + ": expected '" + prefix + "<int>', got '" + token + "'");
    const std::string digits = token.substr(prefix.size());
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
        throw TaskFileError("line " + std::to_string(line) + ": '" + name + "' is not a non-negative integer");
    return static_cast<std::size_t>(std::stoull(digits));
}

}  // namespace

TaskBatch grid_task_from_file(const std::string& path, Rng& rng) {
    std::ifstream in(path);
    if (!in) throw TaskFileError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw TaskFileError("line 1: missing header");
    std::istringstream hs(line);
    std::string magic, version, fx, fy, fn, extra;
    hs >> magic >> version >> fx >> fy >> fn;
    if (magic != "DANP-TASK" || version != "v1")
        throw TaskFileError("line 1: header must start with 'DANP-TASK v1'");
    if (hs >> extra) throw TaskFileError("line 1: unexpected trailing field '" + extra + "'");
    TaskBatch task;
    task.d_x = header_field(fx, "d_x", 1);
    task.d_y = header_field(fy, "d_y", 1);
    const std::size_t n = header_field(fn, "n", 1);
    if (task.d_x == 0 || task.d_y == 0) throw TaskFileError("line 1: d_x and d_y must be positive");
    if (n < 10) throw TaskFileError("line 1: n=" + std::to_string(n) + " is below the minimum of 10 points");

    const std::size_t width = task.d_x + task.d_y;
    task.x.reserve(n * task.d_x);
    task.y.reserve(n * task.d_y);
    std::vector<double> row;
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t lineno = r + 2;
        if (!std::getline(in, line))
            throw TaskFileError("line " + std::to_string(lineno) + ": missing row " + std::to_string(r + 1) + " of " +
                                std::to_string(n));
        row.clear();
        const char* p = line.c_str();
        while (true) {
            while (*p == ' ' || *p == '\t' || *p == '\r') ++p;
            if (*p == '\0') break;
            char* end = nullptr;
            errno = 0;
            const double v = std::strtod(p, &end);
            if (end == p || (*end != '\0' && *end != ' ' && *end != '\t' && *end != '\r'))
                throw TaskFileError("line " + std::to_string(lineno) + ": malformed number");
            if (!std::isfinite(v) || errno == ERANGE)
                throw TaskFileError("line " + std::to_string(lineno) + ": non-finite value");
            row.push_back(v);
            p = end;
        }
        if (row.size() != width)
            throw TaskFileError("line " + std::to_string(lineno) + ": row " + std::to_string(r + 1) + " has " +
                                std::to_string(row.size()) + " values, header says " + std::to_string(width));
        task.x.insert(task.x.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(task.d_x));
        task.y.insert(task.y.end(), row.begin() + static_cast<std::ptrdiff_t>(task.d_x), row.end());
    }
    while (std::getline(in, line))
        if (line.find_first_not_of(" \t\r") != std::string::npos)
            throw TaskFileError("file has more than n=" + std::to_string(n) + " data rows");

    auto [nc, nt] = sample_counts(task.d_x, rng);
    (void)nt;
    nc = std::min(nc, n - 1);
    task.context = random_context(n, nc, rng);
    task.validate();
    return task;
}

}  // namespace danp
