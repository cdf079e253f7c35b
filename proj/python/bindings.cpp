#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "danp/bo.hpp"
#include "danp/checkpoint.hpp"
#include "danp/config.hpp"

namespace py = pybind11;
using namespace danp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
    Array a({rows, cols});
    std::copy(v.begin(), v.end(), a.mutable_data());
    return a;
}

template <typename T>
Array tensor_array(const Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array a(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) a.mutable_data()[i] = static_cast<double>(t[i]);
    return a;
}

std::vector<double> rows_of(const Array& a, std::size_t& cols, const char* name) {
    if (a.ndim() != 2) throw py::value_error(std::string(name) + " must be a 2-D array");
    cols = static_cast<std::size_t>(a.shape(1));
    return std::vector<double>(a.data(), a.data() + a.size());
}

py::dict task_dict(const TaskBatch& t) {
    py::dict d;
    d["x"] = to_array(t.x, t.n(), t.d_x);
    d["y"] = to_array(t.y, t.n(), t.d_y);
    d["context"] = t.sorted_context();
    d["targets"] = t.targets();
    return d;
}

/// Context rows first, then target rows.
TaskBatch make_task(const Array& xc, const Array& yc, const Array& xt) {
    std::size_t dx = 0, dy = 0, dxt = 0;
    TaskBatch t;
    t.x = rows_of(xc, dx, "x_context");
    t.y = rows_of(yc, dy, "y_context");
    const auto xtv = rows_of(xt, dxt, "x_target");
    if (dx != dxt) throw py::value_error("x_context and x_target differ in width");
    if (xc.shape(0) != yc.shape(0)) throw py::value_error("x_context and y_context differ in length");
    t.d_x = dx;
    t.d_y = dy;
    const std::size_t nc = static_cast<std::size_t>(xc.shape(0));
    const std::size_t nt = static_cast<std::size_t>(xt.shape(0));
    t.x.insert(t.x.end(), xtv.begin(), xtv.end());
    t.y.resize((nc + nt) * dy, 0.0);
    for (std::size_t i = 0; i < nc; ++i) t.context.push_back(i);
    t.validate();
    return t;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Dimension-agnostic neural processes (C++ core)";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);
    py::register_exception<DimensionMismatchError>(m, "DimensionMismatchError", PyExc_ValueError);
    py::register_exception<MalformedTaskError>(m, "MalformedTaskError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);

    m.def("gaussian_loglik", &gaussian_loglik, py::arg("y"), py::arg("mu"), py::arg("sigma"));
    m.def("crps_gaussian", &crps_gaussian, py::arg("y"), py::arg("mu"), py::arg("sigma"));
    m.def(
        "kl_diag_gaussians",
        [](std::vector<double> m1, std::vector<double> v1, std::vector<double> m2, std::vector<double> v2) {
            return kl_diag_gaussians(m1, v1, m2, v2);
        },
        py::arg("m1"), py::arg("v1"), py::arg("m2"), py::arg("v2"));
    m.def("log_mean_exp", [](std::vector<double> v) { return log_mean_exp(v); });
    m.def("expected_improvement", &expected_improvement, py::arg("mu"), py::arg("sigma"), py::arg("best"));
    m.def("ackley", [](std::vector<double> x) { return ackley(x); });
    m.def("rastrigin", [](std::vector<double> x) { return rastrigin(x); });
    m.def("cosine_objective", [](std::vector<double> x) { return cosine_objective(x); });

    m.def(
        "kernel",
        [](const std::string& family, std::vector<double> a, std::vector<double> b, double s, double ell) {
            KernelSpec k{parse_kernel_family(family), s, ell};
            return kernel_eval(k, a, b);
        },
        py::arg("family"), py::arg("a"), py::arg("b"), py::arg("s") = 1.0, py::arg("ell") = 0.3);
    m.def(
        "sample_gp_task",
        [](std::size_t d_x, std::size_t d_y, const std::string& family, std::uint64_t seed, double noise_std) {
            Rng rng(seed);
            return task_dict(sample_gp_task(d_x, d_y, parse_kernel_family(family), rng, noise_std));
        },
        py::arg("d_x"), py::arg("d_y") = 1, py::arg("family") = "rbf", py::arg("seed") = 0,
        py::arg("noise_std") = 0.02);

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_property_readonly("step", [](const Checkpoint& c) { return c.step; })
        .def_property_readonly("config_json", [](const Checkpoint& c) { return run_config_to_json(c.config).dump(); })
        .def_property_readonly("keys", [](const Checkpoint& c) { return c.params.keys(); })
        .def_property_readonly("parameter_count", [](const Checkpoint& c) { return c.params.parameter_count(); })
        .def("param", [](const Checkpoint& c, const std::string& key) { return tensor_array(c.params.at(key)); })
        .def(
            "predict",
            [](const Checkpoint& c, const Array& xc, const Array& yc, const Array& xt, std::size_t K,
               std::uint64_t seed) {
                const TaskBatch task = make_task(xc, yc, xt);
                Rng rng(seed);
                const auto samples = predict_samples(task, c.params, c.config.model, K, rng);
                const auto targets = task.targets();
                const std::size_t dy = task.d_y;
                std::vector<double> mu(targets.size() * dy), sd(targets.size() * dy);
                const double S = static_cast<double>(samples.size());
                for (std::size_t i = 0; i < targets.size(); ++i)
                    for (std::size_t l = 0; l < dy; ++l) {
                        double a = 0.0, b = 0.0;
                        for (const auto& s : samples) {
                            const double mean = s.mean.at(targets[i], l), st = s.std.at(targets[i], l);
                            a += mean;
                            b += mean * mean + st * st;
                        }
                        a /= S;
                        mu[i * dy + l] = a;
                        sd[i * dy + l] = std::sqrt(std::max(b / S - a * a, 0.0));
                    }
                return py::make_tuple(to_array(mu, targets.size(), dy), to_array(sd, targets.size(), dy));
            },
            py::arg("x_context"), py::arg("y_context"), py::arg("x_target"), py::arg("K") = 50, py::arg("seed") = 0,
            "Moment-matched predictive mean and std at the target inputs.")
        .def("save", [](const Checkpoint& c, const std::string& path) { save_checkpoint(path, c); });

    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
    m.def(
        "new_checkpoint",
        [](const std::string& config_json, std::uint64_t seed) {
            Checkpoint c;
            c.config = run_config_from_json(nlohmann::json::parse(config_json));
            c.config.model.validate();
            c.params = init_params<float>(c.config.model, seed);
            c.rng_state = Rng(seed).state();
            return c;
        },
        py::arg("config_json") = "{}", py::arg("seed") = 0, "Untrained model from a run config.");
    m.def(
        "validate_config",
        [](const std::string& config_json) {
            auto c = run_config_from_json(nlohmann::json::parse(config_json));
            c.validate();
            return run_config_to_json(c).dump();
        },
        py::arg("config_json"), "Validated config with every default filled in.");
}
