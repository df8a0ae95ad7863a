#include "mela/config.hpp"
#include "mela/errors.hpp"
#include "mela/eval.hpp"
#include "mela/labeler.hpp"
#include "mela/theory.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>

namespace py = pybind11;
using namespace mela;

namespace {

RunConfig make_config(const std::optional<std::string>& path, const std::map<std::string, std::string>& overrides) {
    RunConfig cfg = path ? load_config(*path) : RunConfig{};
    for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
    cfg.validate();
    return cfg;
}

std::string rows_json(const std::vector<MetricsReport>& rows) {
    json out = json::array();
    for (const auto& r : rows) out.push_back(report_to_json(r));
    return out.dump();
}

}  // namespace

PYBIND11_MODULE(_mela, m) {
    m.doc() = "Global label inference for few-shot tasks";
    m.attr("__version__") = kVersion;

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

    py::class_<RunConfig>(m, "Config")
        .def(py::init([](std::optional<std::string> path, std::map<std::string, std::string> overrides) {
                 return make_config(path, overrides);
             }),
             py::arg("path") = py::none(), py::arg("overrides") = std::map<std::string, std::string>{})
        .def("set", [](RunConfig& c, const std::string& key, const std::string& value) {
            apply_setting(c, key, value);
            c.validate();
        })
        .def("to_json", [](const RunConfig& c) { return config_to_json(c).dump(); });

    m.def("config_keys", &config_keys);

    m.def(
        "ridge_fit",
        [](const Matrix& Z, const std::vector<int>& labels, int num_classes, double lambda1) {
            return ridge_fit(Z, labels, num_classes, {lambda1, false}).W;
        },
        py::arg("Z"), py::arg("labels"), py::arg("num_classes"), py::arg("lambda1") = 1e-3);

    m.def(
        "logreg_fit",
        [](const Matrix& Z, const std::vector<int>& labels, int num_classes, double lambda2, int max_iter,
           double tol) {
            const LogRegResult r = logreg_fit(Z, labels, num_classes, {lambda2, max_iter, tol, false});
            return py::make_tuple(r.classifier.W, r.objective, r.converged);
        },
        py::arg("Z"), py::arg("labels"), py::arg("num_classes"), py::arg("lambda2") = 1.0,
        py::arg("max_iter") = 10000, py::arg("tol") = 1e-6);

    m.def("prune_threshold", &prune_threshold, py::arg("tasks_in_epoch"), py::arg("ways"),
          py::arg("clusters_at_start"), py::arg("q"));

    m.def(
        "clustering_accuracy",
        [](const std::vector<int>& assignments, const std::vector<int>& truths) {
            return clustering_accuracy(assignments, truths);
        },
        py::arg("assignments"), py::arg("truths"));

    m.def(
        "kmeans",
        [](const Matrix& points, int k, std::uint64_t seed) {
            const KMeansResult r = kmeans(points, k, seed);
            return py::make_tuple(r.centroids, r.labels);
        },
        py::arg("points"), py::arg("k"), py::arg("seed") = 0);

    m.def(
        "verify_bound",
        [](std::uint64_t seed) {
            const BoundInstance inst = random_bound_instance({}, seed);
            const BoundCheck b = verify_upper_bound(inst.classifier, inst.queries());
            const LemmaCheck l = verify_lemma_equality(inst.classifier, inst.tasks);
            py::dict d;
            d["lhs"] = b.lhs;
            d["rhs"] = b.rhs;
            d["gap"] = b.gap;
            d["pass"] = b.pass;
            d["identity_diff"] = l.diff;
            return d;
        },
        py::arg("seed"));

    m.def(
        "compare_json",
        [](const RunConfig& cfg, const std::vector<std::string>& variants) {
            std::vector<Variant> vs;
            for (const auto& v : variants) vs.push_back(variant_from_string(v));
            std::vector<MetricsReport> rows;
            {
                py::gil_scoped_release release;
                rows = compare_pipelines(cfg.pipeline, vs, cfg.threads);
            }
            return rows_json(rows);
        },
        py::arg("config"), py::arg("variants"));

    m.def(
        "sweep_csv",
        [](const RunConfig& cfg, const std::string& param, const std::vector<double>& values, int shots) {
            std::vector<SweepRow> rows;
            {
                py::gil_scoped_release release;
                rows = run_sweep(cfg.pipeline, param, values, shots, cfg.threads);
            }
            return sweep_to_csv(rows);
        },
        py::arg("config"), py::arg("param"), py::arg("values"), py::arg("shots") = 1);
}
