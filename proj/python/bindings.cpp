// Python bindings: scenario registry, Riccati oracle, value fields and the
// config-driven runner.  JSON crosses the boundary as text; the package
// wrapper decodes it.

#include "pmpdp/runner.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace py = pybind11;
using namespace pmpdp;

namespace {

Vec to_vec(const std::vector<double>& x) { return Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size())); }

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Stochastic control verification core";

  // Translators run newest first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FiniteEscape>(m, "FiniteEscape", PyExc_ArithmeticError);

  m.def("list_scenarios", [] {
    std::vector<py::tuple> out;
    for (const auto& s : list_scenarios()) out.push_back(py::make_tuple(s.name, s.description, s.defaults.dump()));
    return out;
  }, "(name, description, defaults-json) for each built-in scenario");

  m.def("preset_names", &preset_names);
  m.def("effective_config", [](const std::string& text) { return effective_config(parse_config(text)).dump(); },
        py::arg("config_json"));
  m.def("preset_config", [](const std::string& name) { return effective_config(preset(name)).dump(); },
        py::arg("name"));

  py::class_<RiccatiSolution>(m, "Riccati")
      .def("pi", &RiccatiSolution::pi_at, py::arg("t"))
      .def("c", &RiccatiSolution::c_at, py::arg("t"))
      .def("P", &RiccatiSolution::P_at, py::arg("t"))
      .def("V", &RiccatiSolution::V, py::arg("t"), py::arg("x"))
      .def("feedback", &RiccatiSolution::feedback, py::arg("t"), py::arg("x"));

  m.def("riccati",
        [](double alpha, double beta, double sigma, double m_cost, double n_cost, double gamma, double T, int steps) {
          const LqParams lq{alpha, beta, sigma, m_cost, n_cost, gamma, T};
          return solve_riccati(lq, TimeGrid(0.0, T, steps));
        },
        py::arg("alpha") = 0.0, py::arg("beta") = 1.0, py::arg("sigma") = 0.5, py::arg("m_cost") = 1.0,
        py::arg("n_cost") = 1.0, py::arg("gamma") = 1.0, py::arg("T") = 1.0, py::arg("steps") = 100);

  py::class_<ValueField>(m, "ValueField")
      .def_property_readonly("steps", &ValueField::steps)
      .def_property_readonly("dim", &ValueField::dim)
      .def_property_readonly("spacing", &ValueField::spacing)
      .def("time", &ValueField::time, py::arg("step"))
      .def("value", [](const ValueField& f, int step, const std::vector<double>& x) { return f.value(step, to_vec(x)); },
           py::arg("step"), py::arg("x"))
      .def("stderr", [](const ValueField& f, int step, const std::vector<double>& x) {
             return f.stderr_at(step, to_vec(x));
           }, py::arg("step"), py::arg("x"));

  m.def("value_field",
        [](const std::string& scenario_json, double t, int anchors, int samples) {
          const auto p = make_scenario(nlohmann::json::parse(scenario_json));
          ValueOptions o;
          o.anchors = anchors;
          o.samples = samples;
          py::gil_scoped_release unlocked;
          return compute_value(p, t, o);
        },
        py::arg("scenario_json"), py::arg("t") = 0.0, py::arg("anchors") = 481, py::arg("samples") = 10000);

  m.def("run",
        [](const std::string& config_json, const std::string& out) {
          auto cfg = parse_config(config_json);
          if (!out.empty()) cfg.output_dir = out;
          RunResult r;
          {
            py::gil_scoped_release unlocked;
            r = run_experiment(cfg);
          }
          const auto report = read_file(std::filesystem::path(r.output_dir) / "report.json");
          return py::make_tuple(exit_code(r.report), r.output_dir, r.cost, report);
        },
        py::arg("config_json"), py::arg("out") = "",
        "Runs an experiment; returns (exit_code, output_dir, cost, report-json)");

  m.def("summary_table", [](const std::string& report_json) { return summary_table(nlohmann::json::parse(report_json)); },
        py::arg("report_json"));
}
