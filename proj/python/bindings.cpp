#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "pvfl/experiment.hpp"
#include "pvfl/metrics.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

// Specs and reports cross the boundary as JSON text; the Python side wraps
// them with json.loads / json.dumps.
pvfl::ExperimentSpec spec_from(const std::string& text, const std::string& base_dir) {
  return pvfl::parse_spec(json::parse(text), base_dir);
}

std::vector<pvfl::Strategy> strategies_from(const std::vector<std::string>& names) {
  std::vector<pvfl::Strategy> out;
  for (const auto& n : names) out.push_back(pvfl::parse_strategy(n));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Personalised federated PV disaggregation";

  auto base = py::register_exception<pvfl::Error>(m, "Error");
  py::register_exception<pvfl::ConfigError>(m, "ConfigError", base.ptr());

  m.def("mae", [](const std::vector<double>& y, const std::vector<double>& y_hat) { return pvfl::mae(y, y_hat); });
  m.def("rmse", [](const std::vector<double>& y, const std::vector<double>& y_hat) { return pvfl::rmse(y, y_hat); });
  m.def("r2", [](const std::vector<double>& y, const std::vector<double>& y_hat) { return pvfl::r2(y, y_hat); });

  m.def("compute_lambda", [](const std::vector<double>& e_local, const std::vector<double>& e_global) {
    return pvfl::compute_lambda(e_local, e_global);
  });
  m.def("aggregation_weights",
        [](const std::vector<std::size_t>& volumes) { return pvfl::aggregation_weights(volumes); });

  m.def(
      "run_experiment",
      [](const std::string& spec_json, const std::string& base_dir) {
        const pvfl::ExperimentSpec spec = spec_from(spec_json, base_dir);
        py::gil_scoped_release release;
        const pvfl::ExperimentData data = pvfl::load_data(spec);
        return pvfl::run_experiment(spec, data).report.dump();
      },
      py::arg("spec_json"), py::arg("base_dir") = "",
      "Runs every strategy of the spec in memory and returns the report as JSON text.");

  m.def(
      "cmd_run",
      [](const std::string& spec_json, const std::string& base_dir, const std::filesystem::path& out) {
        const pvfl::ExperimentSpec spec = spec_from(spec_json, base_dir);
        py::gil_scoped_release release;
        pvfl::cmd_run(spec, out);
      },
      py::arg("spec_json"), py::arg("base_dir"), py::arg("out"));

  m.def(
      "cmd_trace",
      [](const std::string& spec_json, const std::string& base_dir, const std::filesystem::path& run_dir,
         const std::string& prosumer, const std::string& from, const std::string& to,
         const std::vector<std::string>& strategies, const std::filesystem::path& csv_out) {
        const pvfl::ExperimentSpec spec = spec_from(spec_json, base_dir);
        const auto which = strategies.empty() ? spec.strategies() : strategies_from(strategies);
        py::gil_scoped_release release;
        pvfl::cmd_trace(spec, run_dir, prosumer, from, to, which, csv_out);
      },
      py::arg("spec_json"), py::arg("base_dir"), py::arg("run_dir"), py::arg("prosumer"), py::arg("date_from"),
      py::arg("date_to"), py::arg("strategies"), py::arg("csv_out"));

  m.def(
      "cmd_onboard",
      [](const std::string& spec_json, const std::string& base_dir, const std::filesystem::path& run_dir,
         std::size_t rounds) {
        const pvfl::ExperimentSpec spec = spec_from(spec_json, base_dir);
        py::gil_scoped_release release;
        return pvfl::cmd_onboard(spec, run_dir, rounds).dump();
      },
      py::arg("spec_json"), py::arg("base_dir"), py::arg("run_dir"), py::arg("rounds"));
}
