#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lorec/calibration.hpp"
#include "lorec/errors.hpp"
#include "lorec/experiment.hpp"

namespace py = pybind11;

namespace {

lorec::ExperimentConfig config_from(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw lorec::ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return lorec::parse_config(j);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Fraud-aware sequential recommendation core";

  py::register_exception<lorec::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<lorec::DataError>(m, "DataError", PyExc_RuntimeError);

  m.def("normalize_config", [](const std::string& text) { return lorec::to_json(config_from(text)).dump(); },
        py::arg("config_json"), "Validate a config and return it with every default filled in.");
  m.def("load_config", [](const std::filesystem::path& p) { return lorec::to_json(lorec::load_config(p)).dump(); },
        py::arg("path"));
  m.def("config_digest", [](const std::string& text) { return lorec::config_digest(config_from(text)); },
        py::arg("config_json"));

  m.def(
      "run",
      [](const std::string& text, const std::string& out) {
        const lorec::ExperimentConfig cfg = config_from(text);
        lorec::RunArtifacts run = [&] {
          py::gil_scoped_release release;
          const lorec::PreparedData data = lorec::prepare_data(cfg);
          const std::filesystem::path snapshots = std::filesystem::path(out) / "snapshots";
          lorec::RunArtifacts r = lorec::run_pipeline(cfg, data, nullptr, out.empty() ? nullptr : &snapshots);
          if (!out.empty()) lorec::write_run(r, cfg, out);
          return r;
        }();
        return lorec::to_json(run.report).dump();
      },
      py::arg("config_json"), py::arg("out") = "",
      "Run the pipeline and return the report as JSON; artifacts go to `out` when given.");

  m.def(
      "target_metrics",
      [](const std::vector<std::vector<lorec::ItemIndex>>& topk,
         const std::vector<std::vector<lorec::ItemIndex>>& interactions,
         const std::vector<lorec::ItemIndex>& targets, std::size_t k) {
        const lorec::TargetMetrics t = lorec::target_metrics(topk, interactions, targets, k);
        return std::make_pair(t.hr, t.ndcg);
      },
      py::arg("topk"), py::arg("interactions"), py::arg("targets"), py::arg("k"));
  m.def("consistency", &lorec::consistency, py::arg("attacked"), py::arg("clean"));

  m.def(
      "compensate_rounds",
      [](const std::vector<std::vector<double>>& rounds, double xi_hat) {
        if (rounds.empty()) throw lorec::DataError("compensate_rounds: no rounds");
        lorec::WeightPool pool(std::vector<std::string>(rounds.front().size()), xi_hat);
        for (const auto& scores : rounds) pool = lorec::compensate(pool, scores, lorec::adaptive_threshold(scores));
        return std::make_pair(pool.xi(), lorec::to_weights(pool));
      },
      py::arg("rounds"), py::arg("xi_hat") = 5.0,
      "Apply one compensation round per score list to a fresh pool; returns (xi, weights).");
  m.def(
      "initial_weights",
      [](std::size_t n, double xi_hat) {
        std::vector<std::string> ids(n);
        return lorec::to_weights(lorec::WeightPool(ids, xi_hat));
      },
      py::arg("n"), py::arg("xi_hat") = 5.0);
  m.def("fraud_delta_closed_form", &lorec::fraud_delta_closed_form, py::arg("alpha"), py::arg("beta"),
        py::arg("gamma"));
}
