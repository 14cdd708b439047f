// Python bindings. Structured results cross the boundary as JSON text and are
// decoded on the Python side, so the schema matches the CLI artifacts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hesd/analysis.hpp"
#include "hesd/error.hpp"

namespace py = pybind11;
using namespace hesd;

namespace {

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", e.what());
  }
  return run_config_from_json(j);
}

std::string train_run(const std::string& config_json, const std::string& out_dir) {
  const RunConfig config = parse_config(config_json);
  TrainResult r;
  {
    py::gil_scoped_release release;
    r = train_to_directory(config, out_dir);
  }
  json j;
  j["run_id"] = config.run_id;
  j["config_hash"] = config_hash(config);
  j["epochs"] = r.metrics.size();
  j["checkpoints"] = json::array();
  for (const auto& c : r.checkpoints) j["checkpoints"].push_back(epoch_stem(c.epoch) + ".ckpt");
  j["plateau_epoch"] = r.plateau_epoch ? json(*r.plateau_epoch) : json(nullptr);
  j["diverged"] = r.diverged;
  j["final_train_accuracy"] = r.metrics.empty() ? 0.0 : r.metrics.back().train_accuracy;
  j["final_generalization_accuracy"] = r.metrics.empty() ? 0.0 : r.metrics.back().generalization_accuracy;
  return j.dump();
}

std::string analyze(const std::string& path, const std::string& tag, std::optional<std::size_t> probes,
                    std::optional<std::size_t> steps, std::optional<std::uint64_t> seed,
                    std::optional<double> qs_baseline) {
  const CheckpointFile f = load_checkpoint(path);
  AnalysisConfig a = f.config.analysis;
  if (probes) a.slq.probes = *probes;
  if (steps) a.slq.steps = *steps;
  if (seed) a.slq.seed = *seed;
  CheckpointAnalysis out;
  {
    py::gil_scoped_release release;
    out = analyze_checkpoint(f.config, f.checkpoint, parse_dataset_tag(tag), a, qs_baseline);
  }
  json j = to_json(out.record);
  j["density"] = {{"grid", out.slq.density.grid}, {"values", out.slq.density.density}};
  return j.dump();
}

py::dict slq(py::array_t<double, py::array::c_style | py::array::forcecast> matrix, std::size_t probes,
             std::size_t steps, std::uint64_t seed, double sigma_factor, std::size_t grid_points) {
  if (matrix.ndim() != 2 || matrix.shape(0) != matrix.shape(1))
    throw ShapeError("expected a square matrix");
  const auto n = static_cast<std::size_t>(matrix.shape(0));
  std::vector<double> m(matrix.data(), matrix.data() + n * n);
  LinearOperator op = [&m, n](std::span<const double> in, std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += m[i * n + k] * in[k];
      out[i] = s;
    }
  };
  SlqOptions o{probes, steps, sigma_factor, seed, grid_points};
  const SlqResult r = slq_density(op, n, o);
  const CtValue ct = compute_ct(r.ritz);
  py::dict d;
  d["grid"] = r.density.grid;
  d["density"] = r.density.density;
  d["nodes"] = r.ritz.nodes;
  d["weights"] = r.ritz.weights;
  d["sigma"] = r.density.sigma;
  d["c_t"] = ct.value;
  d["r_e"] = compute_re(r.ritz);
  return d;
}

std::string assess_reports(const std::string& train_json, const std::string& gen_json, double ct_threshold,
                           double delta_re, double delta_kh05) {
  const AnalysisRecord t = analysis_record_from_json(json::parse(train_json));
  const AnalysisRecord g = analysis_record_from_json(json::parse(gen_json));
  VerdictRecord v;
  v.thresholds = CriteriaThresholds{ct_threshold, delta_re, delta_kh05};
  v.thresholds.validate();
  v.verdict = assess(t.report, g.report, v.thresholds);
  v.seed = t.seed;
  v.config_hash = t.config_hash;
  return to_json(v).dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hessian eigenspectrum diagnostics";

  // Module-lifetime handles; the module keeps the type objects alive.
  static PyObject* config_error = py::exception<ConfigError>(m, "ConfigError", PyExc_ValueError).ptr();
  static PyObject* format_error = py::exception<FormatError>(m, "FormatError", PyExc_ValueError).ptr();
  static PyObject* numerical_error =
      py::exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError).ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::object err = py::handle(config_error)(e.what());
      err.attr("field") = e.field();
      PyErr_SetObject(config_error, err.ptr());
    } catch (const FormatError& e) {
      PyErr_SetString(format_error, e.what());
    } catch (const NumericalError& e) {
      PyErr_SetString(numerical_error, e.what());
    } catch (const ShapeError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.attr("SCHEMA_VERSION") = kSchemaVersion;

  m.def("config_hash", [](const std::string& text) { return config_hash(parse_config(text)); },
        py::arg("config_json"));
  m.def("normalize_config", [](const std::string& text) { return to_json(parse_config(text)).dump(); },
        py::arg("config_json"));
  m.def("train", &train_run, py::arg("config_json"), py::arg("out_dir"));
  m.def("analyze", &analyze, py::arg("checkpoint"), py::arg("tag") = "train", py::arg("probes") = py::none(),
        py::arg("steps") = py::none(), py::arg("seed") = py::none(), py::arg("qs_baseline") = py::none());
  m.def("slq", &slq, py::arg("matrix"), py::arg("probes") = 10, py::arg("steps") = 64, py::arg("seed") = 0,
        py::arg("sigma_factor") = 0.01, py::arg("grid_points") = 1024);
  m.def("classify", &classify_hesd, py::arg("c_t"), py::arg("lambda_min_neg"), py::arg("lambda_max_pos"),
        py::arg("epsilon_qs"), py::arg("ct_threshold") = -0.6);
  m.def("assess", &assess_reports, py::arg("train_report"), py::arg("generalization_report"),
        py::arg("ct_threshold") = -0.6, py::arg("delta_re") = 1.5, py::arg("delta_kh05") = 1.2);

  py::enum_<HesdType>(m, "HesdType")
      .value("MP", HesdType::mp)
      .value("MN", HesdType::mn)
      .value("QS", HesdType::qs);
}
