#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "blockflow/errors.hpp"
#include "blockflow/gene_blocks.hpp"
#include "blockflow/metrics.hpp"
#include "blockflow/pipeline.hpp"

namespace py = pybind11;
using namespace blockflow;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DenseMatrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
  DenseMatrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

// Configs cross the boundary as JSON text; the Python side does dumps/loads.
RunConfig parse(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return RunConfig::from_json(j);
}

template <class F>
auto stage(F fn) {
  return [fn](const std::string& cfg_text) {
    RunConfig cfg = parse(cfg_text);
    py::gil_scoped_release release;
    fn(cfg);
  };
}

}  // namespace

PYBIND11_MODULE(_blockflow, m) {
  m.doc() = "Native core of blockflow";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.attr("CONFIG_SCHEMA_VERSION") = kConfigSchemaVersion;

  m.def("default_config", [] { return RunConfig{}.to_json().dump(); });
  m.def("normalize_config", [](const std::string& text) { return parse(text).to_json().dump(); },
        "Fill defaults and validate; raises ValidationError.");

  m.def("run_synth", stage([](const RunConfig& c) { run_synth(c); }));
  m.def("run_build_blocks", stage([](const RunConfig& c) { run_build_blocks(c); }));
  m.def("run_train_vae", stage([](const RunConfig& c) { run_train_vae(c); }));
  m.def("run_train_fm", stage([](const RunConfig& c) { run_train_fm(c); }));
  m.def("run_generate", stage([](const RunConfig& c) { run_generate(c); }));
  m.def("run_transfer", stage([](const RunConfig& c) { run_transfer(c); }));
  m.def("run_evaluate", stage([](const RunConfig& c) { run_evaluate(c); }));

  m.def("block_count", &block_count, py::arg("n_genes"), py::arg("block_size"));

  m.def(
      "wasserstein2",
      [](const Array& x, const Array& y, std::size_t max_exact, std::uint64_t seed) {
        auto w = wasserstein2(to_matrix(x), to_matrix(y), max_exact, seed);
        return py::make_tuple(w.value, w.exact, w.n_used);
      },
      py::arg("x"), py::arg("y"), py::arg("max_exact") = kMaxExactAssignment, py::arg("seed") = 0,
      "Returns (value, exact, n_used).");
  m.def(
      "mmd_rbf", [](const Array& x, const Array& y) { return mmd_rbf(to_matrix(x), to_matrix(y)); }, py::arg("x"),
      py::arg("y"));
  m.def(
      "gene_mean_stats",
      [](const Array& real, const Array& gen) {
        auto s = gene_mean_stats(to_matrix(real), to_matrix(gen));
        py::dict d;
        d["pcc"] = s.pcc;
        d["r2"] = s.r2;
        d["mse"] = s.mse;
        d["defined"] = s.defined;
        return d;
      },
      py::arg("real"), py::arg("generated"));
}
