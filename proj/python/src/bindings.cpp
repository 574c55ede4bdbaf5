#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "peftlab/commands.hpp"

namespace py = pybind11;
using namespace peftlab;

namespace {

// Exit code plus captured stdout and stderr of a command.
template <class Args, class Fn>
py::tuple run(Fn fn, const Args& args) {
  std::ostringstream out, err;
  int rc;
  {
    py::gil_scoped_release release;
    rc = fn(args, out, err);
  }
  return py::make_tuple(rc, out.str(), err.str());
}

py::dict load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  py::dict out;
  for (const auto& e : ck.entries()) {
    std::vector<py::ssize_t> shape(e.dims.begin(), e.dims.end());
    py::array_t<double> arr(shape);
    std::copy(e.values.begin(), e.values.end(), arr.mutable_data());
    out[py::str(e.name)] = std::move(arr);
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const py::dict& arrays, const std::string& dtype) {
  const DType dt = dtype == "f32" ? DType::f32 : dtype == "f64" ? DType::f64 : throw ValidationError("dtype must be f32 or f64");
  Checkpoint ck;
  for (const auto& [key, value] : arrays) {
    const auto arr = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(value);
    if (!arr) throw ValidationError("checkpoint values must be numeric arrays");
    ArrayEntry e;
    e.name = py::cast<std::string>(key);
    e.dtype = dt;
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) e.dims.push_back(static_cast<std::uint32_t>(arr.shape(i)));
    e.values.assign(arr.data(), arr.data() + arr.size());
    if (dt == DType::f32) {
      for (double& v : e.values) v = static_cast<float>(v);
    }
    ck.add(std::move(e));
  }
  ck.save(path);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Parameter-efficient fine-tuning lab";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def("methods", [] {
    std::vector<std::string> out;
    for (Method x : kAllMethods) out.emplace_back(to_string(x));
    return out;
  });

  m.def(
      "count_trainable",
      [](const std::string& method, const std::string& arch, int rank) {
        const TrainableCount c = count_trainable(AdapterSpec::for_method(parse_method(method), rank), ArchSpec::preset(arch));
        return py::make_tuple(c.count, c.fraction);
      },
      py::arg("method"), py::arg("arch") = "toy-small", py::arg("rank") = 8,
      "Trainable scalar count and its fraction of the base model.");

  m.def("base_parameter_count", [](const std::string& arch) { return base_parameter_count(ArchSpec::preset(arch)); },
        py::arg("arch") = "toy-small");

  m.def(
      "params",
      [](const std::string& arch, const std::string& method, std::optional<int> rank, bool verbose) {
        ParamsArgs a;
        a.arch = arch;
        a.method = method;
        a.rank = rank;
        a.verbose = verbose;
        return run(cmd_params, a);
      },
      py::arg("arch") = "toy-small", py::arg("method") = "lora", py::arg("rank") = py::none(),
      py::arg("verbose") = false);

  m.def(
      "pretrain",
      [](const std::filesystem::path& out, std::optional<std::filesystem::path> config,
         std::optional<std::uint64_t> seed) { return run(cmd_pretrain, PretrainArgs{config, out, seed}); },
      py::arg("out"), py::arg("config") = py::none(), py::arg("seed") = py::none());

  m.def(
      "adapt",
      [](const std::filesystem::path& base, const std::filesystem::path& out,
         std::optional<std::filesystem::path> config, std::optional<std::string> method, std::optional<int> rank,
         std::optional<double> alpha1, std::optional<double> alpha2, std::optional<std::string> data_size,
         std::optional<std::uint64_t> seed) {
        return run(cmd_adapt, AdaptArgs{base, config, method, rank, alpha1, alpha2, data_size, seed, out});
      },
      py::arg("base"), py::arg("out"), py::arg("config") = py::none(), py::arg("method") = py::none(),
      py::arg("rank") = py::none(), py::arg("alpha1") = py::none(), py::arg("alpha2") = py::none(),
      py::arg("data_size") = py::none(), py::arg("seed") = py::none());

  m.def(
      "merge",
      [](const std::filesystem::path& base, const std::filesystem::path& adapter, const std::filesystem::path& out) {
        return run(cmd_merge, MergeArgs{base, adapter, out});
      },
      py::arg("base"), py::arg("adapter"), py::arg("out"));

  m.def(
      "report",
      [](const std::filesystem::path& adapter, const std::filesystem::path& out, double threshold,
         std::optional<std::filesystem::path> svg) { return run(cmd_report, ReportArgs{adapter, threshold, out, svg}); },
      py::arg("adapter"), py::arg("out"), py::arg("threshold") = 1e-4, py::arg("svg") = py::none());

  m.def(
      "ablate",
      [](const std::filesystem::path& base, const std::filesystem::path& out, const std::string& grid,
         std::optional<std::filesystem::path> config, std::optional<std::string> data_size) {
        return run(cmd_ablate, AblateArgs{base, grid, out, config, data_size});
      },
      py::arg("base"), py::arg("out"), py::arg("grid") = "table1", py::arg("config") = py::none(),
      py::arg("data_size") = py::none());

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"), "Arrays of a checkpoint keyed by name.");
  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("arrays"), py::arg("dtype") = "f64");
}
