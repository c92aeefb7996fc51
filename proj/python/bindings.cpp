// Python bindings: numpy in, numpy out. Frames are (T, H, W) float32.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "calseg/bunet.hpp"
#include "calseg/config.hpp"
#include "calseg/errors.hpp"
#include "calseg/features.hpp"
#include "calseg/groundtruth.hpp"
#include "calseg/inference.hpp"
#include "calseg/metrics.hpp"
#include "calseg/synthgen.hpp"

namespace py = pybind11;
using namespace calseg;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Block to_block(const F32& frames, std::uint64_t block_id = 0) {
  if (frames.ndim() != 3) throw ShapeError("frames must be a (T, H, W) array");
  const auto T = std::size_t(frames.shape(0)), H = std::size_t(frames.shape(1)), W = std::size_t(frames.shape(2));
  return Block(block_id, T, H, W, std::vector<float>(frames.data(), frames.data() + frames.size()));
}

ImageMap to_map(const F32& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  return ImageMap(std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::vector<float>(a.data(), a.data() + a.size()));
}

MaskMap to_mask(const U8& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D mask");
  std::vector<std::uint8_t> v(a.data(), a.data() + a.size());
  for (auto& x : v) x = x != 0;
  return MaskMap(std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::move(v));
}

F32 from_map(const ImageMap& m) {
  F32 out({m.height(), m.width()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

U8 from_mask(const MaskMap& m) {
  U8 out({m.height(), m.width()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

F32 from_array3(const Array3& a) {
  F32 out({a.channels(), a.height(), a.width()});
  std::copy(a.values().begin(), a.values().end(), out.mutable_data());
  return out;
}

F32 from_block(const Block& b) {
  F32 out({b.n_frames(), b.height(), b.width()});
  std::copy(b.data().begin(), b.data().end(), out.mutable_data());
  return out;
}

FeatureStack to_stack(const F32& a) {
  if (a.ndim() != 3 || a.shape(0) != py::ssize_t(kFeatureChannels))
    throw ShapeError("features must be a (13, H, W) array");
  return FeatureStack{0, Array3(kFeatureChannels, std::size_t(a.shape(1)), std::size_t(a.shape(2)),
                                std::vector<float>(a.data(), a.data() + a.size()))};
}

py::dict metrics_dict(const MetricReport& r) {
  py::dict d;
  d["dice"] = r.dice;
  d["accuracy"] = r.accuracy;
  d["sensitivity"] = r.sensitivity;
  d["mcc"] = r.mcc;
  d["tp"] = r.confusion.tp;
  d["tn"] = r.confusion.tn;
  d["fp"] = r.confusion.fp;
  d["fn"] = r.confusion.fn;
  return d;
}

SimConfig sim_config(const py::object& config) {
  if (config.is_none()) return SimConfig{};
  const std::string text = py::module_::import("json").attr("dumps")(config).cast<std::string>();
  SimConfig c = sim_config_from_json(Json::parse(text));
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Calcium-imaging segmentation core";

  // Translators run newest first, so the base class goes in first.
  const py::handle base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<DataError>(m, "DataError", base);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<PlacementError>(m, "PlacementError", base);

  m.def(
      "simulate",
      [](std::size_t n_blocks, std::uint64_t seed, const py::object& config) {
        py::list out;
        for (const auto& s : generate_dataset(sim_config(config), n_blocks, seed)) {
          py::dict d;
          d["block_id"] = s.block.block_id();
          d["frames"] = from_block(s.block);
          d["truth"] = from_mask(s.truth_mask);
          d["centers"] = s.neuron_centers;
          out.append(d);
        }
        return out;
      },
      py::arg("n_blocks"), py::arg("seed"), py::arg("config") = py::none(),
      "Synthetic blocks; `config` is a dict of simulator fields.");

  m.def("variance_map", [](const F32& f) { return from_map(variance_map(to_block(f))); }, py::arg("frames"));
  m.def("correlation_stack", [](const F32& f) { return from_array3(correlation_stack(to_block(f))); },
        py::arg("frames"));
  m.def("feature_stack", [](const F32& f) { return from_array3(build_feature_stack(to_block(f)).channels); },
        py::arg("frames"));
  m.def(
      "otsu_threshold",
      [](const F32& map) {
        const OtsuResult r = otsu_threshold(to_map(map));
        py::dict d;
        d["threshold"] = r.threshold;
        d["threshold_index"] = r.threshold_index;
        d["between_class_variance"] = r.between_class_variance;
        d["histogram"] = std::vector<std::uint64_t>(r.histogram.begin(), r.histogram.end());
        return d;
      },
      py::arg("map"));
  m.def("make_groundtruth", [](const F32& f) { return from_mask(make_groundtruth(to_block(f))); },
        py::arg("frames"));

  m.def("evaluate", [](const U8& pred, const U8& truth) { return metrics_dict(evaluate(to_mask(pred), to_mask(truth))); },
        py::arg("pred"), py::arg("truth"));
  m.def("dice_uncertainty_correlation", &dice_uncertainty_correlation, py::arg("points"));

  m.def(
      "parameter_count",
      [](const std::array<std::size_t, 5>& widths) {
        NetConfig c;
        c.encoder_widths = widths;
        c.validate();
        return parameter_count(c);
      },
      py::arg("encoder_widths") = NetConfig{}.encoder_widths);

  py::class_<BUNet>(m, "Model")
      .def_static(
          "load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"))
      .def_static(
          "init",
          [](std::uint64_t seed, const std::array<std::size_t, 5>& widths) {
            NetConfig c;
            c.encoder_widths = widths;
            c.validate();
            return init_params<float>(c, seed);
          },
          py::arg("seed") = 0, py::arg("encoder_widths") = NetConfig{}.encoder_widths)
      .def_property_readonly("parameter_count",
                             [](const BUNet& n) { return parameter_count(n.config()); })
      .def(
          "predict",
          [](const BUNet& net, const F32& features, std::size_t samples, std::uint64_t seed) {
            const FeatureStack x = to_stack(features);
            InferenceResult r;
            {
              py::gil_scoped_release release;
              r = mc_ensemble(net, x, samples, seed);
            }
            return py::make_tuple(from_map(r.probability), from_map(r.uncertainty));
          },
          py::arg("features"), py::arg("samples") = kDefaultEnsembleSize, py::arg("seed") = 0,
          "Monte Carlo ensemble: (probability, uncertainty) maps.");
}
