#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "voxadapt/cli.hpp"
#include "voxadapt/eval.hpp"

namespace py = pybind11;
using namespace voxadapt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

VoxelGrid to_grid(const Array& a) {
  if (a.ndim() != 3 || a.shape(0) != a.shape(1) || a.shape(1) != a.shape(2)) {
    throw ShapeError("voxel grids must be cubic 3D arrays");
  }
  VoxelGrid g(static_cast<std::size_t>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), g.values.begin());
  return g;
}

Array grid_array(const VoxelGrid& g) {
  const auto d = static_cast<py::ssize_t>(g.size);
  Array out({d, d, d});
  std::copy(g.values.begin(), g.values.end(), out.mutable_data());
  return out;
}

py::dict report_dict(const LossReport& r) {
  py::dict d;
  d["step"] = r.step;
  d["phase"] = r.phase;
  d["rec2_w"] = r.rec2_w;
  d["rec2_wv"] = r.rec2_wv;
  d["adv2"] = r.adv2;
  d["g2"] = r.g2;
  d["d2"] = r.d2;
  d["k"] = r.k;
  d["rec3"] = r.rec3;
  d["adv3"] = r.adv3;
  d["g3"] = r.g3;
  d["d3"] = r.d3;
  d["s"] = r.s;
  d["g"] = r.g;
  d["d"] = r.d;
  d["m2"] = r.m2;
  d["m3"] = r.m3;
  d["lr_g"] = r.lr_g;
  d["lr_d"] = r.lr_d;
  return d;
}

EquilibriumState equilibrium(double k, double s, double lambda2, double lambda3, double gamma2, double gamma3,
                             bool literal) {
  EquilibriumState eq;
  eq.k = k;
  eq.s = s;
  eq.lambda2 = lambda2;
  eq.lambda3 = lambda3;
  eq.gamma2 = gamma2;
  eq.gamma3 = gamma3;
  eq.literal_s_update = literal;
  return eq;
}

}  // namespace

PYBIND11_MODULE(_voxadapt, m) {
  m.doc() = "Adversarial domain adaptation for single-image voxel reconstruction";

  py::register_exception<Error>(m, "VoxadaptError");

  m.def(
      "conv",
      [](const Array& x, const Array& w, const Array& b, std::size_t stride, int rank, bool transposed) {
        ConvOptions o;
        o.stride = stride;
        o.rank = rank == 3 ? ConvRank::Three : ConvRank::Two;
        if (rank != 2 && rank != 3) throw ShapeError("rank must be 2 or 3");
        o.transposed = transposed;
        return to_array(conv_forward(to_tensor(x), to_tensor(w), to_tensor(b), o));
      },
      py::arg("x"), py::arg("kernels"), py::arg("bias"), py::arg("stride") = 1, py::arg("rank") = 2,
      py::arg("transposed") = false, "Strided 'same' convolution or its transpose.");

  m.def(
      "compute_iou",
      [](const Array& pred, const Array& truth, double t) { return compute_iou(to_grid(pred), to_grid(truth), t); },
      py::arg("prediction"), py::arg("truth"), py::arg("t") = kDefaultIoUThreshold);
  m.def(
      "compute_iou_aligned",
      [](const Array& pred, const Array& truth, double t, int max_shift, std::vector<double> scales) {
        AlignmentGrid g;
        g.max_shift = max_shift;
        g.scales = std::move(scales);
        return compute_iou_aligned(to_grid(pred), to_grid(truth), t, g);
      },
      py::arg("prediction"), py::arg("truth"), py::arg("t") = kDefaultIoUThreshold, py::arg("max_shift") = 2,
      py::arg("scales") = std::vector<double>{0.75, 1.0, 1.25});

  m.def(
      "d2_update",
      [](double score_real, double score_synth, double k, double lambda2, double gamma2) {
        const auto u = d2_losses(score_real, score_synth, equilibrium(k, 0.0, lambda2, 0.01, gamma2, 1.15, false));
        return py::make_tuple(u.loss, u.next);
      },
      py::arg("score_real"), py::arg("score_synth"), py::arg("k"), py::arg("lambda2") = 0.01,
      py::arg("gamma2") = 1.15, "Image discriminator loss and the next k.");
  m.def(
      "d3_update",
      [](double v, double gw, double gwv, double s, double lambda3, double gamma3, bool literal) {
        const auto u = d3_losses(v, gw, gwv, equilibrium(0.0, s, 0.01, lambda3, 1.15, gamma3, literal));
        return py::make_tuple(u.loss, u.next);
      },
      py::arg("score_voxel"), py::arg("score_gen_real"), py::arg("score_gen_synth"), py::arg("s"),
      py::arg("lambda3") = 0.01, py::arg("gamma3") = 1.15, py::arg("literal_s_update") = false,
      "Voxel discriminator loss and the next s.");
  m.def("convergence_measure", &convergence_measure, py::arg("real_score"), py::arg("fake_score"),
        py::arg("gamma"));

  m.def(
      "render_view",
      [](const Array& grid, double azimuth, std::size_t size) {
        return to_array(render_view(to_grid(grid), azimuth, size).pixels);
      },
      py::arg("grid"), py::arg("azimuth"), py::arg("size"));
  m.def(
      "stylize_real",
      [](const Array& image, std::uint64_t seed) {
        ImageSample s;
        s.pixels = to_tensor(image);
        return to_array(stylize(s, Domain::Real, seed).pixels);
      },
      py::arg("image"), py::arg("seed"));
  m.def("edge_density", [](const Array& image) { return edge_density(to_tensor(image)); }, py::arg("image"));

  py::class_<DatasetConfig>(m, "DatasetConfig")
      .def(py::init<>())
      .def_readwrite("shapes", &DatasetConfig::shapes)
      .def_readwrite("views", &DatasetConfig::views)
      .def_readwrite("train_fraction", &DatasetConfig::train_fraction)
      .def_readwrite("voxel_size", &DatasetConfig::voxel_size)
      .def_readwrite("image_size", &DatasetConfig::image_size)
      .def_readwrite("real_shapes", &DatasetConfig::real_shapes)
      .def_readwrite("seed", &DatasetConfig::seed);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&Dataset::build), py::arg("config"))
      .def_static("load", [](const std::filesystem::path& dir) { return load_dataset(dir); })
      .def("save", [](const Dataset& d, const std::filesystem::path& dir) { (void)write_dataset(dir, d); })
      .def_property_readonly("train_shapes", &Dataset::train_shapes)
      .def_property_readonly("test_shapes", &Dataset::test_shapes)
      .def_property_readonly("num_shapes", [](const Dataset& d) { return d.shapes().size(); })
      .def("voxels", [](const Dataset& d, std::size_t shape) { return grid_array(d.shapes().at(shape).grid); })
      .def("category", [](const Dataset& d, std::size_t shape) { return to_string(d.shapes().at(shape).recipe.category); })
      .def("synth_image", [](const Dataset& d, std::size_t shape, std::size_t view) {
        return to_array(d.synth_item(shape, view).pixels);
      })
      .def("real_image", [](const Dataset& d, std::size_t shape, std::size_t view) {
        return to_array(d.real_render(shape, view).pixels);
      });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("preset", &TrainConfig::preset)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("steps1", &TrainConfig::steps1)
      .def_readwrite("steps2", &TrainConfig::steps2)
      .def_readwrite("steps3", &TrainConfig::steps3)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("checkpoint_every", &TrainConfig::checkpoint_every)
      .def_property(
          "phi2", [](const TrainConfig& c) { return c.loss.phi2; }, [](TrainConfig& c, double v) { c.loss.phi2 = v; })
      .def_property(
          "phi3", [](const TrainConfig& c) { return c.loss.phi3; }, [](TrainConfig& c, double v) { c.loss.phi3 = v; })
      .def_property(
          "w_source", [](const TrainConfig& c) { return std::string(c.w_source == WSource::Real ? "real" : "synth"); },
          [](TrainConfig& c, const std::string& v) {
            if (v != "real" && v != "synth") throw ConfigError("w_source must be real or synth");
            c.w_source = v == "real" ? WSource::Real : WSource::Synth;
          })
      .def("to_map", &train_config_map);

  py::class_<TrainState>(m, "TrainState")
      .def_readonly("phase", &TrainState::phase)
      .def_readonly("global_step", &TrainState::global_step)
      .def_property_readonly("k", [](const TrainState& s) { return s.eq.k; })
      .def_property_readonly("s", [](const TrainState& s) { return s.eq.s; })
      .def_property_readonly("history", [](const TrainState& s) {
        py::list out;
        for (const auto& r : s.history) out.append(report_dict(r));
        return out;
      })
      .def("save", [](const TrainState& s, const std::filesystem::path& p) { write_checkpoint(p, state_to_checkpoint(s)); })
      .def_static("load", [](const std::filesystem::path& p) { return state_from_checkpoint(read_checkpoint(p)); });

  py::class_<Trainer>(m, "Trainer")
      .def(py::init<TrainConfig>(), py::arg("config"))
      .def("init", &Trainer::init)
      .def(
          "advance", [](const Trainer& t, const Dataset& d, TrainState& s) { return report_dict(t.advance(d, s)); },
          py::arg("dataset"), py::arg("state"))
      .def(
          "run",
          [](const Trainer& t, const Dataset& d, std::optional<std::filesystem::path> log,
             std::optional<std::filesystem::path> ckpt) {
            RunOptions o;
            o.log_path = std::move(log);
            o.checkpoint_dir = std::move(ckpt);
            py::gil_scoped_release release;
            return run_schedule(t, d, o);
          },
          py::arg("dataset"), py::arg("log_path") = py::none(), py::arg("checkpoint_dir") = py::none())
      .def(
          "encode", [](const Trainer& t, const TrainState& s, const Array& x) { return to_array(t.encode(s, to_tensor(x))); },
          py::arg("state"), py::arg("images"))
      .def(
          "reconstruct",
          [](const Trainer& t, const TrainState& s, const Array& x) { return to_array(t.reconstruct(s, to_tensor(x))); },
          py::arg("state"), py::arg("images"))
      .def(
          "predict_voxels",
          [](const Trainer& t, const TrainState& s, const Array& x) { return to_array(t.predict_voxels(s, to_tensor(x))); },
          py::arg("state"), py::arg("images"))
      .def(
          "held_out_iou",
          [](const Trainer& t, const TrainState& s, const Dataset& d, double th, bool aligned) {
            return evaluate_samples(t, s, d, held_out_real(d), th,
                                    aligned ? std::optional<AlignmentGrid>(AlignmentGrid{}) : std::nullopt)
                .mean;
          },
          py::arg("state"), py::arg("dataset"), py::arg("t") = kDefaultIoUThreshold, py::arg("aligned") = true)
      .def(
          "cross_domain_retrieval",
          [](const Trainer& t, const TrainState& s, const Dataset& d, std::size_t k) {
            const RetrievalScore r = cross_domain_retrieval(t, s, d, k);
            return py::make_tuple(r.rate(), r.chance());
          },
          py::arg("state"), py::arg("dataset"), py::arg("k") = 5);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli_main(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI subcommand; returns (exit code, stdout, stderr).");
}
