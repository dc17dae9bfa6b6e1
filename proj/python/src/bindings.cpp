#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "stagedepth/analysis.hpp"
#include "stagedepth/errors.hpp"
#include "stagedepth/serialization.hpp"
#include "stagedepth/trainer.hpp"

namespace py = pybind11;
using namespace stagedepth;

namespace {

HeadKind head_of(const std::string& s) {
  if (s == "detr") return HeadKind::SetPrediction;
  if (s == "dense") return HeadKind::Dense;
  throw InvalidConfig("head must be 'detr' or 'dense', got '" + s + "'");
}

ArchSpec arch_for(const std::string& head) {
  return head_of(head) == HeadKind::Dense ? toy_dense_arch() : toy_set_prediction_arch();
}

torch::Tensor matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  return torch::from_blob(const_cast<double*>(a.data()), {a.shape(0), a.shape(1)}, torch::kDouble).clone();
}

py::dict report_dict(const APReport& r) {
  py::dict d;
  for (const auto& [k, v] : r.fields()) d[py::str(k)] = v;
  return d;
}

// A training run held in memory: one weight set, all depth configurations.
class Run {
 public:
  Run(const std::string& head, std::uint64_t seed, bool naive, double lr, std::int64_t total_steps) {
    auto arch = arch_for(head);
    auto hyper = defaults_for(arch.head);
    if (naive) {
      arch = non_switchable_twin(arch);
      hyper = naive_joint_hyper(arch.head);
    }
    state_ = make_train_state(arch, hyper, seed, OptimizerSettings{.lr = lr, .total_steps = total_steps});
  }
  explicit Run(TrainState s) : state_(std::move(s)) {}

  void train(const std::vector<Scene>& scenes, std::int64_t steps, int batch_size) {
    py::gil_scoped_release release;
    stagedepth::train(state_, scenes, {}, Schedule{.steps = steps, .batch_size = batch_size});
  }
  std::int64_t step() const { return state_.step; }
  std::int64_t parameter_count() { return state_.model->parameter_count(); }

  py::dict evaluate(const std::vector<Scene>& scenes, const std::string& config, int exit) {
    const auto cfg = parse_config(state_.arch, config, exit == 0 ? state_.arch.decoder_layers : exit);
    APReport r;
    {
      py::gil_scoped_release release;
      r = evaluate_model(state_.model, scenes, cfg, 32);
    }
    return report_dict(r);
  }

  std::map<std::string, double> cka(const std::vector<Scene>& scenes, int bootstrap_n) {
    std::map<std::string, double> out;
    for (const auto& [id, e] : cka_report(state_.model, scenes, bootstrap_n).stages) out[id] = e.cka;
    return out;
  }

  std::string sweep_csv(const std::vector<Scene>& scenes) {
    py::gil_scoped_release release;
    return stagedepth::sweep_csv(state_.arch, depth_sweep(state_.model, scenes, enumerate_configs(state_.arch)));
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(state_, path); }
  static Run load(const std::filesystem::path& path) { return Run(load_checkpoint(path)); }

 private:
  TrainState state_;
};

}  // namespace

PYBIND11_MODULE(_stagedepth, m) {
  m.doc() = "Any-depth detector core";

  py::register_exception<Error>(m, "StagedepthError", PyExc_RuntimeError);

  py::class_<SceneObject>(m, "SceneObject")
      .def_readonly("category", &SceneObject::category)
      .def_readonly("box", &SceneObject::box)
      .def_property_readonly("tier", [](const SceneObject& o) { return to_string(o.tier); });

  py::class_<Scene>(m, "Scene")
      .def_readonly("height", &Scene::height)
      .def_readonly("width", &Scene::width)
      .def_readonly("objects", &Scene::objects)
      .def_property_readonly("pixels", [](const Scene& s) {
        py::array_t<std::uint8_t> a({s.height, s.width, 3});
        std::copy(s.pixels.begin(), s.pixels.end(), a.mutable_data());
        return a;
      });

  py::class_<APReport>(m, "APReport")
      .def_readonly("ap", &APReport::ap)
      .def_readonly("ap50", &APReport::ap50)
      .def_readonly("ap75", &APReport::ap75)
      .def("as_dict", &report_dict);

  m.def(
      "generate_dataset",
      [](std::uint64_t seed, int n, int clutter) {
        DatasetSpec spec;
        spec.clutter = clutter;
        return generate_dataset(seed, n, spec);
      },
      py::arg("seed"), py::arg("n"), py::arg("clutter") = 1);

  m.def("arch_json", [](const std::string& head) { return to_json(arch_for(head)).dump(); }, py::arg("head") = "dense");

  m.def(
      "config_bitstrings",
      [](const std::string& head) {
        const auto arch = arch_for(head);
        std::vector<std::pair<std::string, int>> out;
        for (const auto& c : enumerate_configs(arch)) out.emplace_back(config_bitstring(arch, c), c.decoder_exit);
        return out;
      },
      py::arg("head") = "dense");

  m.def(
      "flops",
      [](const std::string& head, const std::string& config, int exit) {
        const auto arch = arch_for(head);
        return flops_estimate(arch, parse_config(arch, config, exit == 0 ? arch.decoder_layers : exit), {96, 96});
      },
      py::arg("head"), py::arg("config"), py::arg("exit") = 0);

  m.def(
      "hungarian_match",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& cost) {
        if (cost.ndim() != 2) throw ShapeError("cost must be queries x targets");
        std::vector<double> c(cost.data(), cost.data() + cost.size());
        return hungarian_match(c, static_cast<int>(cost.shape(0)), static_cast<int>(cost.shape(1))).query_of_gt();
      },
      "Query assigned to each target by the minimum-cost injective matching.");

  m.def(
      "linear_cka",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& y) {
        return linear_cka(matrix(x), matrix(y));
      });

  m.def(
      "evaluate_map",
      [](const std::vector<std::tuple<int, int, std::array<double, 4>, double>>& dets,
         const std::vector<std::tuple<int, int, std::array<double, 4>>>& gts, int image_side) {
        std::vector<Detection> d;
        for (const auto& [img, cat, box, score] : dets) d.push_back({img, cat, box, score});
        std::vector<GroundTruth> g;
        for (const auto& [img, cat, box] : gts) g.push_back({img, cat, box});
        return evaluate_map(d, g, eval_options_for(image_side));
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("image_side") = 96,
      "Detections are (image_id, category, xywh pixels, score); ground truth is (image_id, category, xywh).");

  py::class_<Run>(m, "Run")
      .def(py::init<const std::string&, std::uint64_t, bool, double, std::int64_t>(), py::arg("head") = "dense",
           py::arg("seed") = 0, py::arg("naive") = false, py::arg("lr") = 1e-3, py::arg("total_steps") = 0)
      .def("train", &Run::train, py::arg("scenes"), py::arg("steps"), py::arg("batch_size") = 16)
      .def("evaluate", &Run::evaluate, py::arg("scenes"), py::arg("config") = "full:all", py::arg("exit") = 0)
      .def("cka", &Run::cka, py::arg("scenes"), py::arg("bootstrap_n") = 100)
      .def("sweep_csv", &Run::sweep_csv, py::arg("scenes"))
      .def("save", &Run::save)
      .def_static("load", &Run::load)
      .def_property_readonly("step", &Run::step)
      .def_property_readonly("parameter_count", &Run::parameter_count);
}
