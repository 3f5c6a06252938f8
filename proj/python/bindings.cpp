#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cli.hpp"
#include "rinn/dataset.hpp"
#include "rinn/errors.hpp"
#include "rinn/evaluation.hpp"
#include "rinn/network.hpp"
#include "rinn/training.hpp"

namespace py = pybind11;
using namespace rinn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array a(shape);
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

py::dict record_dict(const SampleRecord& r) {
  py::dict d;
  d["path"] = r.path;
  d["class_id"] = r.class_id;
  d["cy"] = r.cy;
  d["cx"] = r.cx;
  d["angle_deg"] = r.angle_deg;
  return d;
}

SampleRecord dict_record(const py::dict& d) {
  SampleRecord r;
  if (d.contains("path")) r.path = d["path"].cast<std::string>();
  r.class_id = d["class_id"].cast<int>();
  r.cy = d["cy"].cast<double>();
  r.cx = d["cx"].cast<double>();
  r.angle_deg = d["angle_deg"].cast<double>();
  return r;
}

py::list samples_list(const std::vector<Sample>& samples) {
  py::list out;
  for (const Sample& s : samples) out.append(py::make_tuple(to_array(s.image), record_dict(s.record)));
  return out;
}

std::vector<Sample> list_samples(const py::list& items) {
  std::vector<Sample> out;
  for (const auto& item : items) {
    const auto pair = item.cast<py::tuple>();
    out.push_back({to_tensor(pair[0].cast<Array>()), dict_record(pair[1].cast<py::dict>())});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_rinn, m) {
  m.doc() = "Rotation-equivariant pose networks";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", error);
  py::register_exception<StageOrderError>(m, "StageOrderError", error);
  py::register_exception<DivergenceError>(m, "DivergenceError", error);
  py::register_exception<FormatError>(m, "FormatError", error);

  m.attr("CLASS_COUNT") = kClassCount;
  m.attr("GLYPH_COUNT") = kGlyphCount;

  m.def("rasterize_glyph", [](int id, std::size_t size) { return to_array(rasterize_any_glyph(id, size)); },
        py::arg("glyph_id"), py::arg("size") = kGlyphSize);
  m.def("glyph_name", &glyph_name);
  m.def("rotate_plane", [](const Array& a, double deg) { return to_array(rotate_plane(to_tensor(a), deg)); });
  m.def("gen_train_set", [] { return samples_list(gen_train_set()); });
  m.def("gen_test_set", [](std::size_t count, std::size_t canvas, std::uint64_t seed) {
    return samples_list(gen_test_set(count, canvas, seed));
  }, py::arg("count") = 1000, py::arg("canvas") = 64, py::arg("seed") = 1);
  m.def("gen_pose_set", [](int glyph, std::size_t count, std::size_t canvas, std::uint64_t seed) {
    return samples_list(gen_pose_set(glyph, count, canvas, seed));
  });
  m.def("gen_detection_scene", [](std::size_t symbols, std::size_t canvas, std::uint64_t seed) {
    const Scene s = gen_detection_scene(symbols, canvas, seed);
    py::list placements;
    for (const SampleRecord& r : s.placements) placements.append(record_dict(r));
    return py::make_tuple(to_array(s.canvas), placements);
  });
  m.def("encode_pgm", [](const Array& a) { return py::bytes(encode_pgm(to_tensor(a))); });
  m.def("decode_pgm", [](const py::bytes& b) { return to_array(decode_pgm(std::string(b))); });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def("set", [](TrainConfig& c, const std::string& k, const std::string& v) { apply_config_value(c, k, v); })
      .def("validate", &TrainConfig::validate)
      .def("to_text", [](const TrainConfig& c) { return config_to_text(c); })
      .def_static("from_text", [](const std::string& text) { return parse_config(text); })
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("background_fraction", &TrainConfig::background_fraction)
      .def_readwrite("n", &TrainConfig::n)
      .def_readwrite("periods", &TrainConfig::periods)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("augment_copies", &TrainConfig::augment_copies)
      .def_readwrite("jitter_deg", &TrainConfig::jitter_deg)
      .def_readwrite("jitter_px", &TrainConfig::jitter_px)
      .def_readwrite("shift_negatives", &TrainConfig::shift_negatives)
      .def_readwrite("rotated_negatives", &TrainConfig::rotated_negatives)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("depress_until", &TrainConfig::depress_until)
      .def_readwrite("finetune_epochs", &TrainConfig::finetune_epochs)
      .def_readwrite("finetune_scenes", &TrainConfig::finetune_scenes)
      .def_readwrite("finetune_learning_rate", &TrainConfig::finetune_learning_rate)
      .def_readwrite("heldout_scenes", &TrainConfig::heldout_scenes);

  py::class_<Model>(m, "Model")
      .def_readonly("n", &Model::n)
      .def_readonly("class_count", &Model::class_count)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("is_pose_model", [](const Model& mo) { return mo.cyclic_index().has_value(); })
      .def("to_text", [](const Model& mo) { return model_to_text(mo); })
      .def_static("from_text", [](const std::string& t) { return model_from_text(t); })
      .def("save", [](const Model& mo, const std::string& path) { save_model(mo, path); })
      .def_static("load", [](const std::string& path) { return load_model(path); });

  m.def("run_stage", [](const std::string& stage, std::optional<Model> input, const py::list& train,
                        const TrainConfig& c) {
    auto [model, report] = run_stage(parse_stage(stage), input, list_samples(train), c);
    return py::make_tuple(model, report.to_json());
  }, py::arg("stage"), py::arg("model"), py::arg("train"), py::arg("config"));

  m.def("forward_pose", [](const Model& mo, const Array& image) {
    return to_array(forward_pose(mo, to_tensor(image)).scores);
  });
  m.def("pose_grid", [](const Model& mo) {
    const PoseGrid g = pose_grid(mo);
    return py::make_tuple(g.offset, g.stride);
  });
  m.def("classify", [](const Model& mo, const Array& image) {
    const Detection d = classify(forward_pose(mo, to_tensor(image)), pose_grid(mo));
    return py::dict(py::arg("class_id") = d.class_id, py::arg("score") = d.score, py::arg("i") = d.i,
                    py::arg("j") = d.j, py::arg("t") = d.t, py::arg("cy") = d.cy, py::arg("cx") = d.cx);
  });
  m.def("accuracy", [](const Model& mo, const py::list& test, std::size_t threads) {
    const AccuracyReport r = accuracy(mo, list_samples(test), threads);
    return py::dict(py::arg("samples") = r.samples, py::arg("class_accuracy") = r.class_accuracy,
                    py::arg("orientation_accuracy") = r.orientation_accuracy, py::arg("pose_accuracy") = r.pose_accuracy);
  }, py::arg("model"), py::arg("test"), py::arg("threads") = 1);
  m.def("pose_montage", [](const Model& mo, const Array& image) {
    return to_array(pose_montage(forward_pose(mo, to_tensor(image))));
  });

  m.def("cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  }, "Runs one rinn command; returns (exit_code, stdout, stderr).");
}
