#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "flashclear/errors.hpp"
#include "flashclear/flops.hpp"
#include "flashclear/fpac.hpp"
#include "flashclear/metrics.hpp"
#include "flashclear/pipeline.hpp"
#include "flashclear/scheduler.hpp"
#include "flashclear/synthgen.hpp"

namespace py = pybind11;
namespace fc = flashclear;

namespace {

template <typename T>
py::array_t<T> to_array(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

template <typename T>
std::vector<T> to_vector(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<T>(a.data(), a.data() + a.size());
}

py::dict summary_dict(const fc::InferSummary& s) {
  py::dict d;
  d["tag"] = s.tag;
  d["scenes"] = s.scenes;
  d["mean_psnr"] = s.mean_psnr;
  d["mean_psnr_mask"] = s.mean_psnr_mask;
  d["mean_copy_psnr_mask"] = s.mean_copy_psnr_mask;
  d["beats_copy_fraction"] = s.beats_copy_fraction;
  d["flops_per_scene"] = s.flops_per_scene;
  d["cache_mismatches"] = s.cache_mismatches;
  d["cache_rows_checked"] = s.cache_rows_checked;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the flashclear object-removal toolkit";

  py::register_exception<fc::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<fc::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<fc::FormatError>(m, "FormatError", PyExc_OSError);
  py::register_exception<fc::NumericFault>(m, "NumericFault", PyExc_ArithmeticError);
  py::register_exception<fc::CacheError>(m, "CacheError", PyExc_RuntimeError);

  py::class_<fc::RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("seed", &fc::RunConfig::seed)
      .def_readwrite("out_dir", &fc::RunConfig::out_dir)
      .def_readwrite("train_count", &fc::RunConfig::train_count)
      .def_readwrite("heldout_count", &fc::RunConfig::heldout_count)
      .def_readwrite("teacher_steps", &fc::RunConfig::teacher_steps)
      .def_readwrite("student_steps", &fc::RunConfig::student_steps)
      .def_readwrite("infer_scenes", &fc::RunConfig::infer_scenes)
      .def_property_readonly("image_size", [](const fc::RunConfig& c) { return c.corpus.image_size; })
      .def("set", [](fc::RunConfig& c, const std::string& a) { fc::apply_override(c, a); }, py::arg("assignment"),
           "Apply one key=value override.")
      .def("validate", &fc::RunConfig::validate)
      .def("to_text", &fc::RunConfig::to_text)
      .def_static("parse", &fc::parse_run_config, py::arg("text"))
      .def_static("load", &fc::load_run_config, py::arg("path"))
      .def_static("quick", &fc::quick_run_config, py::arg("seed"), py::arg("out_dir"))
      .def("save", [](const fc::RunConfig& c, const std::filesystem::path& p) { fc::save_run_config(c, p); },
           py::arg("path"))
      .def("__eq__", [](const fc::RunConfig& a, const fc::RunConfig& b) { return a == b; });

  py::class_<fc::Scene>(m, "Scene")
      .def_readonly("height", &fc::Scene::height)
      .def_readonly("width", &fc::Scene::width)
      .def_readonly("seed", &fc::Scene::seed)
      .def_property_readonly("image", [](const fc::Scene& s) { return to_array(s.image, {s.height, s.width, 3}); })
      .def_property_readonly("background",
                             [](const fc::Scene& s) { return to_array(s.gt_background, {s.height, s.width, 3}); })
      .def_property_readonly("mask", [](const fc::Scene& s) { return to_array(s.m_obj, {s.height, s.width}); })
      .def_property_readonly("effect_mask",
                             [](const fc::Scene& s) { return to_array(s.m_obj_eff, {s.height, s.width}); });

  m.def(
      "generate_scene",
      [](std::uint64_t seed, const fc::RunConfig* cfg) {
        return fc::generate_scene(seed, cfg ? cfg->corpus : fc::CorpusConfig{});
      },
      py::arg("seed"), py::arg("config") = nullptr);
  m.def("read_corpus", &fc::read_corpus, py::arg("path"));

  m.def(
      "psnr",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& b) {
        return fc::psnr(to_vector(a), to_vector(b));
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "psnr_mask",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& b,
         const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
        return fc::psnr_mask(to_vector(a), to_vector(b), to_vector(mask));
      },
      py::arg("a"), py::arg("b"), py::arg("mask"));

  m.def(
      "alpha_bars",
      [](int total, double beta_start, double beta_end) {
        const auto s = fc::make_linear_schedule(total, beta_start, beta_end);
        return to_array(s.alpha_bars(), {total});
      },
      py::arg("total_steps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);
  m.def(
      "timestep_plan", [](int n, int total) { return fc::make_timestep_plan(n, total).taus; }, py::arg("n_steps"),
      py::arg("total_steps") = 1000);

  m.def(
      "dense_flops", [](const fc::RunConfig& c, int n_steps) { return fc::count_run(c.model, n_steps).total; },
      py::arg("config"), py::arg("n_steps"));

  m.def(
      "derive_token_mask",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& user, int grid, double quantile,
         int dilation) {
        fc::TokenMaskPolicy pol;
        pol.quantile = quantile;
        pol.dilation = dilation;
        const auto mask = fc::derive_token_mask(to_vector(a), to_vector(user), grid, pol);
        return to_array(mask.bits, {grid, grid});
      },
      py::arg("scores"), py::arg("user_tokens"), py::arg("grid"), py::arg("quantile") = 0.85, py::arg("dilation") = 1);

  m.def("gen_data", &fc::cmd_gen_data, py::arg("config"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "train_teacher",
      [](const fc::RunConfig& c, bool resume, long long stop_at) { fc::cmd_train_teacher(c, resume, stop_at); },
      py::arg("config"), py::arg("resume") = false, py::arg("stop_at") = -1, py::call_guard<py::gil_scoped_release>());
  m.def(
      "distill", [](const fc::RunConfig& c, bool resume, long long stop_at) { fc::cmd_distill(c, resume, stop_at); },
      py::arg("config"), py::arg("resume") = false, py::arg("stop_at") = -1, py::call_guard<py::gil_scoped_release>());
  m.def(
      "infer",
      [](const fc::RunConfig& c, const std::string& model, int steps, bool cache, int fusion) {
        fc::InferOptions opt;
        opt.model = model;
        opt.steps = steps;
        opt.cache = cache;
        opt.fusion = fusion;
        fc::InferSummary s;
        {
          py::gil_scoped_release release;
          s = fc::cmd_infer(c, opt);
        }
        return summary_dict(s);
      },
      py::arg("config"), py::arg("model") = "student", py::arg("steps") = 0, py::arg("cache") = false,
      py::arg("fusion") = -1);
  m.def("report", &fc::cmd_report, py::arg("run_dir"));
}
