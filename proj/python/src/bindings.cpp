#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "normshape/checkpoint.hpp"
#include "normshape/detect.hpp"
#include "normshape/error.hpp"
#include "normshape/eval.hpp"
#include "normshape/parallel.hpp"
#include "normshape/synth.hpp"
#include "normshape/train.hpp"
#include "normshape/vae.hpp"
#include "normshape/version.hpp"

namespace py = pybind11;
using namespace normshape;

namespace {

// Masks cross the boundary as uint8 arrays indexed [x, y, z]; Fortran order
// matches the x-fastest storage, so no reordering is needed.
using FArrayU8 = py::array_t<std::uint8_t, py::array::f_style | py::array::forcecast>;
using FArrayF64 = py::array_t<double, py::array::f_style | py::array::forcecast>;

std::array<py::ssize_t, 3> shape_of(const Dims& d) { return {d.nx, d.ny, d.nz}; }

FArrayU8 mask_to_numpy(const MaskVolume& m) {
  FArrayU8 out(shape_of(m.dims()));
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

MaskVolume mask_from_numpy(FArrayU8 a, Spacing spacing) {
  if (a.ndim() != 3) throw py::value_error("mask array must be 3-D");
  const Dims d{int(a.shape(0)), int(a.shape(1)), int(a.shape(2))};
  return MaskVolume(d, spacing, std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

FArrayF64 field_to_numpy(const ScalarField& f) {
  FArrayF64 out(shape_of(f.dims()));
  std::copy(f.data().begin(), f.data().end(), out.mutable_data());
  return out;
}

py::tuple spacing_tuple(const Spacing& s) { return py::make_tuple(s.sx, s.sy, s.sz); }

Spacing spacing_from(const std::array<double, 3>& s) { return {s[0], s[1], s[2]}; }
Dims dims_from(const std::array<int, 3>& d) { return {d[0], d[1], d[2]}; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Normative 3D shape modelling and anomaly detection";
  m.attr("__version__") = kVersion;

  m.attr("NormshapeError") =
      py::reinterpret_steal<py::object>(PyErr_NewException("normshape.NormshapeError", PyExc_RuntimeError, nullptr));
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      // The instance carries the machine-readable kind.
      const py::object cls = py::module_::import("normshape._core").attr("NormshapeError");
      py::object exc = cls(e.what());
      exc.attr("kind") = std::string(to_string(e.kind()));
      PyErr_SetObject(cls.ptr(), exc.ptr());
    }
  });

  m.def("set_thread_count", &set_thread_count, py::arg("n"));

  py::class_<MaskVolume>(m, "MaskVolume")
      .def(py::init([](FArrayU8 a, std::array<double, 3> s) { return mask_from_numpy(a, spacing_from(s)); }),
           py::arg("array"), py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0})
      .def_property_readonly("shape", [](const MaskVolume& v) { return shape_of(v.dims()); })
      .def_property_readonly("spacing", [](const MaskVolume& v) { return spacing_tuple(v.spacing()); })
      .def("to_numpy", &mask_to_numpy)
      .def("foreground_count", &MaskVolume::foreground_count)
      .def("__eq__", [](const MaskVolume& a, const MaskVolume& b) { return a == b; })
      .def("__repr__", [](const MaskVolume& v) {
        const Dims& d = v.dims();
        return "MaskVolume(" + std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" +
               std::to_string(d.nz) + ", " + std::to_string(v.foreground_count()) + " voxels)";
      });

  m.def("load_mask", &load_mask, py::arg("path"));
  m.def("save_mask", &save_mask, py::arg("mask"), py::arg("path"));
  m.def("dice", &dice, py::arg("a"), py::arg("b"));
  m.def("volume_mm3", &volume_mm3, py::arg("mask"));
  m.def("signed_distance", [](const MaskVolume& v) { return field_to_numpy(signed_distance(v)); },
        py::arg("mask"));
  m.def("connected_components", &connected_components, py::arg("mask"));
  m.def("resample", [](const MaskVolume& v, std::array<double, 3> s) { return resample(v, spacing_from(s)); },
        py::arg("mask"), py::arg("spacing"));
  m.def("center_in_grid", [](const MaskVolume& v, std::array<int, 3> d) { return center_in_grid(v, dims_from(d)); },
        py::arg("mask"), py::arg("dims"));
  m.def("translate", &translate, py::arg("mask"), py::arg("dx"), py::arg("dy"), py::arg("dz"));

  py::class_<AbnormalityParams>(m, "AbnormalityParams")
      .def(py::init<>())
      .def_readwrite("shrink_center_t", &AbnormalityParams::shrink_center_t)
      .def_readwrite("shrink_width", &AbnormalityParams::shrink_width)
      .def_readwrite("shrink_factor", &AbnormalityParams::shrink_factor)
      .def_readwrite("volume_preserving", &AbnormalityParams::volume_preserving);

  m.def(
      "gen_cohort",
      [](std::size_t n, std::array<int, 3> grid, std::array<double, 3> spacing,
         std::optional<AbnormalityParams> ab, std::uint64_t base_seed) {
        const ShapeGenParams p = shape_params_for_grid(dims_from(grid), spacing_from(spacing));
        std::vector<MaskVolume> masks;
        std::vector<std::uint64_t> seeds;
        for (auto& c : gen_cohort(n, p, ab, base_seed)) {
          masks.push_back(std::move(c.mask));
          seeds.push_back(c.seed);
        }
        return py::make_tuple(masks, seeds);
      },
      py::arg("n"), py::arg("grid") = std::array<int, 3>{48, 32, 16},
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 2.0}, py::arg("abnormality") = py::none(),
      py::arg("base_seed") = 0,
      "Synthetic cohort; returns (masks, seeds). Pass AbnormalityParams for the abnormal group.");

  py::class_<VaeConfig>(m, "VaeConfig")
      .def(py::init<>())
      .def_property(
          "input_dims", [](const VaeConfig& c) { return shape_of(c.input_dims); },
          [](VaeConfig& c, std::array<int, 3> d) { c.input_dims = dims_from(d); })
      .def_property(
          "input_spacing", [](const VaeConfig& c) { return spacing_tuple(c.input_spacing); },
          [](VaeConfig& c, std::array<double, 3> s) { c.input_spacing = spacing_from(s); })
      .def_readwrite("stages", &VaeConfig::stages)
      .def_readwrite("channels", &VaeConfig::channels)
      .def_readwrite("latent_dim", &VaeConfig::latent_dim)
      .def_readwrite("kl_warmup_steps", &VaeConfig::kl_warmup_steps)
      .def("validate", &VaeConfig::validate);

  py::class_<Vae>(m, "Vae")
      .def(py::init<VaeConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &Vae::config)
      .def("parameter_count", &Vae::parameter_count)
      .def("encode",
           [](const Vae& v, const MaskVolume& x) {
             const LatentPosterior p = v.encode(x);
             return py::make_tuple(p.mu, p.logvar);
           },
           py::arg("mask"), "Returns (mu, logvar).")
      .def("decode", [](const Vae& v, const std::vector<double>& z) { return field_to_numpy(v.decode(z)); },
           py::arg("z"), "Foreground probabilities indexed [x, y, z].")
      .def("reconstruct",
           [](const Vae& v, const MaskVolume& x) { return v.decode(v.encode(x).mu).binarize(0.5); },
           py::arg("mask"))
      .def("save", [](const Vae& v, const std::filesystem::path& p) { save_checkpoint(v.to_tensors(), p); },
           py::arg("path"))
      .def_static("load",
                  [](const VaeConfig& c, const std::filesystem::path& p) {
                    return Vae::from_tensors(c, load_checkpoint(p));
                  },
                  py::arg("config"), py::arg("path"));

  py::class_<EpochRecord>(m, "EpochRecord")
      .def_readonly("epoch", &EpochRecord::epoch)
      .def_readonly("train_loss", &EpochRecord::train_loss)
      .def_readonly("val_loss", &EpochRecord::val_loss)
      .def_readonly("val_dice", &EpochRecord::val_dice)
      .def_readonly("lr", &EpochRecord::lr);

  m.def(
      "train",
      [](const std::vector<MaskVolume>& cohort, const VaeConfig& config, int epochs, int batch_size,
         int accumulation_steps, double lr0, bool augment, std::uint64_t seed,
         std::function<void(const EpochRecord&)> on_epoch) {
        TrainOptions o;
        o.epochs = epochs;
        o.batch_size = batch_size;
        o.accumulation_steps = accumulation_steps;
        o.sgd.lr0 = lr0;
        o.augment = augment;
        o.seed = seed;
        if (on_epoch) {
          o.on_epoch = [&](const EpochRecord& r) {
            py::gil_scoped_acquire gil;
            on_epoch(r);
          };
        }
        TrainResult res = [&] {
          py::gil_scoped_release release;
          return train(cohort, config, o);
        }();
        return py::make_tuple(std::move(res.model), res.history.epochs, res.history.best_epoch);
      },
      py::arg("cohort"), py::arg("config"), py::arg("epochs") = 200, py::arg("batch_size") = 8,
      py::arg("accumulation_steps") = 5, py::arg("lr0") = TrainOptions{}.sgd.lr0,
      py::arg("augment") = true, py::arg("seed") = 0, py::arg("on_epoch") = nullptr,
      "Returns (model, epoch records, best epoch).");
  m.def("reconstruction_dice", &reconstruction_dice, py::arg("model"), py::arg("masks"));

  py::class_<CohortStats>(m, "CohortStats")
      .def_readonly("z_bar", &CohortStats::z_bar)
      .def_readonly("n", &CohortStats::n)
      .def_readonly("mean_volume_mm3", &CohortStats::mean_volume_mm3)
      .def_readonly("score_threshold", &CohortStats::score_threshold);
  m.def("fit_normative",
        [](const std::vector<Latent>& z, const std::vector<double>& vols) { return fit_normative(z, vols); },
        py::arg("latents"), py::arg("volumes_mm3") = std::vector<double>{});
  m.def("zero_shot_score",
        [](const Latent& z, const CohortStats& s) { return zero_shot_score(z, s); }, py::arg("latent"),
        py::arg("stats"));
  m.def("volume_baseline_score", &volume_baseline_score, py::arg("mask"), py::arg("stats"));

  py::class_<LinearClassifier>(m, "LinearClassifier")
      .def_readonly("w", &LinearClassifier::w)
      .def_readonly("b", &LinearClassifier::b)
      .def_readonly("mean", &LinearClassifier::mean)
      .def_readonly("scale", &LinearClassifier::scale)
      .def("decision", [](const LinearClassifier& c, const Latent& x) { return svm_decision(c, x); },
           py::arg("feature"));
  m.def(
      "fit_linear_svm",
      [](const std::vector<Latent>& x, const std::vector<int>& y, double lambda, int epochs,
         std::uint64_t seed) {
        SvmParams p;
        p.lambda = lambda;
        p.epochs = epochs;
        p.seed = seed;
        return fit_linear_svm(x, y, p);
      },
      py::arg("features"), py::arg("labels"), py::arg("lam") = 0.01, py::arg("epochs") = 200,
      py::arg("seed") = 0);

  py::class_<AsmModel>(m, "AsmModel")
      .def_readonly("k", &AsmModel::k)
      .def_readonly("explained_variance", &AsmModel::explained_variance)
      .def("project", [](const AsmModel& a, const MaskVolume& x) { return asm_project(a, x); },
           py::arg("mask"));
  m.def("asm_fit", &asm_fit, py::arg("masks"), py::arg("k"));

  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc(s, y); },
        py::arg("scores"), py::arg("labels"));
  m.def("balanced_accuracy",
        [](const std::vector<int>& p, const std::vector<int>& y) { return balanced_accuracy(p, y); },
        py::arg("predictions"), py::arg("labels"));
  m.def(
      "bootstrap_auc",
      [](const std::vector<double>& s, const std::vector<int>& y, int reps, std::uint64_t seed) {
        const BootstrapResult r = bootstrap(
            [](std::span<const double> a, std::span<const int> b) { return auc(a, b); }, s, y, reps, seed);
        return py::make_tuple(r.mean, r.sd);
      },
      py::arg("scores"), py::arg("labels"), py::arg("reps") = 10000, py::arg("seed") = 0,
      "Returns (mean, sd) of the bootstrap AUC distribution.");

  py::class_<FoldPlan>(m, "FoldPlan")
      .def_readonly("k", &FoldPlan::k)
      .def_readonly("leave_one_out", &FoldPlan::leave_one_out)
      .def_readonly("assignment", &FoldPlan::assignment);
  m.def("stratified_kfold",
        [](const std::vector<int>& y, int k, std::uint64_t seed) { return stratified_kfold(y, k, seed); },
        py::arg("labels"), py::arg("k"), py::arg("seed") = 0);
  m.def("folds_for_ratio", &folds_for_ratio, py::arg("ratio"));

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("method", &EvalReport::method)
      .def_readonly("auc", &EvalReport::auc)
      .def_readonly("balacc", &EvalReport::balacc)
      .def_readonly("auc_mean", &EvalReport::auc_mean)
      .def_readonly("auc_sd", &EvalReport::auc_sd)
      .def_readonly("balacc_mean", &EvalReport::balacc_mean)
      .def_readonly("balacc_sd", &EvalReport::balacc_sd)
      .def_readonly("n_boot", &EvalReport::n_boot)
      .def_readonly("scores", &EvalReport::scores)
      .def_readonly("labels", &EvalReport::labels);
  m.def(
      "crossval_fewshot",
      [](const std::vector<Latent>& x, const std::vector<int>& y, const FoldPlan& plan, double lambda,
         int reps, std::uint64_t seed) {
        SvmParams p;
        p.lambda = lambda;
        p.seed = seed;
        return crossval_fewshot(x, y, plan, p, reps, seed);
      },
      py::arg("latents"), py::arg("labels"), py::arg("plan"), py::arg("lam") = 0.01,
      py::arg("reps") = 1000, py::arg("seed") = 0);
  m.def("pca_2d", &pca_2d, py::arg("latents"));
  m.def(
      "interpolate_groups",
      [](const Vae& model, const std::vector<Latent>& normal, const std::vector<Latent>& abnormal,
         const std::vector<double>& ts) { return interpolate_groups(model, normal, abnormal, ts).masks; },
      py::arg("model"), py::arg("latents_normal"), py::arg("latents_abnormal"),
      py::arg("ts") = default_interpolation_ts());
}
