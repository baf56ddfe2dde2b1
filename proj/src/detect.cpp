#include "normshape/detect.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "normshape/error.hpp"
#include "normshape/parallel.hpp"
#include "normshape/random.hpp"

namespace normshape {

namespace {

void check_lengths(const std::vector<Latent>& xs) {
  for (const auto& x : xs) {
    if (x.size() != xs.front().size()) {
      throw Error(ErrorKind::LengthMismatch, "latent vectors differ in length");
    }
  }
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

}  // namespace

CohortStats fit_normative(const std::vector<Latent>& latents, std::span<const double> volumes_mm3) {
  if (latents.empty()) throw Error(ErrorKind::EmptyCohort, "no healthy latents to fit");
  check_lengths(latents);
  if (!volumes_mm3.empty() && volumes_mm3.size() != latents.size()) {
    throw Error(ErrorKind::LengthMismatch, "volume count differs from latent count");
  }
  CohortStats s;
  s.n = latents.size();
  s.z_bar.assign(latents.front().size(), 0.0);
  for (const auto& z : latents) {
    for (std::size_t j = 0; j < z.size(); ++j) s.z_bar[j] += z[j];
  }
  for (double& v : s.z_bar) v /= double(s.n);
  if (!volumes_mm3.empty()) {
    s.mean_volume_mm3 =
        std::accumulate(volumes_mm3.begin(), volumes_mm3.end(), 0.0) / double(volumes_mm3.size());
  }
  std::vector<double> scores;
  scores.reserve(s.n);
  for (const auto& z : latents) scores.push_back(zero_shot_score(z, s));
  s.score_threshold = percentile(std::move(scores), 0.95);
  return s;
}

double zero_shot_score(std::span<const double> latent, const CohortStats& stats) {
  if (latent.size() != stats.z_bar.size()) {
    throw Error(ErrorKind::LengthMismatch, "latent length differs from the cohort mean");
  }
  double s = 0;
  for (std::size_t j = 0; j < latent.size(); ++j) {
    const double d = latent[j] - stats.z_bar[j];
    s += d * d;
  }
  return std::sqrt(s);
}

double volume_baseline_score(const MaskVolume& mask, const CohortStats& stats) {
  if (!std::isfinite(stats.mean_volume_mm3)) {
    throw Error(ErrorKind::InvalidArgument, "cohort statistics carry no mean volume");
  }
  return std::abs(volume_mm3(mask) - stats.mean_volume_mm3);
}

namespace {

// Standardized feature with a trailing constant 1 for the bias.
std::vector<double> augmented(const LinearClassifier& clf, std::span<const double> x) {
  std::vector<double> out(x.size() + 1, 1.0);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - clf.mean[j]) / clf.scale[j];
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

double objective(const std::vector<double>& w, double lambda,
                 const std::vector<std::vector<double>>& xs, const std::vector<double>& ys) {
  double hinge = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) hinge += std::max(0.0, 1.0 - ys[i] * dot(w, xs[i]));
  return 0.5 * lambda * dot(w, w) + hinge / double(xs.size());
}

void check_labels(std::span<const int> labels) {
  bool pos = false, neg = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorKind::InvalidArgument, "labels must be 0 or 1");
    (y == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) {
    throw Error(ErrorKind::SingleClass,
                std::string("labels contain no ") + (pos ? "negative (0)" : "positive (1)") +
                    " samples");
  }
}

}  // namespace

LinearClassifier fit_linear_svm(const std::vector<Latent>& features, std::span<const int> labels,
                                const SvmParams& params) {
  if (features.size() != labels.size()) {
    throw Error(ErrorKind::LengthMismatch, "feature and label counts differ");
  }
  if (features.empty()) throw Error(ErrorKind::EmptyCohort, "no training features");
  check_lengths(features);
  check_labels(labels);
  if (!(params.lambda > 0)) throw Error(ErrorKind::InvalidArgument, "lambda must be positive");
  if (params.epochs < 0) throw Error(ErrorKind::InvalidArgument, "epochs must be >= 0");

  const std::size_t n = features.size();
  const std::size_t dim = features.front().size();
  LinearClassifier clf;
  clf.lambda = params.lambda;
  clf.mean.assign(dim, 0.0);
  clf.scale.assign(dim, 1.0);
  for (const auto& x : features) {
    for (std::size_t j = 0; j < dim; ++j) clf.mean[j] += x[j];
  }
  for (double& m : clf.mean) m /= double(n);
  std::vector<double> var(dim, 0.0);
  for (const auto& x : features) {
    for (std::size_t j = 0; j < dim; ++j) var[j] += (x[j] - clf.mean[j]) * (x[j] - clf.mean[j]);
  }
  for (std::size_t j = 0; j < dim; ++j) {
    const double sd = std::sqrt(var[j] / double(n));
    clf.scale[j] = sd > 1e-12 ? sd : 1.0;
  }

  std::vector<std::vector<double>> xs;
  xs.reserve(n);
  for (const auto& x : features) xs.push_back(augmented(clf, x));
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = labels[i] == 1 ? 1.0 : -1.0;

  std::vector<double> w(dim + 1, 0.0), avg(dim + 1, 0.0);
  const double radius = 1.0 / std::sqrt(params.lambda);
  Rng rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  long t = 0;
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    for (std::size_t it = 0; it < n; ++it) {
      ++t;
      const std::size_t i = pick(rng);
      const double eta = 1.0 / (params.lambda * double(t));
      const bool active = ys[i] * dot(w, xs[i]) < 1.0;
      const double shrink = 1.0 - eta * params.lambda;
      for (std::size_t j = 0; j <= dim; ++j) {
        w[j] = shrink * w[j] + (active ? eta * ys[i] * xs[i][j] : 0.0);
      }
      const double norm = std::sqrt(dot(w, w));
      if (norm > radius) {
        for (double& v : w) v *= radius / norm;
      }
      for (std::size_t j = 0; j <= dim; ++j) avg[j] += (w[j] - avg[j]) / double(t);
    }
    if (params.objective_trace) {
      params.objective_trace->push_back(objective(avg, params.lambda, xs, ys));
    }
  }
  clf.w.assign(avg.begin(), avg.begin() + static_cast<long>(dim));
  clf.b = avg[dim];
  return clf;
}

double svm_decision(const LinearClassifier& clf, std::span<const double> feature) {
  if (feature.size() != clf.dim()) {
    throw Error(ErrorKind::LengthMismatch, "feature length differs from the classifier");
  }
  double s = clf.b;
  for (std::size_t j = 0; j < feature.size(); ++j) {
    s += clf.w[j] * (feature[j] - clf.mean[j]) / clf.scale[j];
  }
  return s;
}

double svm_objective(const LinearClassifier& clf, const std::vector<Latent>& features,
                     std::span<const int> labels) {
  if (features.size() != labels.size() || features.empty()) {
    throw Error(ErrorKind::LengthMismatch, "feature and label counts differ");
  }
  std::vector<std::vector<double>> xs;
  std::vector<double> ys;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != clf.dim()) {
      throw Error(ErrorKind::LengthMismatch, "feature length differs from the classifier");
    }
    xs.push_back(augmented(clf, features[i]));
    ys.push_back(labels[i] == 1 ? 1.0 : -1.0);
  }
  std::vector<double> w = clf.w;
  w.push_back(clf.b);
  return objective(w, clf.lambda, xs, ys);
}

AsmModel asm_fit(const std::vector<MaskVolume>& masks, std::size_t k) {
  if (masks.size() < 2) throw Error(ErrorKind::TooFewSamples, "ASM needs at least two masks");
  const Dims dims = masks.front().dims();
  for (const auto& m : masks) {
    if (!(m.dims() == dims)) throw Error(ErrorKind::DimMismatch, "ASM masks differ in dims");
  }
  const std::size_t n = masks.size();
  const std::size_t d = dims.count();
  if (k < 1 || k > std::min(n - 1, d)) {
    throw Error(ErrorKind::InvalidK, "K = " + std::to_string(k) + " must lie in [1, " +
                                         std::to_string(std::min(n - 1, d)) + "]");
  }

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  parallel_for(n, [&](std::size_t i) {
    const ScalarField sdf = signed_distance(masks[i]);
    std::copy(sdf.data().begin(), sdf.data().end(), x.row(static_cast<Eigen::Index>(i)).data());
  });
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const double raw_energy = x.squaredNorm() / double(n);
  x.rowwise() -= mean;

  // Gram trick: eigenvectors of X X^T map to principal directions X^T v / sqrt(ev).
  const Eigen::MatrixXd gram = x * x.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const Eigen::VectorXd ev = eig.eigenvalues();
  // Identical masks leave only centering round-off, so the floor is tied to the raw SDF scale.
  const double top = std::max(ev.maxCoeff(), raw_energy);
  const double tol = top * double(n) * 1e-12;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) rank += ev[i] > tol ? 1 : 0;
  if (k > rank) {
    throw Error(ErrorKind::RankDeficient, "K = " + std::to_string(k) +
                                              " exceeds the numerical rank " +
                                              std::to_string(rank) + " of the centered SDFs");
  }

  AsmModel model;
  model.dims = dims;
  model.k = k;
  model.mean_sdf.assign(mean.data(), mean.data() + d);
  model.components.resize(k * d);
  model.explained_variance.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index col = ev.size() - 1 - static_cast<Eigen::Index>(c);
    Eigen::VectorXd dir = x.transpose() * eig.eigenvectors().col(col);
    dir /= dir.norm();
    // Deterministic sign: largest-magnitude loading positive.
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir[arg] < 0) dir = -dir;
    std::copy(dir.data(), dir.data() + d, model.components.begin() + static_cast<long>(c * d));
    model.explained_variance[c] = ev[col] / double(n - 1);
  }
  model.train_scores.resize(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0;
      const double* comp = model.components.data() + c * d;
      const double* row = x.row(static_cast<Eigen::Index>(i)).data();
      for (std::size_t j = 0; j < d; ++j) s += comp[j] * row[j];
      model.train_scores[i * k + c] = s;
    }
  }
  return model;
}

Latent asm_project_sdf(const AsmModel& model, std::span<const double> sdf) {
  if (sdf.size() != model.d()) throw Error(ErrorKind::DimMismatch, "SDF size differs from the ASM");
  Latent out(model.k, 0.0);
  for (std::size_t c = 0; c < model.k; ++c) {
    const double* comp = model.components.data() + c * model.d();
    double s = 0;
    for (std::size_t j = 0; j < sdf.size(); ++j) s += comp[j] * (sdf[j] - model.mean_sdf[j]);
    out[c] = s;
  }
  return out;
}

Latent asm_project(const AsmModel& model, const MaskVolume& mask) {
  if (!(mask.dims() == model.dims)) throw Error(ErrorKind::DimMismatch, "mask dims differ from the ASM");
  return asm_project_sdf(model, signed_distance(mask).data());
}

namespace {

NamedTensor tensor(std::string name, std::span<const double> v) {
  return {std::move(name), {static_cast<int>(std::max<std::size_t>(v.size(), 1))},
          v.empty() ? std::vector<float>{0.0f} : std::vector<float>(v.begin(), v.end())};
}

NamedTensor scalar(std::string name, double v) { return {std::move(name), {1}, {float(v)}}; }

std::vector<double> values(const std::vector<NamedTensor>& ts, const std::string& name) {
  const NamedTensor& t = find_tensor(ts, name);
  return {t.data.begin(), t.data.end()};
}

}  // namespace

std::vector<NamedTensor> to_tensors(const CohortStats& stats) {
  return {tensor("normative.z_bar", stats.z_bar), scalar("normative.n", double(stats.n)),
          scalar("normative.mean_volume_mm3", stats.mean_volume_mm3),
          scalar("normative.score_threshold", stats.score_threshold)};
}

CohortStats cohort_stats_from_tensors(const std::vector<NamedTensor>& ts) {
  CohortStats s;
  s.z_bar = values(ts, "normative.z_bar");
  s.n = static_cast<std::size_t>(values(ts, "normative.n")[0]);
  s.mean_volume_mm3 = values(ts, "normative.mean_volume_mm3")[0];
  s.score_threshold = values(ts, "normative.score_threshold")[0];
  return s;
}

std::vector<NamedTensor> to_tensors(const LinearClassifier& clf) {
  return {tensor("svm.w", clf.w), scalar("svm.b", clf.b), scalar("svm.lambda", clf.lambda),
          tensor("svm.mean", clf.mean), tensor("svm.scale", clf.scale)};
}

LinearClassifier classifier_from_tensors(const std::vector<NamedTensor>& ts) {
  LinearClassifier clf;
  clf.w = values(ts, "svm.w");
  clf.b = values(ts, "svm.b")[0];
  clf.lambda = values(ts, "svm.lambda")[0];
  clf.mean = values(ts, "svm.mean");
  clf.scale = values(ts, "svm.scale");
  if (clf.mean.size() != clf.w.size() || clf.scale.size() != clf.w.size()) {
    throw Error(ErrorKind::ShapeMismatch, "classifier tensors differ in length");
  }
  return clf;
}

std::vector<NamedTensor> to_tensors(const AsmModel& m) {
  const std::vector<double> dims{double(m.dims.nx), double(m.dims.ny), double(m.dims.nz)};
  std::vector<NamedTensor> out{tensor("asm.dims", dims), tensor("asm.mean_sdf", m.mean_sdf),
                               tensor("asm.explained_variance", m.explained_variance)};
  NamedTensor comps{"asm.components", {static_cast<int>(m.k), static_cast<int>(m.d())},
                    std::vector<float>(m.components.begin(), m.components.end())};
  out.push_back(std::move(comps));
  const std::size_t n = m.k ? m.train_scores.size() / m.k : 0;
  out.push_back({"asm.train_scores", {static_cast<int>(n), static_cast<int>(m.k)},
                 std::vector<float>(m.train_scores.begin(), m.train_scores.end())});
  return out;
}

AsmModel asm_from_tensors(const std::vector<NamedTensor>& ts) {
  AsmModel m;
  const auto dims = values(ts, "asm.dims");
  m.dims = {static_cast<int>(dims.at(0)), static_cast<int>(dims.at(1)), static_cast<int>(dims.at(2))};
  m.mean_sdf = values(ts, "asm.mean_sdf");
  m.explained_variance = values(ts, "asm.explained_variance");
  const NamedTensor& comps = find_tensor(ts, "asm.components");
  m.k = static_cast<std::size_t>(comps.shape.at(0));
  m.components.assign(comps.data.begin(), comps.data.end());
  m.train_scores = values(ts, "asm.train_scores");
  if (m.mean_sdf.size() != m.dims.count() || m.components.size() != m.k * m.d()) {
    throw Error(ErrorKind::ShapeMismatch, "ASM tensors are inconsistent");
  }
  return m;
}

}  // namespace normshape
