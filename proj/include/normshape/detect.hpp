#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "normshape/checkpoint.hpp"
#include "normshape/volume.hpp"

namespace normshape {

using Latent = std::vector<double>;

/// Healthy-cohort summary used for zero-shot scoring.
struct CohortStats {
  Latent z_bar;
  std::size_t n = 0;
  double mean_volume_mm3 = std::numeric_limits<double>::quiet_NaN();
  /// 95th percentile of the training zero-shot scores; used to turn scores
  /// into hard predictions for balanced accuracy.
  double score_threshold = std::numeric_limits<double>::quiet_NaN();
};

/// Mean of the healthy latents. `volumes_mm3`, when non-empty, must match
/// `latents` in length and fills mean_volume_mm3.
CohortStats fit_normative(const std::vector<Latent>& latents,
                          std::span<const double> volumes_mm3 = {});

/// ||latent - z_bar||_2.
double zero_shot_score(std::span<const double> latent, const CohortStats& stats);

/// |volume(mask) - mean healthy volume|.
double volume_baseline_score(const MaskVolume& mask, const CohortStats& stats);

struct SvmParams {
  double lambda = 0.01;
  int epochs = 200;
  std::uint64_t seed = 0;
  /// If set, receives the primal objective of the averaged iterate after each epoch.
  std::vector<double>* objective_trace = nullptr;
};

/// Linear classifier on standardized features. decision = w . (x - mean) / scale + b.
struct LinearClassifier {
  std::vector<double> w;
  double b = 0;
  double lambda = 0.01;
  std::vector<double> mean;
  std::vector<double> scale;

  std::size_t dim() const { return w.size(); }
};

/// Pegasos projected subgradient on lambda/2 ||(w, b)||^2 + mean hinge loss.
/// Labels are 0/1; the returned weights are the average of all iterates.
LinearClassifier fit_linear_svm(const std::vector<Latent>& features, std::span<const int> labels,
                                const SvmParams& params);

double svm_decision(const LinearClassifier& clf, std::span<const double> feature);

/// lambda/2 ||(w, b)||^2 + mean hinge loss, in standardized feature space.
double svm_objective(const LinearClassifier& clf, const std::vector<Latent>& features,
                     std::span<const int> labels);

/// PCA shape model over signed distance maps.
struct AsmModel {
  Dims dims;
  std::vector<double> mean_sdf;
  std::size_t k = 0;
  /// k x d, row-major, orthonormal rows sorted by explained variance.
  std::vector<double> components;
  std::vector<double> explained_variance;
  /// Projections of the training masks, n x k row-major.
  std::vector<double> train_scores;

  std::size_t d() const { return mean_sdf.size(); }
};

AsmModel asm_fit(const std::vector<MaskVolume>& masks, std::size_t k);
Latent asm_project(const AsmModel& model, const MaskVolume& mask);
/// Projection of a flattened signed distance field.
Latent asm_project_sdf(const AsmModel& model, std::span<const double> sdf);

std::vector<NamedTensor> to_tensors(const CohortStats& stats);
CohortStats cohort_stats_from_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> to_tensors(const LinearClassifier& clf);
LinearClassifier classifier_from_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> to_tensors(const AsmModel& model);
AsmModel asm_from_tensors(const std::vector<NamedTensor>& tensors);

}  // namespace normshape
