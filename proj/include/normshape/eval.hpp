#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "normshape/detect.hpp"
#include "normshape/vae.hpp"

namespace normshape {

/// Mann-Whitney AUC with half credit for ties. Labels are 0/1, 1 = abnormal.
double auc(std::span<const double> scores, std::span<const int> labels);

double balanced_accuracy(std::span<const int> predictions, std::span<const int> labels);

using MetricFn = std::function<double(std::span<const double>, std::span<const int>)>;

struct BootstrapResult {
  double mean = 0;
  double sd = 0;  ///< sample sd of the bootstrap distribution
};

/// Resamples (score, label) pairs with replacement. Resamples with a single
/// class are redrawn (at most 100 times per repetition).
BootstrapResult bootstrap(const MetricFn& metric, std::span<const double> scores,
                          std::span<const int> labels, int reps, std::uint64_t seed);

struct EvalReport {
  std::string method;
  double auc = 0;     ///< on the full score set
  double balacc = 0;  ///< on the full score set
  double auc_mean = 0, auc_sd = 0;
  double balacc_mean = 0, balacc_sd = 0;
  int n_boot = 0;
  double threshold = 0;  ///< scores above it are predicted abnormal
  std::vector<double> scores;
  std::vector<int> labels;
};

EvalReport make_report(std::string method, std::vector<double> scores, std::vector<int> labels,
                       double threshold, int reps, std::uint64_t seed);

struct FoldPlan {
  int k = 0;
  bool leave_one_out = false;
  std::vector<int> assignment;  ///< fold index per sample
};

/// k == n gives leave-one-out.
FoldPlan stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed);

/// Fold count whose train/test ratio 1 / (k - 1) is closest to `ratio`.
int folds_for_ratio(double ratio);

/// k-fold: each fold trains once and the remaining folds are tested; all test
/// decisions are pooled. Leave-one-out trains on n - 1 and tests the left-out sample.
EvalReport crossval_fewshot(const std::vector<Latent>& latents, std::span<const int> labels,
                            const FoldPlan& plan, const SvmParams& svm, int reps,
                            std::uint64_t seed, std::string method = "fewshot");

/// Projection onto the top two principal directions of the centered latents.
/// Each direction is signed so that its first nonzero loading is positive.
std::vector<std::array<double, 2>> pca_2d(const std::vector<Latent>& latents);

struct Interpolation {
  Latent z_normal;
  Latent z_abnormal;
  std::vector<double> ts;
  std::vector<MaskVolume> masks;
};

/// Decodes (1 - t) z_normal + t z_abnormal for each t, where the endpoints are
/// group means, and binarizes at 0.5.
Interpolation interpolate_groups(const Vae& model, const std::vector<Latent>& latents_normal,
                                 const std::vector<Latent>& latents_abnormal,
                                 std::span<const double> ts);

std::vector<double> default_interpolation_ts();

/// Binary P5 image of the middle z slice (foreground 255).
std::string mid_slice_pgm(const MaskVolume& mask);
void save_pgm(const MaskVolume& mask, const std::string& path);
/// "interp_t<value>.pgm" with the shortest round-trip spelling of t.
std::string interpolation_filename(double t);

void write_report_csv(const std::string& path, const std::vector<EvalReport>& reports);
void write_scores_csv(const std::string& path, const std::vector<std::string>& ids,
                      std::span<const int> labels, std::span<const double> scores,
                      const std::string& method);
void write_pca_csv(const std::string& path, const std::vector<std::string>& ids,
                   std::span<const int> labels, const std::vector<std::array<double, 2>>& coords);

struct ScoreTable {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> scores;
  std::vector<std::string> methods;
};

/// Reads a CSV with header id,label,score[,method].
ScoreTable read_scores_csv(const std::string& path);

}  // namespace normshape
