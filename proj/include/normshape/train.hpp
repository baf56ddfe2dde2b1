#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "normshape/augment.hpp"
#include "normshape/sgd.hpp"
#include "normshape/vae.hpp"

namespace normshape {

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;  ///< mean per-sample loss at the KL weights used
  double val_loss = 0;    ///< mean per-sample loss at KL weight 1
  double val_dice = 0;
  double lr = 0;          ///< learning rate of the epoch's last step
  double grad_norm = 0;   ///< mean pre-clipping gradient norm over the epoch's steps
};

struct TrainOptions {
  int epochs = 200;
  int batch_size = 8;
  int accumulation_steps = 5;
  double val_fraction = 0.2;
  bool augment = true;
  AugmentRanges aug{};
  /// lr0, power and momentum are used; total_steps is derived from the epoch count.
  nn::SgdSchedule sgd{};
  /// Global L2 norm cap applied to the averaged gradient before each step (0: off).
  double grad_clip_norm = 1000.0;
  /// Initialise the output bias to the logit of the mean training foreground fraction.
  bool init_output_prior = true;
  std::uint64_t seed = 0;
  /// Where to dump parameters if a non-finite loss aborts training (empty: no dump).
  std::string dump_path;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
};

struct TrainSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Splits indices so that each volume quartile contributes round-robin-fair
/// shares to validation (largest remainder across quartiles).
TrainSplit split_by_volume_quartile(const std::vector<MaskVolume>& cohort, double val_fraction,
                                    std::uint64_t seed);

/// Quartile (0..3) of each cohort member by volume rank.
std::vector<int> volume_quartiles(const std::vector<MaskVolume>& cohort);

/// KL weight ramp: step / warmup, capped at 1; warmup <= 0 means 1.
double kl_weight_at(long step, long warmup_steps);

struct TrainResult {
  Vae model;
  TrainingHistory history;
  TrainSplit split;
};

/// Trains a VAE and returns the parameters with the best validation loss.
TrainResult train(const std::vector<MaskVolume>& cohort, const VaeConfig& config,
                  const TrainOptions& options);

/// Mean Dice between masks and the binarized decodings of their posterior means.
double reconstruction_dice(const Vae& model, const std::vector<MaskVolume>& masks);

void write_history_csv(const std::string& path, const TrainingHistory& history);

}  // namespace normshape
