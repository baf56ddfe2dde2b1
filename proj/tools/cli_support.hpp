#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "normshape/augment.hpp"
#include "normshape/detect.hpp"
#include "normshape/eval.hpp"
#include "normshape/synth.hpp"
#include "normshape/train.hpp"
#include "normshape/vae.hpp"

namespace normshape::cli {

namespace fs = std::filesystem;
using Json = nlohmann::json;

/// Flat dotted-key configuration ("model.latent_dim": 32, ...).
class Config {
 public:
  Config();
  /// Merges a JSON object file over the defaults; unknown keys are rejected.
  void merge_file(const fs::path& path);
  /// "key=value"; value is parsed as JSON, falling back to a plain string.
  void apply_override(const std::string& assignment);

  const Json& json() const { return values_; }
  template <typename T>
  T get(const std::string& key) const {
    return values_.at(key).get<T>();
  }
  std::uint64_t seed() const { return values_.at("seed").get<std::uint64_t>(); }
  void set_seed(std::uint64_t seed) { values_["seed"] = seed; }
  /// FNV-1a over the canonical JSON dump.
  std::string hash() const;

  VaeConfig vae() const;
  TrainOptions train_options() const;
  ShapeGenParams shape_params() const;
  AbnormalityParams abnormality() const;
  SvmParams svm() const;

 private:
  void set(const std::string& key, Json value);
  Json values_;
};

struct CohortEntry {
  std::string id;
  int label = 0;
  fs::path path;  ///< absolute
};

/// CSV with header id,label,path; relative paths resolve against the CSV's directory.
std::vector<CohortEntry> read_cohort(const fs::path& csv);
void write_cohort(const fs::path& csv, const std::vector<CohortEntry>& entries);
std::vector<MaskVolume> load_masks(const std::vector<CohortEntry>& entries);

struct LatentTable {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<Latent> latents;
};
void write_latents(const fs::path& csv, const LatentTable& table);
LatentTable read_latents(const fs::path& csv);

void save_model(const Vae& model, const fs::path& dir);
Vae load_model(const fs::path& dir);

void write_manifest(const fs::path& out_dir, const std::string& command, const Config& config,
                    const std::vector<std::string>& artifacts);

}  // namespace normshape::cli
