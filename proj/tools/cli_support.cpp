#include "cli_support.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "normshape/error.hpp"
#include "normshape/random.hpp"
#include "normshape/version.hpp"

namespace normshape::cli {

Config::Config() {
  const VaeConfig vc;
  const TrainOptions to;
  const AbnormalityParams ab;
  const SvmParams svm;
  values_ = Json{
      {"seed", 0},
      {"data.grid", {vc.input_dims.nx, vc.input_dims.ny, vc.input_dims.nz}},
      {"data.spacing", {vc.input_spacing.sx, vc.input_spacing.sy, vc.input_spacing.sz}},
      {"data.val_fraction", to.val_fraction},
      {"model.stages", vc.stages},
      {"model.channels", vc.channels},
      {"model.latent_dim", vc.latent_dim},
      {"model.kl_warmup_steps", vc.kl_warmup_steps},
      {"model.prob_clamp_eps", vc.prob_clamp_eps},
      {"sgd.lr0", to.sgd.lr0},
      {"sgd.power", to.sgd.power},
      {"sgd.momentum", to.sgd.momentum},
      {"sgd.grad_clip_norm", to.grad_clip_norm},
      {"sgd.epochs", to.epochs},
      {"sgd.batch_size", to.batch_size},
      {"sgd.accumulation_steps", to.accumulation_steps},
      {"aug.enabled", to.augment},
      {"aug.translation", to.aug.max_translation_voxels},
      {"aug.rotation_deg", to.aug.max_rotation_deg},
      {"aug.scale", to.aug.scale_range},
      {"synth.n_healthy", 200},
      {"synth.n_abnormal", 0},
      {"synth.shrink_center_t", ab.shrink_center_t},
      {"synth.shrink_width", ab.shrink_width},
      {"synth.shrink_factor", ab.shrink_factor},
      {"synth.volume_preserving", ab.volume_preserving},
      {"synth.paired", false},
      {"svm.lambda", svm.lambda},
      {"svm.epochs", svm.epochs},
      {"asm.k", 16},
      {"eval.n_boot", 10000},
      {"eval.ratios", {0.05, 0.1, 0.25}},
      {"eval.interp_ts", default_interpolation_ts()},
  };
}

void Config::set(const std::string& key, Json value) {
  if (!values_.contains(key)) throw Error(ErrorKind::InvalidArgument, "unknown config key '" + key + "'");
  const Json& old = values_[key];
  const bool ok = old.type() == value.type() || (old.is_number() && value.is_number());
  if (!ok) {
    throw Error(ErrorKind::InvalidArgument,
                "config key '" + key + "' expects " + std::string(old.type_name()) + ", got " +
                    std::string(value.type_name()));
  }
  values_[key] = std::move(value);
}

void Config::merge_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(f);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::MalformedHeader, "config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::MalformedHeader, "config must be a JSON object");
  for (auto& [k, v] : j.items()) set(k, v);
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::InvalidArgument, "--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  set(key, std::move(value));
}

std::string Config::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : values_.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream ss;
  ss << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << h;
  return ss.str();
}

VaeConfig Config::vae() const {
  VaeConfig c;
  const auto g = get<std::vector<int>>("data.grid");
  const auto s = get<std::vector<double>>("data.spacing");
  if (g.size() != 3 || s.size() != 3) {
    throw Error(ErrorKind::InvalidArgument, "data.grid and data.spacing need three values");
  }
  c.input_dims = {g[0], g[1], g[2]};
  c.input_spacing = {s[0], s[1], s[2]};
  c.stages = get<int>("model.stages");
  c.channels = get<std::vector<int>>("model.channels");
  c.latent_dim = get<int>("model.latent_dim");
  c.kl_warmup_steps = get<long>("model.kl_warmup_steps");
  c.prob_clamp_eps = get<double>("model.prob_clamp_eps");
  c.validate();
  return c;
}

TrainOptions Config::train_options() const {
  TrainOptions o;
  o.epochs = get<int>("sgd.epochs");
  o.batch_size = get<int>("sgd.batch_size");
  o.accumulation_steps = get<int>("sgd.accumulation_steps");
  o.val_fraction = get<double>("data.val_fraction");
  o.sgd.lr0 = get<double>("sgd.lr0");
  o.sgd.power = get<double>("sgd.power");
  o.sgd.momentum = get<double>("sgd.momentum");
  o.grad_clip_norm = get<double>("sgd.grad_clip_norm");
  o.augment = get<bool>("aug.enabled");
  const auto t = get<std::vector<double>>("aug.translation");
  const auto r = get<std::vector<double>>("aug.rotation_deg");
  const auto sc = get<std::vector<double>>("aug.scale");
  if (t.size() != 3 || r.size() != 3 || sc.size() != 2) {
    throw Error(ErrorKind::InvalidArgument, "aug ranges need 3, 3 and 2 values");
  }
  o.aug.max_translation_voxels = {t[0], t[1], t[2]};
  o.aug.max_rotation_deg = {r[0], r[1], r[2]};
  o.aug.scale_range = {sc[0], sc[1]};
  o.seed = derive_seed(seed(), "train");
  return o;
}

ShapeGenParams Config::shape_params() const {
  const VaeConfig c = vae();
  return shape_params_for_grid(c.input_dims, c.input_spacing);
}

AbnormalityParams Config::abnormality() const {
  AbnormalityParams ab;
  ab.shrink_center_t = get<double>("synth.shrink_center_t");
  ab.shrink_width = get<double>("synth.shrink_width");
  ab.shrink_factor = get<double>("synth.shrink_factor");
  ab.volume_preserving = get<bool>("synth.volume_preserving");
  ab.validate();
  return ab;
}

SvmParams Config::svm() const {
  SvmParams p;
  p.lambda = get<double>("svm.lambda");
  p.epochs = get<int>("svm.epochs");
  p.seed = derive_seed(seed(), "svm");
  return p;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  if (!line.empty() && line.back() == ',') cols.emplace_back();
  return cols;
}

template <typename T>
T parse_number(const std::string& s, const fs::path& file, int row) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::MalformedHeader,
                file.string() + ":" + std::to_string(row) + ": bad number '" + s + "'");
  }
  return v;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open " + p.string() + " for writing");
  return f;
}

}  // namespace

std::vector<CohortEntry> read_cohort(const fs::path& csv) {
  std::ifstream f(csv);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open cohort " + csv.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("id,label,path", 0) != 0) {
    throw Error(ErrorKind::MalformedHeader, csv.string() + ": expected header id,label,path");
  }
  std::vector<CohortEntry> out;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    if (cols.size() < 3) {
      throw Error(ErrorKind::MalformedHeader, csv.string() + ":" + std::to_string(row) + ": need 3 columns");
    }
    const int label = parse_number<int>(cols[1], csv, row);
    if (label != 0 && label != 1) {
      throw Error(ErrorKind::MalformedHeader, csv.string() + ":" + std::to_string(row) + ": label must be 0 or 1");
    }
    fs::path p = cols[2];
    if (p.is_relative()) p = csv.parent_path() / p;
    out.push_back({cols[0], label, p});
  }
  if (out.empty()) throw Error(ErrorKind::EmptyCohort, csv.string() + " lists no masks");
  return out;
}

void write_cohort(const fs::path& csv, const std::vector<CohortEntry>& entries) {
  auto f = open_out(csv);
  f << "id,label,path\n";
  for (const auto& e : entries) {
    f << e.id << ',' << e.label << ',' << fs::relative(e.path, csv.parent_path()).generic_string()
      << '\n';
  }
  if (!f) throw Error(ErrorKind::IoFailure, "failed writing " + csv.string());
}

std::vector<MaskVolume> load_masks(const std::vector<CohortEntry>& entries) {
  std::vector<MaskVolume> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(load_mask(e.path));
  return out;
}

void write_latents(const fs::path& csv, const LatentTable& t) {
  auto f = open_out(csv);
  f.precision(17);
  const std::size_t dim = t.latents.empty() ? 0 : t.latents.front().size();
  f << "id,label";
  for (std::size_t j = 0; j < dim; ++j) f << ",z" << j;
  f << '\n';
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    f << t.ids[i] << ',' << t.labels[i];
    for (double v : t.latents[i]) f << ',' << v;
    f << '\n';
  }
  if (!f) throw Error(ErrorKind::IoFailure, "failed writing " + csv.string());
}

LatentTable read_latents(const fs::path& csv) {
  std::ifstream f(csv);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open latents " + csv.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("id,label,z0", 0) != 0) {
    throw Error(ErrorKind::MalformedHeader, csv.string() + ": expected header id,label,z0,...");
  }
  const std::size_t dim = split_csv(line).size() - 2;
  LatentTable t;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    if (cols.size() != dim + 2) {
      throw Error(ErrorKind::LengthMismatch, csv.string() + ":" + std::to_string(row) + ": expected " +
                                                 std::to_string(dim + 2) + " columns");
    }
    t.ids.push_back(cols[0]);
    t.labels.push_back(parse_number<int>(cols[1], csv, row));
    Latent z(dim);
    for (std::size_t j = 0; j < dim; ++j) z[j] = parse_number<double>(cols[j + 2], csv, row);
    t.latents.push_back(std::move(z));
  }
  return t;
}

void save_model(const Vae& model, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(model.to_tensors(), dir / "model.nsckpt");
  const VaeConfig& c = model.config();
  const Json j{{"data.grid", {c.input_dims.nx, c.input_dims.ny, c.input_dims.nz}},
               {"data.spacing", {c.input_spacing.sx, c.input_spacing.sy, c.input_spacing.sz}},
               {"model.stages", c.stages},
               {"model.channels", c.channels},
               {"model.latent_dim", c.latent_dim},
               {"model.kl_warmup_steps", c.kl_warmup_steps},
               {"model.prob_clamp_eps", c.prob_clamp_eps}};
  auto f = open_out(dir / "model.json");
  f << j.dump(2) << '\n';
}

Vae load_model(const fs::path& dir) {
  Config cfg;
  cfg.merge_file(dir / "model.json");
  return Vae::from_tensors(cfg.vae(), load_checkpoint(dir / "model.nsckpt"));
}

void write_manifest(const fs::path& out_dir, const std::string& command, const Config& config,
                    const std::vector<std::string>& artifacts) {
  const Json j{{"command", command},
               {"version", kVersion},
               {"seed", config.seed()},
               {"config_hash", config.hash()},
               {"config", config.json()},
               {"artifacts", artifacts}};
  auto f = open_out(out_dir / "manifest.json");
  f << j.dump(2) << '\n';
}

}  // namespace normshape::cli
