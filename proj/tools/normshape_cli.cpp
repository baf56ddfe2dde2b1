#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

#include "cli_support.hpp"
#include "normshape/error.hpp"
#include "normshape/parallel.hpp"
#include "normshape/random.hpp"
#include "normshape/version.hpp"

using namespace normshape;
using namespace normshape::cli;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitBadInput = 3;
constexpr int kExitRuntime = 4;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config with flat dotted keys");
  cmd->add_option("--seed", c.seed, "Global seed");
  cmd->add_option("--threads", c.threads, "Worker cap (default: NORMSHAPE_THREADS or all cores)");
  cmd->add_option("--out-dir", c.out_dir, "Output directory");
  cmd->add_option("--set", c.overrides, "key=value config override (repeatable)");
}

Config resolve(const Common& c) {
  Config cfg;
  if (!c.config_path.empty()) cfg.merge_file(c.config_path);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.set_seed(*c.seed);
  unsigned threads = 0;
  if (c.threads) {
    threads = *c.threads;
  } else if (const char* env = std::getenv("NORMSHAPE_THREADS")) {
    threads = static_cast<unsigned>(std::strtoul(env, nullptr, 10));
  }
  set_thread_count(threads);
  fs::create_directories(c.out_dir);
  return cfg;
}

std::string member_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu", prefix, i);
  return buf;
}

int cmd_synth(const Common& c) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  fs::create_directories(out / "masks");
  const ShapeGenParams shape = cfg.shape_params();
  const auto n_h = cfg.get<std::size_t>("synth.n_healthy");
  const auto n_a = cfg.get<std::size_t>("synth.n_abnormal");
  const std::uint64_t healthy_seed = derive_seed(cfg.seed(), "healthy");
  const std::uint64_t abnormal_seed =
      cfg.get<bool>("synth.paired") ? healthy_seed : derive_seed(cfg.seed(), "abnormal");
  std::vector<CohortEntry> entries;
  std::ofstream listing(out / "synth_manifest.csv");
  listing << "filename,label,seed,volume_mm3\n";
  auto emit = [&](const std::vector<CohortMember>& members, const char* prefix, int label) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      const std::string id = member_id(prefix, i);
      const fs::path p = out / "masks" / (id + ".mvol");
      save_mask(members[i].mask, p);
      entries.push_back({id, label, fs::absolute(p)});
      listing << "masks/" << id << ".mvol," << label << ',' << members[i].seed << ','
              << volume_mm3(members[i].mask) << '\n';
    }
  };
  if (n_h > 0) emit(gen_cohort(n_h, shape, std::nullopt, healthy_seed), "healthy", 0);
  if (n_a > 0) emit(gen_cohort(n_a, shape, cfg.abnormality(), abnormal_seed), "abnormal", 1);
  listing.close();
  if (!listing) throw Error(ErrorKind::IoFailure, "failed writing synth_manifest.csv");
  write_cohort(out / "cohort.csv", entries);
  write_manifest(out, "synth", cfg, {"cohort.csv", "synth_manifest.csv", "masks/"});
  return 0;
}

int cmd_preprocess(const Common& c, const std::string& cohort_csv) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  fs::create_directories(out / "masks");
  const VaeConfig vc = cfg.vae();
  std::vector<CohortEntry> kept;
  std::ofstream excluded(out / "excluded.csv");
  excluded << "id,reason\n";
  for (const auto& e : read_cohort(cohort_csv)) {
    MaskVolume m = center_in_grid(resample(load_mask(e.path), vc.input_spacing), vc.input_dims);
    const int comps = connected_components(m);
    if (comps != 1) {
      excluded << e.id << ",components=" << comps << '\n';
      continue;
    }
    const fs::path p = out / "masks" / (e.id + ".mvol");
    save_mask(m, p);
    kept.push_back({e.id, e.label, fs::absolute(p)});
  }
  if (kept.empty()) throw Error(ErrorKind::EmptyCohort, "every mask failed the quality check");
  write_cohort(out / "cohort.csv", kept);
  write_manifest(out, "preprocess", cfg, {"cohort.csv", "excluded.csv", "masks/"});
  return 0;
}

int cmd_train(const Common& c, const std::string& cohort_csv) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  std::vector<MaskVolume> cohort;
  for (const auto& e : read_cohort(cohort_csv)) {
    if (e.label == 0) cohort.push_back(load_mask(e.path));
  }
  TrainOptions opts = cfg.train_options();
  opts.dump_path = (out / "nonfinite_dump.nsckpt").string();
  opts.on_epoch = [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %d train_loss %.4f val_loss %.4f val_dice %.4f lr %.3g\n",
                 r.epoch, r.train_loss, r.val_loss, r.val_dice, r.lr);
  };
  const TrainResult res = train(cohort, cfg.vae(), opts);
  save_model(res.model, out / "model");
  write_history_csv((out / "history.csv").string(), res.history);
  write_manifest(out, "train", cfg, {"model/model.nsckpt", "model/model.json", "history.csv"});
  return 0;
}

LatentTable encode_cohort(const Vae& model, const std::vector<CohortEntry>& entries,
                          const std::vector<MaskVolume>& masks) {
  LatentTable t;
  t.latents.resize(masks.size());
  parallel_for(masks.size(), [&](std::size_t i) { t.latents[i] = model.encode(masks[i]).mu; });
  for (const auto& e : entries) {
    t.ids.push_back(e.id);
    t.labels.push_back(e.label);
  }
  return t;
}

int cmd_score(const Common& c, const std::string& model_dir, const std::string& reference_csv,
              const std::string& cohort_csv, bool with_asm) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  const Vae model = load_model(model_dir);
  std::vector<CohortEntry> ref_entries;
  for (const auto& e : read_cohort(reference_csv)) {
    if (e.label == 0) ref_entries.push_back(e);
  }
  if (ref_entries.empty()) throw Error(ErrorKind::EmptyCohort, "reference cohort has no healthy masks");
  const auto ref_masks = load_masks(ref_entries);
  const auto test_entries = read_cohort(cohort_csv);
  const auto test_masks = load_masks(test_entries);

  const LatentTable ref = encode_cohort(model, ref_entries, ref_masks);
  std::vector<double> ref_vol;
  for (const auto& m : ref_masks) ref_vol.push_back(volume_mm3(m));
  const CohortStats stats = fit_normative(ref.latents, ref_vol);
  save_checkpoint(to_tensors(stats), out / "normative.nsckpt");

  const LatentTable test = encode_cohort(model, test_entries, test_masks);
  write_latents(out / "latents.csv", test);
  write_latents(out / "reference_latents.csv", ref);

  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> scores;
  std::vector<std::string> methods;
  auto add_rows = [&](const std::string& method, const std::vector<double>& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      ids.push_back(test.ids[i]);
      labels.push_back(test.labels[i]);
      scores.push_back(s[i]);
      methods.push_back(method);
    }
  };
  std::vector<double> vae_s, vol_s;
  for (std::size_t i = 0; i < test_masks.size(); ++i) {
    vae_s.push_back(zero_shot_score(test.latents[i], stats));
    vol_s.push_back(volume_baseline_score(test_masks[i], stats));
  }
  std::vector<double> vol_ref_scores;
  for (const auto& m : ref_masks) vol_ref_scores.push_back(volume_baseline_score(m, stats));
  std::sort(vol_ref_scores.begin(), vol_ref_scores.end());
  Json thresholds{{"vae_zeroshot", stats.score_threshold},
                  {"volume_zeroshot",
                   vol_ref_scores[static_cast<std::size_t>(0.95 * double(vol_ref_scores.size() - 1))]}};
  add_rows("vae_zeroshot", vae_s);
  add_rows("volume_zeroshot", vol_s);
  std::vector<std::string> artifacts{"normative.nsckpt", "latents.csv", "reference_latents.csv",
                                     "scores.csv", "thresholds.json"};

  if (with_asm) {
    const AsmModel asm_model = asm_fit(ref_masks, cfg.get<std::size_t>("asm.k"));
    save_checkpoint(to_tensors(asm_model), out / "asm.nsckpt");
    LatentTable asm_ref{ref.ids, ref.labels, {}}, asm_test{test.ids, test.labels, {}};
    asm_ref.latents.resize(ref_masks.size());
    asm_test.latents.resize(test_masks.size());
    parallel_for(ref_masks.size(), [&](std::size_t i) { asm_ref.latents[i] = asm_project(asm_model, ref_masks[i]); });
    parallel_for(test_masks.size(), [&](std::size_t i) { asm_test.latents[i] = asm_project(asm_model, test_masks[i]); });
    const CohortStats asm_stats = fit_normative(asm_ref.latents);
    std::vector<double> asm_s;
    for (const auto& z : asm_test.latents) asm_s.push_back(zero_shot_score(z, asm_stats));
    add_rows("asm_zeroshot", asm_s);
    thresholds["asm_zeroshot"] = asm_stats.score_threshold;
    write_latents(out / "asm_latents.csv", asm_test);
    artifacts.insert(artifacts.end(), {"asm.nsckpt", "asm_latents.csv"});
  }

  {
    std::ofstream f(out / "scores.csv");
    f.precision(10);
    f << "id,label,score,method\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
      f << ids[i] << ',' << labels[i] << ',' << scores[i] << ',' << methods[i] << '\n';
    }
    if (!f) throw Error(ErrorKind::IoFailure, "failed writing scores.csv");
  }
  std::ofstream(out / "thresholds.json") << thresholds.dump(2) << '\n';
  write_manifest(out, "score", cfg, artifacts);
  return 0;
}

int cmd_fewshot(const Common& c, const std::string& latents_csv, const std::string& method) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  const LatentTable t = read_latents(latents_csv);
  const SvmParams svm = cfg.svm();
  const int reps = cfg.get<int>("eval.n_boot");
  std::vector<EvalReport> reports;
  const int n_pos = static_cast<int>(std::count(t.labels.begin(), t.labels.end(), 1));
  const int minority = std::min(n_pos, static_cast<int>(t.labels.size()) - n_pos);
  for (double ratio : cfg.get<std::vector<double>>("eval.ratios")) {
    // A training fold must hold both classes.
    int k = folds_for_ratio(ratio);
    if (k > minority) {
      std::fprintf(stderr, "ratio %g: %d folds capped at %d (minority class size)\n", ratio, k,
                   minority);
      k = std::max(2, minority);
    }
    const FoldPlan plan = stratified_kfold(t.labels, k, derive_seed(cfg.seed(), "folds"));
    char name[64];
    std::snprintf(name, sizeof name, "%s_fewshot_ratio%g", method.c_str(), ratio);
    reports.push_back(crossval_fewshot(t.latents, t.labels, plan, svm, reps,
                                       derive_seed(cfg.seed(), "boot"), name));
  }
  const FoldPlan loo = stratified_kfold(t.labels, static_cast<int>(t.labels.size()), 0);
  reports.push_back(crossval_fewshot(t.latents, t.labels, loo, svm, reps,
                                     derive_seed(cfg.seed(), "boot"), method + "_fewshot_loo"));
  write_report_csv((out / "fewshot_report.csv").string(), reports);
  // LOO keeps sample order, so pooled decisions line up with the ids.
  write_scores_csv((out / "fewshot_scores.csv").string(), t.ids, reports.back().labels,
                   reports.back().scores, reports.back().method);
  write_manifest(out, "fewshot", cfg, {"fewshot_report.csv", "fewshot_scores.csv"});
  return 0;
}

int cmd_project(const Common& c, const std::string& latents_csv) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  const LatentTable t = read_latents(latents_csv);
  write_pca_csv((out / "pca.csv").string(), t.ids, t.labels, pca_2d(t.latents));
  write_manifest(out, "project", cfg, {"pca.csv"});
  return 0;
}

int cmd_interp(const Common& c, const std::string& model_dir, const std::string& latents_csv) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  const Vae model = load_model(model_dir);
  const LatentTable t = read_latents(latents_csv);
  std::vector<Latent> normal, abnormal;
  for (std::size_t i = 0; i < t.latents.size(); ++i) {
    (t.labels[i] == 0 ? normal : abnormal).push_back(t.latents[i]);
  }
  const auto ts = cfg.get<std::vector<double>>("eval.interp_ts");
  const Interpolation res = interpolate_groups(model, normal, abnormal, ts);
  fs::create_directories(out / "interp");
  std::ofstream f(out / "interp.csv");
  f.precision(10);
  f << "t,volume_mm3,file\n";
  std::vector<std::string> artifacts{"interp.csv"};
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const std::string name = interpolation_filename(ts[i]);
    save_pgm(res.masks[i], (out / "interp" / name).string());
    f << ts[i] << ',' << volume_mm3(res.masks[i]) << ",interp/" << name << '\n';
    artifacts.push_back("interp/" + name);
  }
  write_manifest(out, "interp", cfg, artifacts);
  return 0;
}

int cmd_eval(const Common& c, const std::string& scores_csv, const std::string& thresholds_json) {
  const Config cfg = resolve(c);
  const fs::path out = c.out_dir;
  const ScoreTable t = read_scores_csv(scores_csv);
  Json thresholds = Json::object();
  if (!thresholds_json.empty()) {
    std::ifstream f(thresholds_json);
    if (!f) throw Error(ErrorKind::IoFailure, "cannot open " + thresholds_json);
    thresholds = Json::parse(f, nullptr, false);
    if (!thresholds.is_object()) throw Error(ErrorKind::MalformedHeader, thresholds_json + " is not a JSON object");
  }
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> groups;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    const std::string m = t.methods[i].empty() ? "scores" : t.methods[i];
    if (!groups.contains(m)) order.push_back(m);
    groups[m].first.push_back(t.scores[i]);
    groups[m].second.push_back(t.labels[i]);
  }
  if (order.empty()) throw Error(ErrorKind::EmptyCohort, scores_csv + " has no rows");
  std::vector<EvalReport> reports;
  for (const auto& m : order) {
    auto& [s, l] = groups[m];
    const double thr = thresholds.contains(m) ? thresholds[m].get<double>() : 0.0;
    try {
      reports.push_back(make_report(m, s, l, thr, cfg.get<int>("eval.n_boot"),
                                    derive_seed(cfg.seed(), "boot")));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::SingleClass) throw;
      throw Error(ErrorKind::SingleClass, "method " + m + ": " + e.what());
    }
  }
  write_report_csv((out / "report.csv").string(), reports);
  write_manifest(out, "eval", cfg, {"report.csv"});
  return 0;
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::VolumeMatchFailed:
    case ErrorKind::GenerationExhausted:
    case ErrorKind::ResampleExhausted:
    case ErrorKind::StepOverflow:
    case ErrorKind::RankDeficient:
      return kExitRuntime;
    default:
      return kExitBadInput;
  }
}

std::string json_escape(const std::string& s) { return Json(s).dump(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normative 3D shape modelling and anomaly detection"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common common;
  std::string cohort, model_dir, reference, latents, method = "vae", scores, thresholds;
  bool with_asm = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  add_common(synth, common);
  auto* pre = app.add_subcommand("preprocess", "Resample, center and quality-check masks");
  add_common(pre, common);
  pre->add_option("--cohort", cohort, "Cohort CSV (id,label,path)")->required();
  auto* tr = app.add_subcommand("train", "Train the VAE on the healthy masks of a cohort");
  add_common(tr, common);
  tr->add_option("--cohort", cohort, "Cohort CSV")->required();
  auto* sc = app.add_subcommand("score", "Zero-shot scores against a healthy reference cohort");
  add_common(sc, common);
  sc->add_option("--model", model_dir, "Model directory")->required();
  sc->add_option("--reference", reference, "Healthy reference cohort CSV")->required();
  sc->add_option("--cohort", cohort, "Test cohort CSV")->required();
  sc->add_flag("--asm", with_asm, "Also fit and score the SDF PCA baseline");
  auto* fs_cmd = app.add_subcommand("fewshot", "Cross-validated linear SVM on latents");
  add_common(fs_cmd, common);
  fs_cmd->add_option("--latents", latents, "Latents CSV (id,label,z0,...)")->required();
  fs_cmd->add_option("--method", method, "Method label for report rows");
  auto* pr = app.add_subcommand("project", "2D PCA of latents");
  add_common(pr, common);
  pr->add_option("--latents", latents, "Latents CSV")->required();
  auto* ip = app.add_subcommand("interp", "Decode the healthy-to-abnormal latent line");
  add_common(ip, common);
  ip->add_option("--model", model_dir, "Model directory")->required();
  ip->add_option("--latents", latents, "Latents CSV with both labels")->required();
  auto* ev = app.add_subcommand("eval", "AUC and balanced accuracy with bootstrap");
  add_common(ev, common);
  ev->add_option("--scores", scores, "Scores CSV (id,label,score[,method])")->required();
  ev->add_option("--thresholds", thresholds, "JSON map method -> decision threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(common);
    if (*pre) return cmd_preprocess(common, cohort);
    if (*tr) return cmd_train(common, cohort);
    if (*sc) return cmd_score(common, model_dir, reference, cohort, with_asm);
    if (*fs_cmd) return cmd_fewshot(common, latents, method);
    if (*pr) return cmd_project(common, latents);
    if (*ip) return cmd_interp(common, model_dir, latents);
    if (*ev) return cmd_eval(common, scores, thresholds);
  } catch (const Error& e) {
    const int rc = exit_code_for(e.kind());
    std::cerr << "{\"error\":\"" << (rc == kExitRuntime ? "RuntimeFailure" : "BadInput")
              << "\",\"kind\":" << json_escape(std::string(to_string(e.kind())))
              << ",\"message\":" << json_escape(e.what()) << "}\n";
    return rc;
  } catch (const std::exception& e) {
    std::cerr << "{\"error\":\"RuntimeFailure\",\"message\":" << json_escape(e.what()) << "}\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
