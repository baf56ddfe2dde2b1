// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance <cache-dir> [criterion ...]
//
// Trained models are cached in <cache-dir> keyed by a hash of everything that
// determines them, so reruns skip training. The report CSV lands there too.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "normshape/checkpoint.hpp"
#include "normshape/detect.hpp"
#include "normshape/eval.hpp"
#include "normshape/random.hpp"
#include "normshape/synth.hpp"
#include "normshape/train.hpp"
#include "normshape/version.hpp"
#include "oracles.hpp"

using namespace normshape;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kGradRelTol = 1e-3;
constexpr double kKlRelTol = 0.01;
constexpr std::size_t kKlDraws = 1'000'000;
constexpr int kKlPosteriors = 50;
constexpr double kReconDiceMin = 0.80;
constexpr double kZeroShotAucMin = 0.75;
constexpr double kVolumeAucLo = 0.40;
constexpr double kVolumeAucHi = 0.60;
constexpr double kFewShotSlack = 0.02;
constexpr double kFewShotRatio = 0.1;
constexpr double kTrendSlack = 0.02;
constexpr int kBootReps = 10000;
constexpr double kBootTol = 0.005;
constexpr int kShiftVoxels = 2;
constexpr int kMaxVolumeViolations = 1;

// Cohort layout: disjoint seed ranges.
constexpr std::size_t kTrainPool = 200;
constexpr std::size_t kTestPerGroup = 40;
constexpr std::uint64_t kTrainSeed = 1000;
constexpr std::uint64_t kTestHealthySeed = 50000;
constexpr std::uint64_t kTestAbnormalSeed = 60000;
constexpr std::uint64_t kTestShrinkSeed = 70000;
constexpr std::uint64_t kModelSeed = 5;
constexpr std::size_t kAsmK = 16;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<MaskVolume> masks_of(std::vector<CohortMember> members) {
  std::vector<MaskVolume> out;
  for (auto& m : members) out.push_back(std::move(m.mask));
  return out;
}

// Lazily built data and models shared by the criteria.
class Fixture {
 public:
  explicit Fixture(fs::path cache) : cache_(std::move(cache)) { fs::create_directories(cache_); }

  const fs::path& cache() const { return cache_; }

  const std::vector<MaskVolume>& train_pool() {
    if (pool_.empty()) pool_ = masks_of(gen_cohort(kTrainPool, ShapeGenParams{}, std::nullopt, kTrainSeed));
    return pool_;
  }
  const std::vector<MaskVolume>& test_healthy() {
    if (healthy_.empty()) {
      healthy_ = masks_of(gen_cohort(kTestPerGroup, ShapeGenParams{}, std::nullopt, kTestHealthySeed));
    }
    return healthy_;
  }
  // Volume-preserving shrinkage with default parameters.
  const std::vector<MaskVolume>& test_abnormal() {
    if (abnormal_.empty()) {
      abnormal_ = masks_of(
          gen_cohort(kTestPerGroup, ShapeGenParams{}, AbnormalityParams{}, kTestAbnormalSeed));
    }
    return abnormal_;
  }
  // Plain shrinkage: same dip, no volume compensation.
  const std::vector<MaskVolume>& test_shrunk() {
    if (shrunk_.empty()) {
      AbnormalityParams ab;
      ab.volume_preserving = false;
      shrunk_ = masks_of(gen_cohort(kTestPerGroup, ShapeGenParams{}, ab, kTestShrinkSeed));
    }
    return shrunk_;
  }

  const Vae& model(std::size_t n_train) {
    auto it = models_.find(n_train);
    if (it != models_.end()) return it->second;
    const VaeConfig config;
    TrainOptions opts;
    opts.seed = kModelSeed;
    std::ostringstream key;
    key << kVersion << '|' << n_train << '|' << kTrainSeed << '|' << opts.seed << '|' << opts.epochs
        << '|' << opts.batch_size << '|' << opts.accumulation_steps << '|' << opts.sgd.lr0 << '|'
        << opts.grad_clip_norm << '|' << config.latent_dim << '|' << config.input_dims.nx << 'x'
        << config.input_dims.ny << 'x' << config.input_dims.nz;
    const fs::path path = cache_ / fmt("vae_n%zu_%016llx.nsckpt", n_train,
                                       (unsigned long long)derive_seed(0, key.str()));
    if (fs::exists(path)) {
      std::printf("  loading cached model %s\n", path.filename().c_str());
      return models_.emplace(n_train, Vae::from_tensors(config, load_checkpoint(path))).first->second;
    }
    const std::vector<MaskVolume> cohort(train_pool().begin(),
                                         train_pool().begin() + static_cast<long>(n_train));
    const auto t0 = std::chrono::steady_clock::now();
    opts.on_epoch = [&](const EpochRecord& r) {
      if (r.epoch % 20 == 19) {
        std::printf("  n=%zu epoch %d val_loss %.1f val_dice %.3f (%.0fs)\n", n_train, r.epoch,
                    r.val_loss, r.val_dice, seconds_since(t0));
        std::fflush(stdout);
      }
    };
    TrainResult res = train(cohort, config, opts);
    std::printf("  n=%zu trained in %.0fs, best epoch %d\n", n_train, seconds_since(t0),
                res.history.best_epoch);
    save_checkpoint(res.model.to_tensors(), path);
    return models_.emplace(n_train, std::move(res.model)).first->second;
  }

  std::vector<Latent> encode(const Vae& m, const std::vector<MaskVolume>& masks) {
    std::vector<Latent> out;
    for (const auto& x : masks) out.push_back(m.encode(x).mu);
    return out;
  }

  // Zero-shot scores of healthy (label 0) then volume-preserving abnormal (label 1) test masks.
  struct ZeroShot {
    std::vector<Latent> latents;
    std::vector<int> labels;
    std::vector<double> scores;
    double auc = 0;
  };
  ZeroShot zero_shot(std::size_t n_train) {
    const Vae& m = model(n_train);
    const std::vector<MaskVolume> cohort(train_pool().begin(),
                                         train_pool().begin() + static_cast<long>(n_train));
    const CohortStats stats = fit_normative(encode(m, cohort));
    ZeroShot z;
    for (const auto* group : {&test_healthy(), &test_abnormal()}) {
      for (auto& lat : encode(m, *group)) {
        z.scores.push_back(zero_shot_score(lat, stats));
        z.latents.push_back(std::move(lat));
        z.labels.push_back(group == &test_healthy() ? 0 : 1);
      }
    }
    z.auc = auc(z.scores, z.labels);
    return z;
  }

  std::vector<std::vector<std::string>> report_rows;

 private:
  fs::path cache_;
  std::vector<MaskVolume> pool_, healthy_, abnormal_, shrunk_;
  std::map<std::size_t, Vae> models_;
};

Outcome gradient_correctness(Fixture&) {
  VaeConfig c;
  c.input_dims = {8, 8, 4};
  c.stages = 2;
  c.channels = {2, 4};
  c.latent_dim = 4;
  VaeModel<double> model(c, 4);
  oracle::randomize_biases(model, 4);
  MaskVolume m(c.input_dims, c.input_spacing);
  for (int z = 1; z < 3; ++z)
    for (int y = 2; y < 6; ++y)
      for (int x = 1; x < 6; ++x) m.set(x, y, z, true);
  const auto eps = standard_normal(4, 77);
  const oracle::GradCheck r = oracle::check_vae_gradients(model, m, eps, 1.0);
  return {r.checked == model.parameter_count() && r.max_rel_error < kGradRelTol,
          fmt("%zu entries, max rel error %.2e at %s (limit %.0e)", r.checked, r.max_rel_error,
              r.worst.c_str(), kGradRelTol)};
}

Outcome kl_closed_form(Fixture&) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> lv(-1.5, 1.5);
  constexpr int dim = 8;
  double worst = 0;
  for (int k = 0; k < kKlPosteriors; ++k) {
    LatentPosterior post{std::vector<double>(dim), std::vector<double>(dim)};
    for (int j = 0; j < dim; ++j) {
      post.mu[j] = normal(rng);
      post.logvar[j] = lv(rng);
    }
    // E_q[log q(z) - log p(z)], z drawn from q.
    double sum = 0;
    for (std::size_t s = 0; s < kKlDraws; ++s) {
      double log_ratio = 0;
      for (int j = 0; j < dim; ++j) {
        const double e = normal(rng);
        const double z = post.mu[j] + std::exp(0.5 * post.logvar[j]) * e;
        log_ratio += -0.5 * post.logvar[j] - 0.5 * e * e + 0.5 * z * z;
      }
      sum += log_ratio;
    }
    const double mc = sum / double(kKlDraws);
    worst = std::max(worst, std::abs(kl_gaussian(post) - mc) / std::abs(mc));
  }
  return {worst < kKlRelTol, fmt("%d posteriors x %zu draws, worst rel error %.3e (limit %.2f)",
                                 kKlPosteriors, kKlDraws, worst, kKlRelTol)};
}

Outcome reconstruction(Fixture& f) {
  const double d = reconstruction_dice(f.model(kTrainPool), f.test_healthy());
  return {d >= kReconDiceMin,
          fmt("held-out healthy Dice %.4f over %zu masks (min %.2f)", d, f.test_healthy().size(),
              kReconDiceMin)};
}

Outcome shape_vs_volume(Fixture& f) {
  const auto z = f.zero_shot(kTrainPool);
  const auto& pool = f.train_pool();
  std::vector<double> vols;
  for (const auto& m : pool) vols.push_back(volume_mm3(m));
  const CohortStats stats = fit_normative(std::vector<Latent>(pool.size(), Latent{0.0}), vols);
  std::vector<double> vs;
  for (const auto* group : {&f.test_healthy(), &f.test_abnormal()}) {
    for (const auto& m : *group) vs.push_back(volume_baseline_score(m, stats));
  }
  const double vol_auc = auc(vs, z.labels);
  const EvalReport vr = make_report("vae_zeroshot", z.scores, z.labels, 0, kBootReps, 1);
  const EvalReport br = make_report("volume_zeroshot", vs, z.labels, 0, kBootReps, 2);
  for (const auto* r : {&vr, &br}) {
    f.report_rows.push_back({r->method, fmt("%.4f", r->auc), fmt("%.4f", r->auc_mean),
                             fmt("%.4f", r->auc_sd)});
  }
  const bool ok = z.auc >= kZeroShotAucMin && vol_auc >= kVolumeAucLo && vol_auc <= kVolumeAucHi;
  return {ok, fmt("latent AUC %.4f (min %.2f), volume AUC %.4f (band [%.2f, %.2f])", z.auc,
                  kZeroShotAucMin, vol_auc, kVolumeAucLo, kVolumeAucHi)};
}

Outcome fewshot_dominates(Fixture& f) {
  const auto z = f.zero_shot(kTrainPool);
  const SvmParams svm;
  const FoldPlan loo = stratified_kfold(z.labels, int(z.labels.size()), 0);
  const EvalReport l = crossval_fewshot(z.latents, z.labels, loo, svm, kBootReps, 3, "vae_fewshot_loo");
  const int k = folds_for_ratio(kFewShotRatio);
  const FoldPlan plan = stratified_kfold(z.labels, k, 11);
  const EvalReport r = crossval_fewshot(z.latents, z.labels, plan, svm, kBootReps, 4,
                                        "vae_fewshot_ratio0.1");
  for (const auto* x : {&l, &r}) {
    f.report_rows.push_back({x->method, fmt("%.4f", x->auc), fmt("%.4f", x->auc_mean),
                             fmt("%.4f", x->auc_sd)});
  }
  const bool ok = l.auc >= z.auc && r.auc >= z.auc - kFewShotSlack;
  return {ok, fmt("zero-shot %.4f, leave-one-out %.4f, ratio %.2f (k=%d) %.4f (slack %.2f)", z.auc,
                  l.auc, kFewShotRatio, k, r.auc, kFewShotSlack)};
}

Outcome training_size_trend(Fixture& f) {
  std::vector<double> aucs;
  for (std::size_t n : {50, 100, 200}) aucs.push_back(f.zero_shot(n).auc);
  const bool ok = aucs[1] >= aucs[0] - kTrendSlack && aucs[2] >= aucs[1] - kTrendSlack;
  return {ok, fmt("zero-shot AUC n=50 %.4f, n=100 %.4f, n=200 %.4f (slack %.2f)", aucs[0], aucs[1],
                  aucs[2], kTrendSlack)};
}

Outcome bootstrap_consistency(Fixture&) {
  std::mt19937_64 rng(80);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 80; ++i) {
    y.push_back(i % 2);
    s.push_back(n(rng) + 0.9 * y.back());
  }
  const MetricFn metric = [](std::span<const double> a, std::span<const int> b) { return auc(a, b); };
  const auto t0 = std::chrono::steady_clock::now();
  const BootstrapResult a = bootstrap(metric, s, y, kBootReps, 17);
  const BootstrapResult b = bootstrap(metric, s, y, kBootReps, 17);
  const double direct = auc(s, y);
  const bool same = a.mean == b.mean && a.sd == b.sd;
  const double gap = std::abs(a.mean - direct);
  return {same && gap < kBootTol,
          fmt("direct %.4f, bootstrap mean %.4f (gap %.4f, limit %.3f), repeat %s, %.1fs", direct,
              a.mean, gap, kBootTol, same ? "bitwise equal" : "DIFFERS", seconds_since(t0))};
}

Outcome exact_oracles(Fixture&) {
  std::mt19937_64 rng(8);
  int auc_bad = 0, sdf_bad = 0, dice_bad = 0, nll_bad = 0;
  std::uniform_int_distribution<int> sc(0, 6), bit(0, 1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s(20);
    std::vector<int> y(20);
    for (int i = 0; i < 20; ++i) {
      s[i] = sc(rng);
      y[i] = i < 2 ? i : bit(rng);
    }
    auc_bad += auc(s, y) != oracle::pair_count_auc(s, y);
  }
  std::uniform_int_distribution<int> ext(2, 12);
  std::uniform_real_distribution<double> frac(0.05, 0.6);
  for (int t = 0; t < 50; ++t) {
    const Dims d{ext(rng), ext(rng), ext(rng)};
    const Spacing sp{1.0, 1.0 + 0.5 * bit(rng), 2.0};
    MaskVolume m = oracle::random_mask(d, sp, frac(rng), rng);
    if (m.foreground_count() == 0) m.set(0, 0, 0, true);
    if (m.foreground_count() == d.count()) m.set(0, 0, 0, false);
    if (d.count() < 2) continue;
    const auto ref = oracle::brute_force_sdf(m);
    const auto got = signed_distance(m).data();
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (std::abs(got[i] - ref[i]) > 1e-9) {
        ++sdf_bad;
        break;
      }
    }
    const MaskVolume other = oracle::random_mask(d, sp, frac(rng), rng);
    dice_bad += dice(m, other) != oracle::direct_dice(m, other);
    std::vector<double> p(d.count());
    std::uniform_real_distribution<double> u(1e-4, 1 - 1e-4);
    for (double& v : p) v = u(rng);
    nll_bad += bernoulli_nll(ScalarField(d, sp, p), m) != oracle::direct_nll(p, m.data());
  }
  const bool ok = auc_bad + sdf_bad + dice_bad + nll_bad == 0;
  return {ok, fmt("mismatches: AUC %d/200, SDF %d/50, Dice %d/50, NLL %d/50", auc_bad, sdf_bad,
                  dice_bad, nll_bad)};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double l2(const Latent& a, const Latent& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

Outcome augmentation_invariance(Fixture& f) {
  const Vae& m = f.model(kTrainPool);
  const auto zh = f.encode(m, f.test_healthy());
  const auto za = f.encode(m, f.test_abnormal());
  std::vector<double> shift, between;
  std::size_t clipped = 0;
  for (const auto* group : {&f.test_healthy(), &f.test_abnormal()}) {
    const auto zs = group == &f.test_healthy() ? zh : za;
    for (std::size_t i = 0; i < group->size(); ++i) {
      const MaskVolume moved = translate((*group)[i], kShiftVoxels, 0, 0);
      clipped += moved.foreground_count() != (*group)[i].foreground_count();
      shift.push_back(l2(zs[i], m.encode(moved).mu));
    }
  }
  for (const auto& a : zh)
    for (const auto& b : za) between.push_back(l2(a, b));
  const double ms = median(shift), mb = median(between);
  return {ms < mb && clipped == 0,
          fmt("median latent distance: %d-voxel shift %.4f, healthy-vs-abnormal %.4f; %zu clipped",
              kShiftVoxels, ms, mb, clipped)};
}

Outcome interpolation_endpoints(Fixture& f) {
  const Vae& m = f.model(kTrainPool);
  const std::vector<double> ts = {0, 0.25, 0.5, 0.75, 1};
  const auto zh = f.encode(m, f.test_healthy());
  const Interpolation it = interpolate_groups(m, zh, f.encode(m, f.test_shrunk()), ts);
  const bool ends = it.masks.front() == m.decode(it.z_normal).binarize(0.5) &&
                    it.masks.back() == m.decode(it.z_abnormal).binarize(0.5);
  int violations = 0;
  std::string vols;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    vols += fmt("%s%.0f", i ? " " : "", volume_mm3(it.masks[i]));
    if (i > 0 && !(volume_mm3(it.masks[i]) < volume_mm3(it.masks[i - 1]))) ++violations;
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    save_pgm(it.masks[i], (f.cache() / interpolation_filename(ts[i])).string());
  }
  const Interpolation vp = interpolate_groups(m, zh, f.encode(m, f.test_abnormal()), ts);
  std::string vp_vols;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    vp_vols += fmt("%s%.0f", i ? " " : "", volume_mm3(vp.masks[i]));
  }
  return {ends && violations <= kMaxVolumeViolations,
          fmt("endpoints %s; shrinkage volumes [%s] mm3, %d violations (max %d); "
              "volume-preserving group (info) [%s] mm3",
              ends ? "exact" : "DIFFER", vols.c_str(), violations, kMaxVolumeViolations,
              vp_vols.c_str())};
}

Outcome asm_report(Fixture& f) {
  const auto& pool = f.train_pool();
  const AsmModel model = asm_fit(pool, kAsmK);
  std::vector<Latent> ref;
  for (const auto& m : pool) ref.push_back(asm_project(model, m));
  const CohortStats stats = fit_normative(ref);
  std::vector<Latent> test;
  std::vector<int> labels;
  std::vector<double> scores;
  for (const auto* group : {&f.test_healthy(), &f.test_abnormal()}) {
    for (const auto& m : *group) {
      test.push_back(asm_project(model, m));
      labels.push_back(group == &f.test_healthy() ? 0 : 1);
      scores.push_back(zero_shot_score(test.back(), stats));
    }
  }
  const EvalReport zs = make_report("asm_zeroshot", scores, labels, 0, kBootReps, 5);
  const FoldPlan loo = stratified_kfold(labels, int(labels.size()), 0);
  const EvalReport fs_ = crossval_fewshot(test, labels, loo, {}, kBootReps, 6, "asm_fewshot_loo");
  for (const auto* x : {&zs, &fs_}) {
    f.report_rows.push_back({x->method, fmt("%.4f", x->auc), fmt("%.4f", x->auc_mean),
                             fmt("%.4f", x->auc_sd)});
  }
  std::set<std::string> methods;
  bool finite = true;
  for (const auto& row : f.report_rows) {
    methods.insert(row[0]);
    for (std::size_t i = 1; i < row.size(); ++i) finite = finite && std::isfinite(std::stod(row[i]));
  }
  const fs::path out = f.cache() / "acceptance_report.csv";
  std::ofstream csv(out);
  csv << "method,auc,auc_boot_mean,auc_boot_sd\n";
  for (const auto& row : f.report_rows) csv << row[0] << ',' << row[1] << ',' << row[2] << ',' << row[3] << '\n';
  const bool has_vae = methods.contains("vae_zeroshot") && methods.contains("vae_fewshot_loo");
  return {finite && has_vae && csv.good(),
          fmt("K=%zu: ASM zero-shot AUC %.4f, leave-one-out %.4f; %zu rows in %s%s", kAsmK, zs.auc,
              fs_.auc, f.report_rows.size(), out.c_str(),
              has_vae ? "" : " (VAE rows missing: run criteria 4 and 5 too)")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <cache-dir> [criterion ...]\n", argv[0]);
    return 2;
  }
  Fixture fixture(argv[1]);
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));

  const std::vector<std::pair<const char*, std::function<Outcome(Fixture&)>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"KL closed form", kl_closed_form},
      {"reconstruction", reconstruction},
      {"shape vs volume separation", shape_vs_volume},
      {"few-shot dominates zero-shot", fewshot_dominates},
      {"training-size trend", training_size_trend},
      {"bootstrap consistency", bootstrap_consistency},
      {"exact small-instance oracles", exact_oracles},
      {"augmentation invariance", augmentation_invariance},
      {"interpolation endpoints", interpolation_endpoints},
      {"ASM baseline report", asm_report},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(fixture);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
