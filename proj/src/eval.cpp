#include "normshape/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "normshape/error.hpp"
#include "normshape/parallel.hpp"
#include "normshape/random.hpp"

namespace normshape {

namespace {

void check_binary_labels(std::span<const int> labels, std::size_t expected) {
  if (labels.size() != expected) throw Error(ErrorKind::LengthMismatch, "label count differs");
  bool pos = false, neg = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorKind::InvalidArgument, "labels must be 0 or 1");
    (y == 1 ? pos : neg) = true;
  }
  if (!pos) throw Error(ErrorKind::SingleClass, "no positive (label 1) samples");
  if (!neg) throw Error(ErrorKind::SingleClass, "no negative (label 0) samples");
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary_labels(labels, scores.size());
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank sum keeps everything integral.
  double rank2_pos = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double r2 = double(i + 1 + j);  // 2 * average of ranks i+1 .. j
    for (std::size_t m = i; m < j; ++m) {
      if (labels[order[m]] == 1) {
        rank2_pos += r2;
        ++n_pos;
      }
    }
    i = j;
  }
  const double n_neg = double(n - n_pos);
  const double u2 = rank2_pos - double(n_pos) * double(n_pos + 1);
  return u2 / (2.0 * double(n_pos) * n_neg);
}

double balanced_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_binary_labels(labels, predictions.size());
  std::size_t tp = 0, tn = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++p;
      tp += predictions[i] == 1;
    } else {
      ++n;
      tn += predictions[i] == 0;
    }
  }
  return 0.5 * (double(tp) / double(p) + double(tn) / double(n));
}

BootstrapResult bootstrap(const MetricFn& metric, std::span<const double> scores,
                          std::span<const int> labels, int reps, std::uint64_t seed) {
  if (reps < 1) throw Error(ErrorKind::InvalidArgument, "reps must be >= 1");
  check_binary_labels(labels, scores.size());
  const std::size_t n = scores.size();
  std::vector<double> values(static_cast<std::size_t>(reps));
  parallel_for(values.size(), [&](std::size_t r) {
    Rng rng(derive_seed(seed, r));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (int attempt = 0;; ++attempt) {
      if (attempt == 100) {
        throw Error(ErrorKind::ResampleExhausted,
                    "100 consecutive resamples contained a single class");
      }
      int pos = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = pick(rng);
        s[i] = scores[k];
        l[i] = labels[k];
        pos += l[i];
      }
      if (pos > 0 && pos < static_cast<int>(n)) break;
    }
    values[r] = metric(s, l);
  });
  BootstrapResult out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(reps);
  if (reps > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(ss / double(reps - 1));
  }
  return out;
}

EvalReport make_report(std::string method, std::vector<double> scores, std::vector<int> labels,
                       double threshold, int reps, std::uint64_t seed) {
  EvalReport r;
  r.method = std::move(method);
  r.threshold = threshold;
  r.n_boot = reps;
  auto balacc_at = [threshold](std::span<const double> s, std::span<const int> l) {
    std::vector<int> pred(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) pred[i] = s[i] > threshold ? 1 : 0;
    return balanced_accuracy(pred, l);
  };
  r.auc = auc(scores, labels);
  r.balacc = balacc_at(scores, labels);
  const BootstrapResult a = bootstrap(
      [](std::span<const double> s, std::span<const int> l) { return auc(s, l); }, scores, labels,
      reps, derive_seed(seed, "auc"));
  const BootstrapResult b = bootstrap(balacc_at, scores, labels, reps, derive_seed(seed, "balacc"));
  r.auc_mean = a.mean;
  r.auc_sd = a.sd;
  r.balacc_mean = b.mean;
  r.balacc_sd = b.sd;
  r.scores = std::move(scores);
  r.labels = std::move(labels);
  return r;
}

FoldPlan stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed) {
  const std::size_t n = labels.size();
  check_binary_labels(labels, n);
  if (k < 2 || static_cast<std::size_t>(k) > n) {
    throw Error(ErrorKind::InvalidK, "k = " + std::to_string(k) + " must lie in [2, " +
                                         std::to_string(n) + "]");
  }
  FoldPlan plan;
  plan.k = k;
  plan.leave_one_out = static_cast<std::size_t>(k) == n;
  plan.assignment.assign(n, -1);
  if (plan.leave_one_out) {
    std::iota(plan.assignment.begin(), plan.assignment.end(), 0);
    return plan;
  }
  std::size_t next = 0;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i : members) plan.assignment[i] = static_cast<int>(next++ % std::size_t(k));
  }
  return plan;
}

int folds_for_ratio(double ratio) {
  if (!(ratio > 0)) throw Error(ErrorKind::InvalidArgument, "ratio must be positive");
  return std::max(2, static_cast<int>(std::lround(1.0 + 1.0 / ratio)));
}

EvalReport crossval_fewshot(const std::vector<Latent>& latents, std::span<const int> labels,
                            const FoldPlan& plan, const SvmParams& svm, int reps,
                            std::uint64_t seed, std::string method) {
  const std::size_t n = latents.size();
  if (labels.size() != n || plan.assignment.size() != n) {
    throw Error(ErrorKind::LengthMismatch, "latents, labels and fold plan differ in length");
  }
  struct FoldOut {
    std::vector<double> scores;
    std::vector<int> labels;
  };
  std::vector<FoldOut> outs(static_cast<std::size_t>(plan.k));
  parallel_for(outs.size(), [&](std::size_t f) {
    std::vector<Latent> train_x;
    std::vector<int> train_y;
    std::vector<std::size_t> test;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_fold = plan.assignment[i] == static_cast<int>(f);
      // The small side trains, except for leave-one-out where it is the test sample.
      if (in_fold != plan.leave_one_out) {
        train_x.push_back(latents[i]);
        train_y.push_back(labels[i]);
      } else {
        test.push_back(i);
      }
    }
    SvmParams p = svm;
    p.seed = derive_seed(svm.seed, f);
    p.objective_trace = nullptr;
    const LinearClassifier clf = fit_linear_svm(train_x, train_y, p);
    for (std::size_t i : test) {
      outs[f].scores.push_back(svm_decision(clf, latents[i]));
      outs[f].labels.push_back(labels[i]);
    }
  });
  std::vector<double> scores;
  std::vector<int> pooled;
  for (const auto& o : outs) {
    scores.insert(scores.end(), o.scores.begin(), o.scores.end());
    pooled.insert(pooled.end(), o.labels.begin(), o.labels.end());
  }
  return make_report(std::move(method), std::move(scores), std::move(pooled), 0.0, reps, seed);
}

std::vector<std::array<double, 2>> pca_2d(const std::vector<Latent>& latents) {
  if (latents.size() < 3) throw Error(ErrorKind::TooFewSamples, "PCA needs at least 3 samples");
  const std::size_t n = latents.size();
  const std::size_t dim = latents.front().size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    if (latents[i].size() != dim) throw Error(ErrorKind::LengthMismatch, "latents differ in length");
    for (std::size_t j = 0; j < dim; ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = latents[i][j];
    }
  }
  x.rowwise() -= x.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(x.transpose() * x);
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  const Eigen::Index m = static_cast<Eigen::Index>(dim);
  for (int c = 0; c < 2 && c < m; ++c) {
    Eigen::VectorXd dir = eig.eigenvectors().col(m - 1 - c);
    for (Eigen::Index j = 0; j < m; ++j) {
      if (std::abs(dir[j]) > 1e-12) {
        if (dir[j] < 0) dir = -dir;
        break;
      }
    }
    const Eigen::VectorXd proj = x * dir;
    for (std::size_t i = 0; i < n; ++i) out[i][std::size_t(c)] = proj[Eigen::Index(i)];
  }
  return out;
}

namespace {

Latent group_mean(const std::vector<Latent>& zs, const char* which) {
  if (zs.empty()) throw Error(ErrorKind::EmptyGroup, std::string(which) + " group is empty");
  Latent m(zs.front().size(), 0.0);
  for (const auto& z : zs) {
    if (z.size() != m.size()) throw Error(ErrorKind::LengthMismatch, "latents differ in length");
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += z[j];
  }
  for (double& v : m) v /= double(zs.size());
  return m;
}

}  // namespace

Interpolation interpolate_groups(const Vae& model, const std::vector<Latent>& latents_normal,
                                 const std::vector<Latent>& latents_abnormal,
                                 std::span<const double> ts) {
  Interpolation out;
  out.z_normal = group_mean(latents_normal, "normal");
  out.z_abnormal = group_mean(latents_abnormal, "abnormal");
  if (out.z_normal.size() != out.z_abnormal.size()) {
    throw Error(ErrorKind::LengthMismatch, "group latents differ in length");
  }
  out.ts.assign(ts.begin(), ts.end());
  out.masks.resize(ts.size());
  parallel_for(ts.size(), [&](std::size_t i) {
    const double t = ts[i];
    Latent z(out.z_normal.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
      z[j] = (1 - t) * out.z_normal[j] + t * out.z_abnormal[j];
    }
    out.masks[i] = model.decode(z).binarize();
  });
  return out;
}

std::vector<double> default_interpolation_ts() { return {-0.25, 0, 0.25, 0.5, 0.75, 1, 1.25}; }

std::string mid_slice_pgm(const MaskVolume& mask) {
  const Dims& d = mask.dims();
  const int z = d.nz / 2;
  std::string out = "P5\n" + std::to_string(d.nx) + " " + std::to_string(d.ny) + "\n255\n";
  for (int y = 0; y < d.ny; ++y) {
    for (int x = 0; x < d.nx; ++x) out.push_back(mask.at(x, y, z) ? char(255) : char(0));
  }
  return out;
}

void save_pgm(const MaskVolume& mask, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  const std::string bytes = mid_slice_pgm(mask);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::IoFailure, "failed writing " + path);
}

std::string interpolation_filename(double t) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, t);
  return "interp_t" + std::string(buf, res.ptr) + ".pgm";
}

namespace {

std::ofstream open_csv(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open " + path + " for writing");
  f.precision(10);
  return f;
}

void finish(std::ofstream& f, const std::string& path) {
  if (!f) throw Error(ErrorKind::IoFailure, "failed writing " + path);
}

}  // namespace

void write_report_csv(const std::string& path, const std::vector<EvalReport>& reports) {
  auto f = open_csv(path);
  f << "method,n_boot,auc_mean,auc_sd,balacc_mean,balacc_sd\n";
  for (const auto& r : reports) {
    f << r.method << ',' << r.n_boot << ',' << r.auc_mean << ',' << r.auc_sd << ','
      << r.balacc_mean << ',' << r.balacc_sd << '\n';
  }
  finish(f, path);
}

void write_scores_csv(const std::string& path, const std::vector<std::string>& ids,
                      std::span<const int> labels, std::span<const double> scores,
                      const std::string& method) {
  if (ids.size() != labels.size() || ids.size() != scores.size()) {
    throw Error(ErrorKind::LengthMismatch, "score columns differ in length");
  }
  auto f = open_csv(path);
  f << "id,label,score,method\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    f << ids[i] << ',' << labels[i] << ',' << scores[i] << ',' << method << '\n';
  }
  finish(f, path);
}

void write_pca_csv(const std::string& path, const std::vector<std::string>& ids,
                   std::span<const int> labels, const std::vector<std::array<double, 2>>& coords) {
  if (ids.size() != labels.size() || ids.size() != coords.size()) {
    throw Error(ErrorKind::LengthMismatch, "PCA columns differ in length");
  }
  auto f = open_csv(path);
  f << "id,label,p1,p2\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    f << ids[i] << ',' << labels[i] << ',' << coords[i][0] << ',' << coords[i][1] << '\n';
  }
  finish(f, path);
}

ScoreTable read_scores_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error(ErrorKind::MalformedHeader, path + " is empty");
  if (line.rfind("id,label,score", 0) != 0) {
    throw Error(ErrorKind::MalformedHeader, path + ": expected header id,label,score[,method]");
  }
  ScoreTable t;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() < 3) {
      throw Error(ErrorKind::MalformedHeader, path + ":" + std::to_string(row) + ": too few columns");
    }
    int label = -1;
    double score = 0;
    const auto lr = std::from_chars(cols[1].data(), cols[1].data() + cols[1].size(), label);
    const auto sr = std::from_chars(cols[2].data(), cols[2].data() + cols[2].size(), score);
    if (lr.ec != std::errc() || sr.ec != std::errc() || (label != 0 && label != 1)) {
      throw Error(ErrorKind::MalformedHeader, path + ":" + std::to_string(row) + ": bad label or score");
    }
    t.ids.push_back(cols[0]);
    t.labels.push_back(label);
    t.scores.push_back(score);
    t.methods.push_back(cols.size() > 3 ? cols[3] : "");
  }
  return t;
}

}  // namespace normshape
