#include "normshape/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "normshape/error.hpp"
#include "normshape/parallel.hpp"
#include "normshape/random.hpp"

namespace normshape {

std::vector<int> volume_quartiles(const std::vector<MaskVolume>& cohort) {
  const std::size_t n = cohort.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> vol(n);
  for (std::size_t i = 0; i < n; ++i) vol[i] = volume_mm3(cohort[i]);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return vol[a] < vol[b]; });
  std::vector<int> q(n);
  for (std::size_t rank = 0; rank < n; ++rank) q[order[rank]] = static_cast<int>(rank * 4 / n);
  return q;
}

TrainSplit split_by_volume_quartile(const std::vector<MaskVolume>& cohort, double val_fraction,
                                    std::uint64_t seed) {
  if (!(val_fraction > 0 && val_fraction < 1)) {
    throw Error(ErrorKind::InvalidArgument, "val_fraction must lie in (0, 1)");
  }
  const std::vector<int> q = volume_quartiles(cohort);
  std::array<std::vector<std::size_t>, 4> bins;
  for (std::size_t i = 0; i < q.size(); ++i) bins[static_cast<std::size_t>(q[i])].push_back(i);

  // Largest-remainder apportionment of the validation count over quartiles.
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * double(cohort.size())));
  std::array<std::size_t, 4> take{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    const double exact = val_fraction * double(bins[b].size());
    take[b] = static_cast<std::size_t>(std::floor(exact));
    rem[b] = exact - double(take[b]);
    assigned += take[b];
  }
  std::array<std::size_t, 4> by_rem{0, 1, 2, 3};
  std::stable_sort(by_rem.begin(), by_rem.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t j = 0; assigned < n_val && j < 4; ++j) {
    if (take[by_rem[j]] < bins[by_rem[j]].size()) {
      ++take[by_rem[j]];
      ++assigned;
    }
  }

  TrainSplit split;
  for (std::size_t b = 0; b < 4; ++b) {
    Rng rng(derive_seed(seed, b));
    std::shuffle(bins[b].begin(), bins[b].end(), rng);
    split.val.insert(split.val.end(), bins[b].begin(), bins[b].begin() + static_cast<long>(take[b]));
    split.train.insert(split.train.end(), bins[b].begin() + static_cast<long>(take[b]),
                       bins[b].end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

double kl_weight_at(long step, long warmup_steps) {
  if (warmup_steps <= 0) return 1.0;
  return std::min(1.0, double(step) / double(warmup_steps));
}

double reconstruction_dice(const Vae& model, const std::vector<MaskVolume>& masks) {
  if (masks.empty()) throw Error(ErrorKind::EmptyCohort, "no masks to reconstruct");
  std::vector<double> d(masks.size());
  parallel_for(masks.size(), [&](std::size_t i) {
    const LatentPosterior post = model.encode(masks[i]);
    d[i] = dice(model.decode(post.mu).binarize(), masks[i]);
  });
  return std::accumulate(d.begin(), d.end(), 0.0) / double(d.size());
}

namespace {

struct SampleResult {
  double loss = 0, nll = 0, kl = 0;
  std::optional<Vae::Forward> pass;
};

void check_cohort(const std::vector<MaskVolume>& cohort, const VaeConfig& config) {
  if (cohort.size() < 10) {
    throw Error(ErrorKind::TooFewSamples,
                "training needs at least 10 masks, got " + std::to_string(cohort.size()));
  }
  for (const auto& m : cohort) {
    if (!(m.dims() == config.input_dims)) {
      throw Error(ErrorKind::DimMismatch, "cohort mask dims differ from the model input dims");
    }
  }
}

}  // namespace

TrainResult train(const std::vector<MaskVolume>& cohort, const VaeConfig& config,
                  const TrainOptions& options) {
  config.validate();
  check_cohort(cohort, config);
  if (options.epochs < 1 || options.batch_size < 1 || options.accumulation_steps < 1) {
    throw Error(ErrorKind::InvalidArgument, "epochs, batch_size and accumulation_steps must be >= 1");
  }
  if (options.augment) options.aug.validate();

  TrainSplit split = split_by_volume_quartile(cohort, options.val_fraction,
                                              derive_seed(options.seed, "split"));
  const std::size_t n_train = split.train.size();
  const std::size_t per_step =
      static_cast<std::size_t>(options.batch_size) * static_cast<std::size_t>(options.accumulation_steps);
  const long steps_per_epoch = static_cast<long>((n_train + per_step - 1) / per_step);

  nn::SgdSchedule sched = options.sgd;
  sched.total_steps = steps_per_epoch * options.epochs;
  sched.validate();
  const long warmup = config.kl_warmup_steps >= 0
                          ? config.kl_warmup_steps
                          : static_cast<long>(std::lround(0.1 * double(sched.total_steps)));

  Vae model(config, derive_seed(options.seed, "init"));
  if (options.init_output_prior) {
    double fg = 0;
    for (std::size_t i : split.train) {
      fg += double(cohort[i].foreground_count()) / double(cohort[i].dims().count());
    }
    model.set_output_prior(fg / double(n_train));
  }
  std::vector<nn::Parameter<float>*> params;
  for (auto& p : model.parameters()) params.push_back(&p);

  const std::uint64_t shuffle_seed = derive_seed(options.seed, "shuffle");
  const std::uint64_t aug_seed = derive_seed(options.seed, "augment");
  const std::uint64_t eps_seed = derive_seed(options.seed, "eps");
  const std::uint64_t val_seed = derive_seed(options.seed, "val-eps");
  const std::size_t latent = static_cast<std::size_t>(config.latent_dim);

  TrainResult result{model, {}, split};
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = split.train;
  long step = 0;
  std::uint64_t sample_counter = 0;
  const std::size_t chunk = std::max<std::size_t>(1, thread_count());

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    {
      Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
    }
    double epoch_loss = 0;
    double lr = 0;
    double norm_sum = 0;
    for (std::size_t begin = 0; begin < n_train; begin += per_step, ++step) {
      const std::size_t end = std::min(n_train, begin + per_step);
      const double klw = kl_weight_at(step, warmup);
      // Samples run in parallel chunks; gradients are reduced in sample order.
      for (std::size_t c0 = begin; c0 < end; c0 += chunk) {
        const std::size_t c1 = std::min(end, c0 + chunk);
        std::vector<SampleResult> res(c1 - c0);
        parallel_for(c1 - c0, [&](std::size_t j) {
          const std::uint64_t sid = sample_counter + (c0 - begin) + j;
          const MaskVolume& src = cohort[order[c0 + j]];
          const MaskVolume input = options.augment
                                       ? random_similarity(src, options.aug, derive_seed(aug_seed, sid))
                                       : src;
          const auto eps_d = standard_normal(latent, derive_seed(eps_seed, sid));
          const std::vector<float> eps(eps_d.begin(), eps_d.end());
          auto f = model.forward(input, eps, klw, true);
          f.graph.backward_local(f.loss);
          SampleResult& r = res[j];
          r.loss = f.graph.value(f.loss).data[0];
          r.nll = f.graph.value(f.nll).data[0];
          r.kl = f.graph.value(f.kl).data[0];
          r.pass.emplace(std::move(f));
        });
        for (std::size_t j = 0; j < res.size(); ++j) {
          SampleResult& r = res[j];
          if (!std::isfinite(r.loss)) {
            if (!options.dump_path.empty()) save_checkpoint(model.to_tensors(), options.dump_path);
            std::ostringstream msg;
            msg << "non-finite loss at epoch " << epoch << " step " << step << " sample "
                << order[c0 + j] << " (nll " << r.nll << ", kl " << r.kl << ", kl_weight " << klw
                << ")";
            if (!options.dump_path.empty()) msg << "; parameters dumped to " << options.dump_path;
            throw Error(ErrorKind::NonFiniteLoss, msg.str());
          }
          epoch_loss += r.loss;
          res[j].pass->graph.accumulate_parameter_grads();
        }
      }
      double sq = 0;
      for (auto* p : params) {
        for (float g : p->grad.data) sq += double(g) * double(g);
      }
      const double norm = std::sqrt(sq) / double(end - begin);
      norm_sum += norm;
      double factor = 1.0 / double(end - begin);
      if (options.grad_clip_norm > 0 && norm > options.grad_clip_norm) {
        factor *= options.grad_clip_norm / norm;
      }
      for (auto* p : params) {
        for (float& g : p->grad.data) g = static_cast<float>(g * factor);
      }
      lr = sched.learning_rate(step);
      nn::sgd_step<float>(params, sched, step);
      sample_counter += end - begin;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / double(n_train);
    rec.lr = lr;
    rec.grad_norm = norm_sum / double(steps_per_epoch);
    std::vector<double> vl(split.val.size()), vd(split.val.size());
    parallel_for(split.val.size(), [&](std::size_t j) {
      const MaskVolume& m = cohort[split.val[j]];
      vl[j] = model.loss(m, derive_seed(val_seed, split.val[j]), 1.0).total;
      if (!std::isfinite(vl[j])) return;
      const LatentPosterior post = model.encode(m);
      vd[j] = dice(model.decode(post.mu).binarize(), m);
    });
    rec.val_loss = std::accumulate(vl.begin(), vl.end(), 0.0) / double(vl.size());
    if (!std::isfinite(rec.val_loss)) {
      if (!options.dump_path.empty()) save_checkpoint(model.to_tensors(), options.dump_path);
      throw Error(ErrorKind::NonFiniteLoss,
                  "non-finite validation loss after epoch " + std::to_string(epoch));
    }
    rec.val_dice = std::accumulate(vd.begin(), vd.end(), 0.0) / double(vd.size());
    result.history.epochs.push_back(rec);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.history.best_epoch = epoch;
      result.model = model;
    }
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

void write_history_csv(const std::string& path, const TrainingHistory& history) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path + " for writing");
  out << "epoch,train_loss,val_loss,val_dice,lr\n";
  out.precision(10);
  for (const auto& r : history.epochs) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_dice << ',' << r.lr
        << '\n';
  }
  if (!out) throw Error(ErrorKind::IoFailure, "failed writing " + path);
}

}  // namespace normshape
