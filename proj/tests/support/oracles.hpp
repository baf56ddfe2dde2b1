#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <queue>
#include <random>
#include <span>
#include <vector>

#include "normshape/graph.hpp"
#include "normshape/vae.hpp"
#include "normshape/volume.hpp"

namespace oracle {

using normshape::Dims;
using normshape::MaskVolume;
using normshape::Spacing;

inline MaskVolume random_mask(Dims d, Spacing s, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution on(p);
  std::vector<std::uint8_t> v(d.count());
  for (auto& x : v) x = on(rng) ? 1 : 0;
  return MaskVolume(d, s, std::move(v));
}

/// All-pairs signed distance: min center distance to the opposite class, negative inside.
inline std::vector<double> brute_force_sdf(const MaskVolume& m) {
  const Dims d = m.dims();
  const Spacing s = m.spacing();
  std::vector<double> out(d.count());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const bool in = m.at(x, y, z);
        double best = std::numeric_limits<double>::infinity();
        for (int z2 = 0; z2 < d.nz; ++z2)
          for (int y2 = 0; y2 < d.ny; ++y2)
            for (int x2 = 0; x2 < d.nx; ++x2) {
              if (bool(m.at(x2, y2, z2)) == in) continue;
              const double dx = (x - x2) * s.sx, dy = (y - y2) * s.sy, dz = (z - z2) * s.sz;
              best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
            }
        out[m.index(x, y, z)] = in ? -best : best;
      }
  return out;
}

/// BFS flood fill, 6-connectivity.
inline int flood_fill_components(const MaskVolume& m) {
  const Dims d = m.dims();
  std::vector<char> seen(d.count(), 0);
  int comps = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!m.at(x, y, z) || seen[m.index(x, y, z)]) continue;
        ++comps;
        std::queue<std::array<int, 3>> q;
        q.push({x, y, z});
        seen[m.index(x, y, z)] = 1;
        while (!q.empty()) {
          auto [a, b, c] = q.front();
          q.pop();
          const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (auto& o : nb) {
            const int u = a + o[0], v = b + o[1], w = c + o[2];
            if (!m.contains(u, v, w) || !m.at(u, v, w) || seen[m.index(u, v, w)]) continue;
            seen[m.index(u, v, w)] = 1;
            q.push({u, v, w});
          }
        }
      }
  return comps;
}

/// Fraction of (positive, negative) pairs ranked correctly, ties count one half.
inline double pair_count_auc(std::span<const double> s, std::span<const int> y) {
  double num = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / pairs;
}

inline double direct_dice(const MaskVolume& a, const MaskVolume& b) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    inter += a[i] && b[i];
    sa += a[i];
    sb += b[i];
  }
  return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

inline double direct_nll(const std::vector<double>& f, const std::vector<std::uint8_t>& x) {
  double s = 0;
  for (std::size_t i = 0; i < f.size(); ++i) s -= x[i] ? std::log(f[i]) : std::log(1 - f[i]);
  return s;
}

/// Zero-initialized biases put every background pre-activation of a binary
/// input exactly on the leaky-ReLU kink, where one-sided and central
/// derivatives disagree. Drawing them away from zero gives a generic point.
inline void randomize_biases(normshape::VaeModel<double>& model, std::uint64_t seed,
                             double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : model.parameters()) {
    if (p.name.size() < 5 || p.name.compare(p.name.size() - 5, 5, ".bias") != 0) continue;
    for (double& v : p.value.data) v = u(rng);
  }
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t step_reduced = 0;  ///< entries whose interval straddled a kink
  std::string worst;
};

/// Central differences on every parameter entry of a double-precision VAE.
/// The step starts at h = 1e-3 * max(1, |w|). Leaky ReLU is not
/// differentiable at 0, so when the estimates at h and h/10 disagree by more
/// than round-off the interval straddles a kink and h is reduced (at most
/// three times).
/// Relative error |a - n| / max(|a|, |n|, floor).
inline GradCheck check_vae_gradients(normshape::VaeModel<double>& model, const MaskVolume& mask,
                                     const std::vector<double>& eps, double kl_weight,
                                     double floor = 1e-6) {
  auto loss_value = [&]() {
    auto f = model.forward(mask, eps, kl_weight, false);
    return f.graph.value(f.loss).data[0];
  };
  for (auto& p : model.parameters()) p.zero_grad();
  {
    auto f = model.forward(mask, eps, kl_weight, true);
    f.graph.backward(f.loss);
  }
  const double base_loss = std::abs(loss_value());
  GradCheck out;
  for (auto& p : model.parameters()) {
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      double& w = p.value.data[i];
      const double w0 = w;
      auto central = [&](double h) {
        w = w0 + h;
        const double up = loss_value();
        w = w0 - h;
        const double down = loss_value();
        w = w0;
        return (up - down) / (2 * h);
      };
      double h = 1e-3 * std::max(1.0, std::abs(w0));
      double numeric = central(h);
      for (int shrink = 0; shrink < 3; ++shrink) {
        const double finer = central(h / 10);
        const double roundoff = 64 * std::numeric_limits<double>::epsilon() * base_loss / (h / 10);
        if (std::abs(finer - numeric) <=
            1e-4 * std::max({std::abs(finer), std::abs(numeric), floor}) + roundoff) {
          break;
        }
        if (shrink == 0) ++out.step_reduced;
        h /= 10;
        numeric = finer;
      }
      const double analytic = p.grad.data[i];
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace oracle
