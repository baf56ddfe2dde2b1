#include "normshape/synth.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "normshape/error.hpp"
#include "normshape/parallel.hpp"
#include "normshape/random.hpp"

namespace normshape {

namespace {

constexpr std::size_t kMinForeground = 50;
constexpr int kMaxBisection = 40;
constexpr double kVolumeTolerance = 0.02;
constexpr int kMaxRetries = 10;

struct Tube {
  std::array<Vec3, 3> control_mm;  // physical control points
  Vec3 radius_mm;                  // head, body, tail
};

Vec3 bezier(const std::array<Vec3, 3>& p, double t) {
  const double a = (1 - t) * (1 - t);
  const double b = 2 * (1 - t) * t;
  const double c = t * t;
  return {a * p[0][0] + b * p[1][0] + c * p[2][0], a * p[0][1] + b * p[1][1] + c * p[2][1],
          a * p[0][2] + b * p[1][2] + c * p[2][2]};
}

double base_radius(const Vec3& r, double t) {
  return t <= 0.5 ? r[0] + (r[1] - r[0]) * (t / 0.5) : r[1] + (r[2] - r[1]) * ((t - 0.5) / 0.5);
}

// Raised-cosine dip reaching `factor` at t = center; shrink_width is its full
// width at half depth, so the support is center +- width.
double shrink_profile(const AbnormalityParams& ab, double t) {
  const double u = t - ab.shrink_center_t;
  if (std::abs(u) >= ab.shrink_width) return 1.0;
  const double bump = 0.5 * (1.0 + std::cos(std::numbers::pi * u / ab.shrink_width));
  return 1.0 - (1.0 - ab.shrink_factor) * bump;
}

Tube jittered_tube(const ShapeGenParams& params) {
  Rng rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tube tube;
  const double s[3] = {params.spacing.sx, params.spacing.sy, params.spacing.sz};
  for (int i = 0; i < 3; ++i) {
    for (int a = 0; a < 3; ++a) {
      const double noise = params.jitter_sd.control_point_voxels * normal(rng);
      tube.control_mm[i][a] = (params.control_points[i][a] + noise) * s[a];
    }
  }
  for (int i = 0; i < 3; ++i) {
    const double factor = std::max(0.2, 1.0 + params.jitter_sd.radius_relative * normal(rng));
    tube.radius_mm[i] = params.radius_profile[i] * params.spacing.sx * factor;
  }
  return tube;
}

// Union of balls centered on densely sampled centerline points.
MaskVolume rasterize(const ShapeGenParams& params, const Tube& tube,
                     const std::function<double(double)>& radius_at) {
  const Dims& d = params.grid_dims;
  const double s[3] = {params.spacing.sx, params.spacing.sy, params.spacing.sz};
  MaskVolume mask(d, params.spacing);

  double length = 0.0;
  Vec3 prev = bezier(tube.control_mm, 0.0);
  for (int i = 1; i <= 64; ++i) {
    const Vec3 p = bezier(tube.control_mm, i / 64.0);
    length += std::hypot(p[0] - prev[0], p[1] - prev[1], p[2] - prev[2]);
    prev = p;
  }
  const int samples = std::max(64, static_cast<int>(std::ceil(length / 0.2)));
  for (int i = 0; i <= samples; ++i) {
    const double t = static_cast<double>(i) / samples;
    const Vec3 c = bezier(tube.control_mm, t);
    const double r = radius_at(t);
    if (r <= 0.0) continue;
    int lo[3];
    int hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(0, static_cast<int>(std::ceil((c[a] - r) / s[a])));
      hi[a] = std::min(d[a] - 1, static_cast<int>(std::floor((c[a] + r) / s[a])));
    }
    const double r2 = r * r;
    for (int z = lo[2]; z <= hi[2]; ++z) {
      const double dz = z * s[2] - c[2];
      for (int y = lo[1]; y <= hi[1]; ++y) {
        const double dy = y * s[1] - c[1];
        for (int x = lo[0]; x <= hi[0]; ++x) {
          const double dx = x * s[0] - c[0];
          if (dx * dx + dy * dy + dz * dz <= r2) mask.set(x, y, z, true);
        }
      }
    }
  }
  return mask;
}

void check_degenerate(const MaskVolume& mask, std::uint64_t seed) {
  if (mask.foreground_count() < kMinForeground) {
    throw Error(ErrorKind::DegenerateShape,
                "seed " + std::to_string(seed) + " produced " +
                    std::to_string(mask.foreground_count()) + " foreground voxels");
  }
}

}  // namespace

void ShapeGenParams::validate() const {
  if (grid_dims.nx <= 0 || grid_dims.ny <= 0 || grid_dims.nz <= 0) {
    throw Error(ErrorKind::InvalidArgument, "grid dims must be positive");
  }
  if (!(spacing.sx > 0) || !(spacing.sy > 0) || !(spacing.sz > 0)) {
    throw Error(ErrorKind::InvalidSpacing, "spacing must be positive");
  }
  for (double r : radius_profile) {
    if (!(r > 0)) throw Error(ErrorKind::InvalidArgument, "radii must be positive");
  }
  if (jitter_sd.control_point_voxels < 0 || jitter_sd.radius_relative < 0) {
    throw Error(ErrorKind::InvalidArgument, "jitter sd must be non-negative");
  }
  const double r_max = *std::max_element(radius_profile.begin(), radius_profile.end()) * spacing.sx;
  for (const Vec3& cp : control_points) {
    for (int a = 0; a < 3; ++a) {
      const double lo = cp[a] * spacing[a];
      const double hi = (grid_dims[a] - 1 - cp[a]) * spacing[a];
      if (lo < r_max || hi < r_max) {
        throw Error(ErrorKind::InvalidArgument, "control point closer to the grid border than the "
                                                "largest radius");
      }
    }
  }
}

void AbnormalityParams::validate() const {
  if (!(shrink_factor > 0.0) || shrink_factor > 1.0) {
    throw Error(ErrorKind::InvalidArgument, "shrink_factor must lie in (0, 1]");
  }
  if (!(shrink_width > 0.0) || shrink_width > 1.0) {
    throw Error(ErrorKind::InvalidArgument, "shrink_width must lie in (0, 1]");
  }
  if (shrink_center_t < 0.0 || shrink_center_t > 1.0) {
    throw Error(ErrorKind::InvalidArgument, "shrink_center_t must lie in [0, 1]");
  }
}

ShapeGenParams shape_params_for_grid(Dims grid, Spacing spacing) {
  ShapeGenParams p;
  const Dims ref = p.grid_dims;
  const double ratio[3] = {double(grid.nx) / ref.nx, double(grid.ny) / ref.ny,
                           double(grid.nz) / ref.nz};
  for (auto& c : p.control_points) {
    for (int a = 0; a < 3; ++a) c[a] *= ratio[a];
  }
  for (double& r : p.radius_profile) r *= ratio[0];
  p.jitter_sd.control_point_voxels *= ratio[0];
  p.grid_dims = grid;
  p.spacing = spacing;
  return p;
}

MaskVolume gen_healthy(const ShapeGenParams& params) {
  params.validate();
  const Tube tube = jittered_tube(params);
  MaskVolume mask =
      rasterize(params, tube, [&](double t) { return base_radius(tube.radius_mm, t); });
  check_degenerate(mask, params.seed);
  return mask;
}

MaskVolume gen_abnormal(const ShapeGenParams& params, const AbnormalityParams& ab) {
  params.validate();
  ab.validate();
  const Tube tube = jittered_tube(params);
  auto shaped = [&](double scale) {
    return rasterize(params, tube, [&](double t) {
      return scale * base_radius(tube.radius_mm, t) * shrink_profile(ab, t);
    });
  };
  if (!ab.volume_preserving || ab.shrink_factor == 1.0) {
    MaskVolume mask = shaped(1.0);
    check_degenerate(mask, params.seed);
    return mask;
  }

  const MaskVolume healthy =
      rasterize(params, tube, [&](double t) { return base_radius(tube.radius_mm, t); });
  const double target = static_cast<double>(healthy.foreground_count());
  auto deviation = [&](const MaskVolume& m) {
    return (static_cast<double>(m.foreground_count()) - target) / target;
  };

  // Voxel count is non-decreasing in the global radius scale.
  double lo = 1.0;
  double hi = 2.5;
  for (int it = 0; it < kMaxBisection; ++it) {
    const double mid = 0.5 * (lo + hi);
    MaskVolume mask = shaped(mid);
    const double dev = deviation(mask);
    if (std::abs(dev) <= kVolumeTolerance) {
      check_degenerate(mask, params.seed);
      return mask;
    }
    (dev < 0 ? lo : hi) = mid;
  }
  throw Error(ErrorKind::VolumeMatchFailed,
              "seed " + std::to_string(params.seed) + ": no radius scale within 2% volume");
}

std::vector<CohortMember> gen_cohort(std::size_t n, const ShapeGenParams& params,
                                     const std::optional<AbnormalityParams>& ab,
                                     std::uint64_t base_seed) {
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "cohort size must be at least 1");
  std::vector<CohortMember> out(n);
  parallel_for(n, [&](std::size_t i) {
    const std::uint64_t seed = base_seed + i;
    ShapeGenParams p = params;
    for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
      p.seed = attempt == 0 ? seed : derive_seed(seed, static_cast<std::uint64_t>(attempt));
      try {
        MaskVolume m = ab ? gen_abnormal(p, *ab) : gen_healthy(p);
        if (connected_components(m) == 1) {
          out[i] = {std::move(m), p.seed};
          return;
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::DegenerateShape && e.kind() != ErrorKind::VolumeMatchFailed) {
          throw;
        }
      }
    }
    throw Error(ErrorKind::GenerationExhausted,
                "seed " + std::to_string(seed) + " failed after " + std::to_string(kMaxRetries) +
                    " retries");
  });
  return out;
}

}  // namespace normshape
