#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "normshape/volume.hpp"

namespace normshape {

using Vec3 = std::array<double, 3>;

/// Gaussian perturbation scales applied per generated shape.
struct ShapeJitter {
  double control_point_voxels = 1.5;  ///< sd of each control-point coordinate
  double radius_relative = 0.08;      ///< sd of the multiplicative radius noise
};

/// Template for a synthetic pancreas-like tube: a quadratic Bezier centerline
/// (head, body, tail) swept by a ball whose radius is interpolated linearly
/// head -> body -> tail. Radii are in x-voxel units.
struct ShapeGenParams {
  Dims grid_dims{48, 32, 16};
  Spacing spacing{1.0, 1.0, 2.0};
  std::array<Vec3, 3> control_points{{{13.0, 20.0, 8.0}, {24.0, 7.0, 8.0}, {37.0, 17.0, 8.5}}};
  Vec3 radius_profile{5.0, 4.0, 3.0};
  ShapeJitter jitter_sd{};
  std::uint64_t seed = 0;

  /// Throws InvalidArgument if an invariant does not hold.
  void validate() const;
};

/// Localized narrowing of the tube around a centerline position.
struct AbnormalityParams {
  double shrink_center_t = 0.5;
  double shrink_width = 0.4;  ///< full width at half depth, as a fraction of the centerline
  double shrink_factor = 0.45;
  bool volume_preserving = true;

  void validate() const;
};

/// Default template rescaled from the 48x32x16 reference grid to `grid`
/// (control points per axis, radii and jitter by the x ratio).
ShapeGenParams shape_params_for_grid(Dims grid, Spacing spacing);

MaskVolume gen_healthy(const ShapeGenParams& params);
MaskVolume gen_abnormal(const ShapeGenParams& params, const AbnormalityParams& ab);

struct CohortMember {
  MaskVolume mask;
  std::uint64_t seed = 0;
};

/// Generates n masks with seeds base_seed .. base_seed + n - 1. A member that
/// is not a single 6-connected component is regenerated with a fresh derived
/// seed (at most 10 retries); the seed actually used is reported.
std::vector<CohortMember> gen_cohort(std::size_t n, const ShapeGenParams& params,
                                     const std::optional<AbnormalityParams>& ab,
                                     std::uint64_t base_seed);

}  // namespace normshape
