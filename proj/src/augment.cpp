#include "normshape/augment.hpp"

#include <cmath>
#include <numbers>

#include "normshape/error.hpp"
#include "normshape/random.hpp"

namespace normshape {

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat3 rotation(const std::array<double, 3>& deg) {
  const double rx = deg[0] * std::numbers::pi / 180.0;
  const double ry = deg[1] * std::numbers::pi / 180.0;
  const double rz = deg[2] * std::numbers::pi / 180.0;
  const Mat3 mx{{{1, 0, 0}, {0, std::cos(rx), -std::sin(rx)}, {0, std::sin(rx), std::cos(rx)}}};
  const Mat3 my{{{std::cos(ry), 0, std::sin(ry)}, {0, 1, 0}, {-std::sin(ry), 0, std::cos(ry)}}};
  const Mat3 mz{{{std::cos(rz), -std::sin(rz), 0}, {std::sin(rz), std::cos(rz), 0}, {0, 0, 1}}};
  return multiply(mz, multiply(my, mx));
}

}  // namespace

void AugmentRanges::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (max_translation_voxels[a] < 0 || max_rotation_deg[a] < 0) {
      throw Error(ErrorKind::InvalidArgument, "augmentation ranges must be non-negative");
    }
  }
  if (!(scale_range[0] > 0) || scale_range[0] > 1.0 || scale_range[1] < 1.0) {
    throw Error(ErrorKind::InvalidArgument, "scale range must satisfy 0 < lo <= 1 <= hi");
  }
}

SimilarityTransform sample_similarity(const AugmentRanges& ranges, std::uint64_t seed) {
  ranges.validate();
  Rng rng(seed);
  auto uniform = [&](double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  SimilarityTransform t;
  for (int a = 0; a < 3; ++a) {
    t.translation_voxels[a] =
        uniform(-ranges.max_translation_voxels[a], ranges.max_translation_voxels[a]);
  }
  for (int a = 0; a < 3; ++a) {
    t.rotation_deg[a] = uniform(-ranges.max_rotation_deg[a], ranges.max_rotation_deg[a]);
  }
  t.scale = uniform(ranges.scale_range[0], ranges.scale_range[1]);
  return t;
}

MaskVolume apply_similarity(const MaskVolume& mask, const SimilarityTransform& transform) {
  const Dims& d = mask.dims();
  const Spacing& sp = mask.spacing();
  const double s[3] = {sp.sx, sp.sy, sp.sz};
  double center[3];
  double shift[3];
  for (int a = 0; a < 3; ++a) {
    center[a] = 0.5 * (d[a] - 1) * s[a];
    shift[a] = transform.translation_voxels[a] * s[a];
  }
  // Inverse map: x = c + R^T (y - c - t) / scale.
  const Mat3 r = rotation(transform.rotation_deg);
  const double inv_scale = 1.0 / transform.scale;

  MaskVolume out(d, sp);
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const double q[3] = {x * s[0] - center[0] - shift[0], y * s[1] - center[1] - shift[1],
                             z * s[2] - center[2] - shift[2]};
        int src[3];
        for (int a = 0; a < 3; ++a) {
          const double v = (r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2]) * inv_scale;
          src[a] = static_cast<int>(std::lround((center[a] + v) / s[a]));
        }
        if (mask.contains(src[0], src[1], src[2]) && mask.at(src[0], src[1], src[2])) {
          out.set(x, y, z, true);
        }
      }
    }
  }
  return out;
}

MaskVolume random_similarity(const MaskVolume& mask, const AugmentRanges& ranges,
                             std::uint64_t seed) {
  return apply_similarity(mask, sample_similarity(ranges, seed));
}

}  // namespace normshape
