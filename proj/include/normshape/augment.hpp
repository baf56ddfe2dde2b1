#pragma once

#include <array>
#include <cstdint>

#include "normshape/volume.hpp"

namespace normshape {

/// Sampling ranges for random similarity transforms. Translation is in voxels,
/// rotation in degrees (Euler angles about x, y, z), scale is isotropic.
struct AugmentRanges {
  std::array<double, 3> max_translation_voxels{4.0, 4.0, 2.0};
  std::array<double, 3> max_rotation_deg{15.0, 15.0, 15.0};
  std::array<double, 2> scale_range{0.9, 1.1};

  void validate() const;
  static AugmentRanges identity() { return {{0, 0, 0}, {0, 0, 0}, {1.0, 1.0}}; }
};

/// Concrete transform drawn from AugmentRanges.
struct SimilarityTransform {
  std::array<double, 3> translation_voxels{0, 0, 0};
  std::array<double, 3> rotation_deg{0, 0, 0};
  double scale = 1.0;
};

SimilarityTransform sample_similarity(const AugmentRanges& ranges, std::uint64_t seed);

/// Applies scale, then rotation (Rz * Ry * Rx), then translation about the
/// grid center, in physical coordinates. Output voxels are filled by inverse
/// mapping and nearest-neighbor lookup; samples outside the grid are 0.
MaskVolume apply_similarity(const MaskVolume& mask, const SimilarityTransform& transform);

MaskVolume random_similarity(const MaskVolume& mask, const AugmentRanges& ranges,
                             std::uint64_t seed);

}  // namespace normshape
