#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace normshape {

/// Voxel counts along x, y, z.
struct Dims {
  int nx = 1;
  int ny = 1;
  int nz = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  int operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  bool operator==(const Dims&) const = default;
};

/// Millimeters per voxel along x, y, z.
struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;

  double operator[](int axis) const { return axis == 0 ? sx : axis == 1 ? sy : sz; }
  double voxel_volume() const { return sx * sy * sz; }
  bool operator==(const Spacing&) const = default;
};

/// Binary voxel grid, x-fastest storage.
class MaskVolume {
 public:
  MaskVolume() = default;
  /// All-background volume.
  MaskVolume(Dims dims, Spacing spacing);
  /// Validates every invariant; throws Error on violation.
  MaskVolume(Dims dims, Spacing spacing, std::vector<std::uint8_t> data);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  const std::vector<std::uint8_t>& data() const { return data_; }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.ny) * z);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.nx && y < dims_.ny && z < dims_.nz;
  }
  std::uint8_t at(int x, int y, int z) const { return data_[index(x, y, z)]; }
  void set(int x, int y, int z, bool on) { data_[index(x, y, z)] = on ? 1 : 0; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }

  std::size_t foreground_count() const;
  bool operator==(const MaskVolume&) const = default;

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<std::uint8_t> data_{0};
};

/// Real-valued voxel grid (probability maps, distance maps).
class ScalarField {
 public:
  ScalarField() = default;
  ScalarField(Dims dims, Spacing spacing);
  ScalarField(Dims dims, Spacing spacing, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Voxels with value >= threshold become foreground.
  MaskVolume binarize(double threshold = 0.5) const;

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<double> data_{0.0};
};

MaskVolume load_mask(const std::filesystem::path& path);
void save_mask(const MaskVolume& mask, const std::filesystem::path& path);

/// FVOL files store values as little-endian float32.
ScalarField load_field(const std::filesystem::path& path);
void save_field(const ScalarField& field, const std::filesystem::path& path);

/// Nearest-neighbor resampling to a new voxel spacing.
MaskVolume resample(const MaskVolume& mask, Spacing target);

/// Integer translation of the foreground so its rounded centroid sits at
/// floor(target / 2). When the centered placement would clip, the offset is
/// clamped so the bounding box stays inside the grid.
MaskVolume center_in_grid(const MaskVolume& mask, Dims target);

/// Integer translation by (dx, dy, dz) voxels; voxels leaving the grid are dropped.
MaskVolume translate(const MaskVolume& mask, int dx, int dy, int dz);

double dice(const MaskVolume& a, const MaskVolume& b);
double volume_mm3(const MaskVolume& mask);

/// Exact Euclidean distance (mm) from each voxel center to the nearest voxel
/// center of the opposite class. Negative inside the foreground.
ScalarField signed_distance(const MaskVolume& mask);

/// Number of 6-connected foreground components.
int connected_components(const MaskVolume& mask);

/// Foreground centroid in voxel coordinates. Throws EmptyMask.
std::array<double, 3> centroid(const MaskVolume& mask);

}  // namespace normshape
