#include "normshape/volume.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "normshape/error.hpp"

namespace normshape {

namespace {

void check_dims(const Dims& dims) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) {
    throw Error(ErrorKind::InvalidArgument, "dimensions must be positive");
  }
}

void check_spacing(const Spacing& s) {
  if (!(s.sx > 0.0) || !(s.sy > 0.0) || !(s.sz > 0.0) || !std::isfinite(s.sx) ||
      !std::isfinite(s.sy) || !std::isfinite(s.sz)) {
    throw Error(ErrorKind::InvalidSpacing, "spacing components must be positive and finite");
  }
}

void check_same_dims(const Dims& a, const Dims& b) {
  if (!(a == b)) throw Error(ErrorKind::DimMismatch, "volume dimensions differ");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Header: magic line, dims line, spacing line, "BINARY" line.
struct Header {
  Dims dims;
  Spacing spacing;
};

Header read_header(std::istream& in, std::string_view magic, const std::filesystem::path& path) {
  std::string line;
  auto fail = [&](const std::string& why) {
    throw Error(ErrorKind::MalformedHeader, path.string() + ": " + why);
  };
  if (!std::getline(in, line) || line != magic) fail("bad magic");
  Header h;
  if (!std::getline(in, line)) fail("missing dims line");
  {
    std::istringstream ss(line);
    std::string extra;
    if (!(ss >> h.dims.nx >> h.dims.ny >> h.dims.nz) || (ss >> extra)) fail("bad dims line");
    if (h.dims.nx <= 0 || h.dims.ny <= 0 || h.dims.nz <= 0) fail("non-positive dims");
  }
  if (!std::getline(in, line)) fail("missing spacing line");
  {
    double v[3];
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (double& x : v) {
      while (p < end && *p == ' ') ++p;
      auto res = std::from_chars(p, end, x);
      if (res.ec != std::errc()) fail("bad spacing line");
      p = res.ptr;
    }
    while (p < end && *p == ' ') ++p;
    if (p != end) fail("bad spacing line");
    h.spacing = {v[0], v[1], v[2]};
    if (!(v[0] > 0) || !(v[1] > 0) || !(v[2] > 0)) fail("non-positive spacing");
  }
  if (!std::getline(in, line) || line != "BINARY") fail("missing BINARY marker");
  return h;
}

void write_header(std::ostream& out, std::string_view magic, const Dims& d, const Spacing& s) {
  out << magic << '\n'
      << d.nx << ' ' << d.ny << ' ' << d.nz << '\n'
      << format_double(s.sx) << ' ' << format_double(s.sy) << ' ' << format_double(s.sz) << '\n'
      << "BINARY\n";
}

// Reads the remaining bytes of the stream.
std::vector<char> read_payload(std::istream& in) {
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

MaskVolume::MaskVolume(Dims dims, Spacing spacing) : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  data_.assign(dims.count(), 0);
}

MaskVolume::MaskVolume(Dims dims, Spacing spacing, std::vector<std::uint8_t> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  check_dims(dims);
  check_spacing(spacing);
  if (data_.size() != dims.count()) {
    throw Error(ErrorKind::SizeMismatch, "data length " + std::to_string(data_.size()) +
                                             " != " + std::to_string(dims.count()));
  }
  for (std::uint8_t v : data_) {
    if (v > 1) throw Error(ErrorKind::NonBinaryVoxel, "voxel value " + std::to_string(v));
  }
}

std::size_t MaskVolume::foreground_count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

ScalarField::ScalarField(Dims dims, Spacing spacing) : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  data_.assign(dims.count(), 0.0);
}

ScalarField::ScalarField(Dims dims, Spacing spacing, std::vector<double> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  check_dims(dims);
  check_spacing(spacing);
  if (data_.size() != dims.count()) {
    throw Error(ErrorKind::SizeMismatch, "field length does not match dims");
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, "non-finite field value");
  }
}

MaskVolume ScalarField::binarize(double threshold) const {
  std::vector<std::uint8_t> out(data_.size());
  for (std::size_t i = 0; i < data_.size(); ++i) out[i] = data_[i] >= threshold ? 1 : 0;
  return MaskVolume(dims_, spacing_, std::move(out));
}

MaskVolume load_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  const Header h = read_header(in, "MVOL 1", path);
  std::vector<char> payload = read_payload(in);
  if (payload.size() != h.dims.count()) {
    throw Error(ErrorKind::SizeMismatch, path.string() + ": payload has " +
                                             std::to_string(payload.size()) + " bytes, expected " +
                                             std::to_string(h.dims.count()));
  }
  std::vector<std::uint8_t> data(payload.begin(), payload.end());
  return MaskVolume(h.dims, h.spacing, std::move(data));
}

void save_mask(const MaskVolume& mask, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  write_header(out, "MVOL 1", mask.dims(), mask.spacing());
  out.write(reinterpret_cast<const char*>(mask.data().data()),
            static_cast<std::streamsize>(mask.data().size()));
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
}

ScalarField load_field(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  const Header h = read_header(in, "FVOL 1", path);
  std::vector<char> payload = read_payload(in);
  if (payload.size() != h.dims.count() * 4) {
    throw Error(ErrorKind::SizeMismatch, path.string() + ": float payload length mismatch");
  }
  std::vector<double> data(h.dims.count());
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + b])) << (8 * b);
    }
    data[i] = std::bit_cast<float>(bits);
  }
  return ScalarField(h.dims, h.spacing, std::move(data));
}

void save_field(const ScalarField& field, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  write_header(out, "FVOL 1", field.dims(), field.spacing());
  std::vector<char> payload(field.data().size() * 4);
  for (std::size_t i = 0; i < field.data().size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(field.data()[i]));
    for (int b = 0; b < 4; ++b) payload[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
}

MaskVolume resample(const MaskVolume& mask, Spacing target) {
  check_spacing(target);
  const Dims& in = mask.dims();
  const Spacing& s = mask.spacing();
  Dims out_dims;
  int* out_ext[3] = {&out_dims.nx, &out_dims.ny, &out_dims.nz};
  std::array<std::vector<int>, 3> lookup;
  for (int a = 0; a < 3; ++a) {
    const double ratio = target[a] / s[a];
    const int n = std::max(1, static_cast<int>(std::lround(in[a] * s[a] / target[a])));
    *out_ext[a] = n;
    lookup[a].resize(n);
    for (int o = 0; o < n; ++o) {
      // Output voxel center (o + 0.5) in input index units; its containing
      // input voxel is the one whose center is nearest.
      const int i = static_cast<int>(std::floor((o + 0.5) * ratio));
      lookup[a][o] = std::clamp(i, 0, in[a] - 1);
    }
  }
  MaskVolume out(out_dims, target);
  for (int z = 0; z < out_dims.nz; ++z) {
    for (int y = 0; y < out_dims.ny; ++y) {
      for (int x = 0; x < out_dims.nx; ++x) {
        out.set(x, y, z, mask.at(lookup[0][x], lookup[1][y], lookup[2][z]) != 0);
      }
    }
  }
  return out;
}

std::array<double, 3> centroid(const MaskVolume& mask) {
  const Dims& d = mask.dims();
  double sum[3] = {0, 0, 0};
  std::size_t n = 0;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        if (mask.at(x, y, z)) {
          sum[0] += x;
          sum[1] += y;
          sum[2] += z;
          ++n;
        }
      }
    }
  }
  if (n == 0) throw Error(ErrorKind::EmptyMask, "mask has no foreground");
  return {sum[0] / n, sum[1] / n, sum[2] / n};
}

MaskVolume center_in_grid(const MaskVolume& mask, Dims target) {
  check_dims(target);
  const Dims& d = mask.dims();
  int lo[3] = {d.nx, d.ny, d.nz};
  int hi[3] = {-1, -1, -1};
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        if (!mask.at(x, y, z)) continue;
        const int p[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a]);
        }
      }
    }
  }
  if (hi[0] < 0) throw Error(ErrorKind::EmptyMask, "cannot center an empty mask");
  const auto c = centroid(mask);
  int offset[3];
  for (int a = 0; a < 3; ++a) {
    const int extent = hi[a] - lo[a] + 1;
    if (extent > target[a]) {
      throw Error(ErrorKind::DoesNotFit, "foreground extent " + std::to_string(extent) +
                                             " exceeds target " + std::to_string(target[a]) +
                                             " on axis " + std::to_string(a));
    }
    const int want = target[a] / 2 - static_cast<int>(std::lround(c[a]));
    offset[a] = std::clamp(want, -lo[a], target[a] - 1 - hi[a]);
  }
  MaskVolume out(target, mask.spacing());
  for (int z = lo[2]; z <= hi[2]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[0]; x <= hi[0]; ++x) {
        if (mask.at(x, y, z)) out.set(x + offset[0], y + offset[1], z + offset[2], true);
      }
    }
  }
  return out;
}

MaskVolume translate(const MaskVolume& mask, int dx, int dy, int dz) {
  const Dims& d = mask.dims();
  MaskVolume out(d, mask.spacing());
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        if (mask.at(x, y, z) && out.contains(x + dx, y + dy, z + dz)) {
          out.set(x + dx, y + dy, z + dz, true);
        }
      }
    }
  }
  return out;
}

double dice(const MaskVolume& a, const MaskVolume& b) {
  check_same_dims(a.dims(), b.dims());
  std::size_t inter = 0;
  std::size_t na = 0;
  std::size_t nb = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    na += a[i];
    nb += b[i];
    inter += a[i] & b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double volume_mm3(const MaskVolume& mask) {
  return static_cast<double>(mask.foreground_count()) * mask.spacing().voxel_volume();
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One pass of the lower-envelope squared distance transform along a line of
// n samples: out[p] = min_q f[q] + (w * (p - q))^2. Infinite samples are not
// part of the envelope.
void edt_line(const double* f, double* out, int n, double w, std::vector<int>& v,
              std::vector<double>& z) {
  const double w2 = w * w;
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const int r = v[k];
      s = ((f[q] + w2 * q * q) - (f[r] + w2 * r * r)) / (2.0 * w2 * (q - r));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates the only one left.
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out, out + n, kInf);
    return;
  }
  int j = 0;
  for (int p = 0; p < n; ++p) {
    while (z[j + 1] < p) ++j;
    const double d = p - v[j];
    out[p] = f[v[j]] + w2 * d * d;
  }
}

// Squared distance (mm^2) from every voxel to the nearest voxel whose class is
// `target`.
std::vector<double> squared_distance_to(const MaskVolume& mask, std::uint8_t target) {
  const Dims& d = mask.dims();
  const Spacing& s = mask.spacing();
  std::vector<double> grid(d.count());
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = mask[i] == target ? 0.0 : kInf;

  const int n_max = std::max({d.nx, d.ny, d.nz});
  std::vector<double> line(n_max), result(n_max), zbuf(n_max + 1);
  std::vector<int> vbuf(n_max);
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d.nx),
                                 static_cast<std::size_t>(d.nx) * d.ny};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    const int u_axis = axis == 0 ? 1 : 0;
    const int v_axis = axis == 2 ? 1 : 2;
    for (int b = 0; b < d[v_axis]; ++b) {
      for (int a = 0; a < d[u_axis]; ++a) {
        const std::size_t base = a * stride[u_axis] + b * stride[v_axis];
        for (int i = 0; i < n; ++i) line[i] = grid[base + i * stride[axis]];
        edt_line(line.data(), result.data(), n, s[axis], vbuf, zbuf);
        for (int i = 0; i < n; ++i) grid[base + i * stride[axis]] = result[i];
      }
    }
  }
  return grid;
}

}  // namespace

ScalarField signed_distance(const MaskVolume& mask) {
  const std::size_t fg = mask.foreground_count();
  if (fg == 0 || fg == mask.data().size()) {
    throw Error(ErrorKind::UniformMask, "signed distance needs both classes present");
  }
  const auto to_fg = squared_distance_to(mask, 1);
  const auto to_bg = squared_distance_to(mask, 0);
  std::vector<double> out(mask.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = mask[i] ? -std::sqrt(to_bg[i]) : std::sqrt(to_fg[i]);
  }
  return ScalarField(mask.dims(), mask.spacing(), std::move(out));
}

int connected_components(const MaskVolume& mask) {
  const Dims& d = mask.dims();
  std::vector<std::uint8_t> seen(d.count(), 0);
  std::vector<std::size_t> stack;
  int components = 0;
  for (std::size_t start = 0; start < seen.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    ++components;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const int x = static_cast<int>(i % d.nx);
      const int y = static_cast<int>((i / d.nx) % d.ny);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(d.nx) * d.ny));
      const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                            {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& p : nb) {
        if (!mask.contains(p[0], p[1], p[2])) continue;
        const std::size_t j = mask.index(p[0], p[1], p[2]);
        if (mask[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return components;
}

}  // namespace normshape
