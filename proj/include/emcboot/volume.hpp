#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/quaternion.hpp"

namespace emcboot {

/// Cubic grid of nonnegative intensities. Voxel (ix, iy, iz) sits at
/// coordinates (ix - side/2, iy - side/2, iz - side/2) and is stored at
/// (iz * side + iy) * side + ix. mask[l] != 0 marks a voxel without data.
struct IntensityVolume {
  int side = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;

  IntensityVolume() = default;
  explicit IntensityVolume(int side_, double fill = 0.0)
      : side(side_), values(voxel_count(side_), fill), mask(voxel_count(side_), 0) {}

  static std::size_t voxel_count(int side) {
    const auto s = static_cast<std::size_t>(side);
    return s * s * s;
  }

  std::size_t size() const { return values.size(); }
  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(iz) * side + iy) * side + ix;
  }
  Vec3 coordinate(std::size_t l) const {
    const auto s = static_cast<std::size_t>(side);
    const double h = side / 2;
    return {static_cast<double>(l % s) - h, static_cast<double>((l / s) % s) - h,
            static_cast<double>(l / (s * s)) - h};
  }
  double radius(std::size_t l) const { return norm(coordinate(l)); }

  double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

  /// Mean over voxels that are not masked.
  double unmasked_mean() const {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t l = 0; l < values.size(); ++l)
      if (!mask[l]) {
        total += values[l];
        ++count;
      }
    return count ? total / static_cast<double>(count) : 0.0;
  }
};

/// Masks (and zeroes) every voxel closer than `radius` to the origin.
inline void apply_beamstop(IntensityVolume& vol, double radius) {
  require(radius >= 0.0, "beamstop radius must be nonnegative");
  for (std::size_t l = 0; l < vol.size(); ++l)
    if (vol.radius(l) < radius) {
      vol.values[l] = 0.0;
      vol.mask[l] = 1;
    }
}

/// Trilinear interpolation stencil: the grid voxels (at most eight) with
/// nonzero weight f(p_l - q). Corners outside the grid are dropped, so the
/// weights sum to one only when the whole cell is inside.
struct Stencil {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
  int count = 0;
};

inline Stencil interpolation_weights(const Vec3& point, int side) {
  Stencil st;
  const double h = side / 2;
  int base[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    const double u = point[a] + h;
    if (!(u > -1.0 && u < static_cast<double>(side))) return st;
    const double f = std::floor(u);
    base[a] = static_cast<int>(f);
    frac[a] = u - f;
  }
  for (int c = 0; c < 8; ++c) {
    int idx[3];
    double w = 1.0;
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const int bit = (c >> a) & 1;
      idx[a] = base[a] + bit;
      w *= bit ? frac[a] : 1.0 - frac[a];
      inside = inside && idx[a] >= 0 && idx[a] < side;
    }
    if (!inside || w == 0.0) continue;
    st.index[st.count] = (static_cast<std::size_t>(idx[2]) * side + idx[1]) * side + idx[0];
    st.weight[st.count] = w;
    ++st.count;
  }
  return st;
}

/// Grid cell whose eight corners all lie inside the volume.
struct Cell {
  std::size_t base = 0;  // index of the lowest corner
  double fx = 0.0, fy = 0.0, fz = 0.0;
};

/// Fast path of interpolation_weights: true when `point` is in the interior
/// so no corner has to be dropped.
inline bool interior_cell(const Vec3& point, int side, Cell& c) {
  const double h = side / 2;
  const double hi = side - 1;
  const double ux = point[0] + h, uy = point[1] + h, uz = point[2] + h;
  if (!(ux >= 0.0 && ux < hi && uy >= 0.0 && uy < hi && uz >= 0.0 && uz < hi)) return false;
  const auto ix = static_cast<std::size_t>(ux), iy = static_cast<std::size_t>(uy),
             iz = static_cast<std::size_t>(uz);
  c.fx = ux - static_cast<double>(ix);
  c.fy = uy - static_cast<double>(iy);
  c.fz = uz - static_cast<double>(iz);
  const auto s = static_cast<std::size_t>(side);
  c.base = (iz * s + iy) * s + ix;
  return true;
}

/// The eight trilinear weights of an interior cell, corner c at offset
/// (c & 1, (c >> 1) & 1, (c >> 2) & 1).
inline std::array<double, 8> cell_weights(const Cell& c) {
  const double gx = 1.0 - c.fx, gy = 1.0 - c.fy, gz = 1.0 - c.fz;
  return {gx * gy * gz, c.fx * gy * gz, gx * c.fy * gz, c.fx * c.fy * gz,
          gx * gy * c.fz, c.fx * gy * c.fz, gx * c.fy * c.fz, c.fx * c.fy * c.fz};
}

inline std::array<std::size_t, 8> cell_offsets(int side) {
  const auto sy = static_cast<std::size_t>(side), sz = sy * sy;
  return {0, 1, sy, sy + 1, sz, sz + 1, sz + sy, sz + sy + 1};
}

/// Value of the trilinear interpolant at `point`; fails (returns false)
/// when the point leaves the convex hull of the voxel centers.
inline bool sample_inside(const IntensityVolume& vol, const Vec3& point, double& value) {
  const int n = vol.side;
  const double h = n / 2;
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double u = point[a] + h;
    if (!(u >= 0.0 && u <= n - 1)) return false;
    i0[a] = std::min(static_cast<int>(u), n - 2);
    f[a] = u - i0[a];
  }
  const std::size_t sx = 1, sy = static_cast<std::size_t>(n), sz = sy * sy;
  const std::size_t b = i0[2] * sz + i0[1] * sy + i0[0];
  const double* v = vol.values.data();
  const double c00 = v[b] * (1 - f[0]) + v[b + sx] * f[0];
  const double c10 = v[b + sy] * (1 - f[0]) + v[b + sy + sx] * f[0];
  const double c01 = v[b + sz] * (1 - f[0]) + v[b + sz + sx] * f[0];
  const double c11 = v[b + sz + sy] * (1 - f[0]) + v[b + sz + sy + sx] * f[0];
  value = (c00 * (1 - f[1]) + c10 * f[1]) * (1 - f[2]) + (c01 * (1 - f[1]) + c11 * f[1]) * f[2];
  return true;
}

}  // namespace emcboot
