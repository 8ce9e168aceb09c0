#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/frames.hpp"
#include "emcboot/parallel.hpp"
#include "emcboot/quaternion.hpp"
#include "emcboot/volume.hpp"

namespace emcboot {

/// Rotation-by-pixel slab of 2D intensities W_ij, row-major (rotation, pixel).
struct SliceStack {
  std::size_t rotations = 0;
  std::size_t pixels = 0;
  std::vector<double> values;

  SliceStack() = default;
  SliceStack(std::size_t m_rot, std::size_t m_pix)
      : rotations(m_rot), pixels(m_pix), values(m_rot * m_pix, 0.0) {}

  std::span<double> row(std::size_t j) { return {values.data() + j * pixels, pixels}; }
  std::span<const double> row(std::size_t j) const { return {values.data() + j * pixels, pixels}; }
};

inline constexpr std::size_t kRotationChunk = 64;
inline constexpr std::size_t kCompressChunks = 8;

/// Expansion: W_ij = sum_l f(p_l - R_j q_i) V_l for every unmasked pixel.
inline SliceStack expand(const IntensityVolume& vol, std::span<const Quaternion> rotations,
                         const Detector& det, unsigned workers = 0) {
  require(vol.side > 0, "expand: empty volume");
  SliceStack out(rotations.size(), det.pixel_count());
  const std::size_t chunks = (rotations.size() + kRotationChunk - 1) / kRotationChunk;
  const auto off = cell_offsets(vol.side);
  parallel_for(chunks, workers, [&](std::size_t c) {
    const std::size_t end = std::min(rotations.size(), (c + 1) * kRotationChunk);
    for (std::size_t j = c * kRotationChunk; j < end; ++j) {
      const Mat3 m = rotations[j].matrix();
      auto row = out.row(j);
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (det.mask[i]) continue;
        const Vec3 p = Quaternion::apply(m, det.coords[i]);
        Cell cell;
        if (interior_cell(p, vol.side, cell)) {
          const auto w = cell_weights(cell);
          const double* v0 = vol.values.data() + cell.base;
          double v = 0.0;
          for (int t = 0; t < 8; ++t) v += w[t] * v0[off[t]];
          row[i] = v;
          continue;
        }
        const Stencil st = interpolation_weights(p, vol.side);
        double v = 0.0;
        for (int t = 0; t < st.count; ++t) v += st.weight[t] * vol.values[st.index[t]];
        row[i] = v;
      }
    }
  });
  return out;
}

struct Compression {
  IntensityVolume volume;
  std::size_t empty_voxels = 0;  // voxels with zero total interpolation weight
};

/// Compression: the interpolation-weighted average of all slices,
///   V_l = sum_ij c_j f(p_l - R_j q_i) W_ij / sum_ij c_j f(p_l - R_j q_i),
/// with per-slice multiplicities c_j (all ones when `slice_weights` is
/// empty). Voxels without coverage come back zero and masked.
inline Compression compress(std::span<const double> slices, std::span<const Quaternion> rotations,
                            const Detector& det, int side,
                            std::span<const double> slice_weights = {}, unsigned workers = 0) {
  const std::size_t m_pix = det.pixel_count();
  require(slices.size() == rotations.size() * m_pix, "compress: slice shape mismatch");
  require(slice_weights.empty() || slice_weights.size() == rotations.size(),
          "compress: weight count mismatch");
  const std::size_t n_vox = IntensityVolume::voxel_count(side);
  struct Partial {
    std::vector<double> num, den;
    bool touched = false;
  };
  std::vector<double> num(n_vox, 0.0), den(n_vox, 0.0);
  const auto off = cell_offsets(side);
  // Few large chunks: every partial is a full volume that must be cleared and merged.
  const std::size_t span = std::max<std::size_t>(1, (rotations.size() + kCompressChunks - 1) / kCompressChunks);
  const std::size_t chunks = (rotations.size() + span - 1) / span;
  ordered_reduce<Partial>(
      chunks, workers, [&] { return Partial{std::vector<double>(n_vox), std::vector<double>(n_vox)}; },
      [&](std::size_t c, Partial& p) {
        const std::size_t end = std::min(rotations.size(), (c + 1) * span);
        p.touched = false;
        for (std::size_t j = c * span; j < end && !p.touched; ++j)
          p.touched = slice_weights.empty() || slice_weights[j] != 0.0;
        if (!p.touched) return;
        std::fill(p.num.begin(), p.num.end(), 0.0);
        std::fill(p.den.begin(), p.den.end(), 0.0);
        for (std::size_t j = c * span; j < end; ++j) {
          const double cj = slice_weights.empty() ? 1.0 : slice_weights[j];
          if (cj == 0.0) continue;
          const Mat3 m = rotations[j].matrix();
          const double* row = slices.data() + j * m_pix;
          for (std::size_t i = 0; i < m_pix; ++i) {
            if (det.mask[i]) continue;
            const Vec3 pt = Quaternion::apply(m, det.coords[i]);
            Cell cell;
            if (interior_cell(pt, side, cell)) {
              const auto w = cell_weights(cell);
              double* num0 = p.num.data() + cell.base;
              double* den0 = p.den.data() + cell.base;
              for (int t = 0; t < 8; ++t) {
                num0[off[t]] += cj * w[t] * row[i];
                den0[off[t]] += cj * w[t];
              }
              continue;
            }
            const Stencil st = interpolation_weights(pt, side);
            for (int t = 0; t < st.count; ++t) {
              const double w = cj * st.weight[t];
              p.num[st.index[t]] += w * row[i];
              p.den[st.index[t]] += w;
            }
          }
        }
      },
      [&](const Partial& p) {
        if (!p.touched) return;
        for (std::size_t l = 0; l < n_vox; ++l) {
          num[l] += p.num[l];
          den[l] += p.den[l];
        }
      });
  Compression out{IntensityVolume(side), 0};
  for (std::size_t l = 0; l < n_vox; ++l) {
    if (den[l] > 0.0) {
      out.volume.values[l] = num[l] / den[l];
    } else {
      out.volume.mask[l] = 1;
      ++out.empty_voxels;
    }
  }
  return out;
}

inline Compression compress(const SliceStack& slices, std::span<const Quaternion> rotations,
                            const Detector& det, int side,
                            std::span<const double> slice_weights = {}, unsigned workers = 0) {
  return compress(std::span<const double>(slices.values), rotations, det, side, slice_weights,
                  workers);
}

/// Compression of measured frames at given per-frame orientations.
inline Compression compress_frames(const FrameSet& frames, std::span<const Quaternion> rotations,
                                   int side, unsigned workers = 0) {
  require(rotations.size() == frames.count, "compress_frames: one rotation per frame required");
  return compress(std::span<const double>(frames.values), rotations, frames.detector, side, {},
                  workers);
}

}  // namespace emcboot
