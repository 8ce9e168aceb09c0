#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/quaternion.hpp"

namespace emcboot {

/// Flat square detector in the z = 0 plane. Pixel (px, py) is stored at
/// py * side + px and sits at (px - side/2, py - side/2, 0) in voxel units.
/// Pixels closer than mask_radius to the center are behind the beamstop.
struct Detector {
  int side = 0;
  double mask_radius = 0.0;
  std::vector<Vec3> coords;
  std::vector<std::uint8_t> mask;

  Detector() = default;
  Detector(int side_, double mask_radius_) : side(side_), mask_radius(mask_radius_) {
    require(side_ > 0, "detector side must be positive");
    require(mask_radius_ >= 0.0, "beamstop radius must be nonnegative");
    const auto n = static_cast<std::size_t>(side_) * side_;
    coords.resize(n);
    mask.resize(n);
    const double h = side_ / 2;
    for (int py = 0; py < side_; ++py)
      for (int px = 0; px < side_; ++px) {
        const std::size_t i = static_cast<std::size_t>(py) * side_ + px;
        coords[i] = {px - h, py - h, 0.0};
        mask[i] = norm(coords[i]) < mask_radius_ ? 1 : 0;
      }
  }

  std::size_t pixel_count() const { return coords.size(); }
  std::size_t unmasked_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m ? 0 : 1;
    return n;
  }
};

/// M_data frames on a shared detector, row-major (frame, pixel). Masked
/// pixels always hold zero.
struct FrameSet {
  Detector detector;
  std::size_t count = 0;
  std::vector<double> values;
  std::optional<std::vector<Quaternion>> true_rotations;
  std::optional<std::vector<double>> true_fluences;
  std::string label;

  FrameSet() = default;
  FrameSet(Detector det, std::size_t n_frames)
      : detector(std::move(det)), count(n_frames), values(n_frames * detector.pixel_count(), 0.0) {}

  std::size_t pixel_count() const { return detector.pixel_count(); }
  std::span<double> frame(std::size_t k) {
    return {values.data() + k * pixel_count(), pixel_count()};
  }
  std::span<const double> frame(std::size_t k) const {
    return {values.data() + k * pixel_count(), pixel_count()};
  }

  double frame_total(std::size_t k) const {
    double s = 0.0;
    for (double v : frame(k)) s += v;
    return s;
  }

  /// Mean count per unmasked pixel over all frames.
  double mean_unmasked_count() const {
    const std::size_t unmasked = detector.unmasked_count();
    if (count == 0 || unmasked == 0) return 0.0;
    double total = 0.0;
    for (double v : values) total += v;
    return total / (static_cast<double>(count) * static_cast<double>(unmasked));
  }

  void zero_masked() {
    for (std::size_t k = 0; k < count; ++k) {
      auto f = frame(k);
      for (std::size_t i = 0; i < f.size(); ++i)
        if (detector.mask[i]) f[i] = 0.0;
    }
  }

  /// New frame set holding frames `picks` (repeats allowed) in order.
  FrameSet subset(std::span<const std::size_t> picks) const {
    FrameSet out(detector, picks.size());
    out.label = label;
    const std::size_t m = pixel_count();
    for (std::size_t r = 0; r < picks.size(); ++r)
      std::copy_n(values.begin() + picks[r] * m, m, out.values.begin() + r * m);
    if (true_rotations) {
      out.true_rotations.emplace();
      for (auto k : picks) out.true_rotations->push_back((*true_rotations)[k]);
    }
    if (true_fluences) {
      out.true_fluences.emplace();
      for (auto k : picks) out.true_fluences->push_back((*true_fluences)[k]);
    }
    return out;
  }
};

}  // namespace emcboot
