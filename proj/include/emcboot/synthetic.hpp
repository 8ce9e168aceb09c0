#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/frames.hpp"
#include "emcboot/parallel.hpp"
#include "emcboot/rotations.hpp"
#include "emcboot/slicing.hpp"
#include "emcboot/volume.hpp"

namespace emcboot {

/// Two-term anisotropic fringe model
///   M = C sin^2(R(a)/2) R(a)^k + C sin^2(R(b)/2) R(b)^k,
///   R(a) = sqrt(a0 X^2 + a1 Y^2 + a2 Z^2),
/// evaluated on voxel coordinates divided by coordinate_scale.
struct PhantomSpec {
  Vec3 alpha{1.5, 0.3, 0.5};
  Vec3 beta{0.2, 0.9, 1.0};
  double k = -4.0;
  double C = 1.0;
  int grid_side = 64;
  double coordinate_scale = 1.0;

  /// The reference object at one of the standard grid sizes; coordinates
  /// are divided by side / 64 so every grid samples the same object.
  static PhantomSpec reference(int side) {
    PhantomSpec s;
    s.grid_side = side;
    s.coordinate_scale = side / 64.0;
    return s;
  }

  void validate() const {
    require(grid_side >= 8 && grid_side % 2 == 0, "phantom grid side must be even and >= 8");
    for (int a = 0; a < 3; ++a)
      require(alpha[a] > 0 && beta[a] > 0, "phantom shape vectors must be positive");
    require(C > 0, "phantom intensity constant must be positive");
    require(coordinate_scale > 0, "phantom coordinate scale must be positive");
    require(std::isfinite(k), "phantom exponent must be finite");
  }
};

/// Scalar evaluation of the model at scaled coordinates (X, Y, Z). The
/// radius is clamped below by `r_floor` so the origin stays finite.
inline double phantom_value(const PhantomSpec& s, const Vec3& xyz, double r_floor = 0.0) {
  auto term = [&](const Vec3& shape) {
    double r = std::sqrt(shape[0] * xyz[0] * xyz[0] + shape[1] * xyz[1] * xyz[1] +
                         shape[2] * xyz[2] * xyz[2]);
    r = std::max(r, r_floor);
    const double sn = std::sin(0.5 * r);
    return s.C * sn * sn * std::pow(r, s.k);
  };
  return term(s.alpha) + term(s.beta);
}

/// Rotations that leave the model invariant: half turns about the axes.
inline std::vector<Quaternion> phantom_symmetries() {
  return {Quaternion::identity(), {0.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0}, {0.0, 0.0, 0.0, 1.0}};
}

inline IntensityVolume build_phantom(const PhantomSpec& spec) {
  spec.validate();
  IntensityVolume vol(spec.grid_side);
  const double r_floor = 0.5 / spec.coordinate_scale;
  for (std::size_t l = 0; l < vol.size(); ++l) {
    Vec3 c = vol.coordinate(l);
    for (auto& x : c) x /= spec.coordinate_scale;
    vol.values[l] = phantom_value(spec, c, r_floor);
  }
  return vol;
}

/// Moves the detector beamstop to `radius` pixels and zeroes the pixels
/// behind it.
inline FrameSet apply_beamstop(FrameSet frames, double radius) {
  require(radius >= 0.0, "beamstop radius must be nonnegative");
  if (radius == frames.detector.mask_radius) return frames;
  const Detector merged(frames.detector.side, std::max(radius, frames.detector.mask_radius));
  frames.detector = merged;
  frames.zero_masked();
  return frames;
}

/// Noiseless frames: the expansion slice of `truth` at each rotation.
inline FrameSet generate_noiseless_frames(const IntensityVolume& truth,
                                          std::span<const Quaternion> rotations,
                                          const Detector& det, unsigned workers = 0) {
  require(det.side == truth.side, "detector side must match the volume side");
  SliceStack slices = expand(truth, rotations, det, workers);
  FrameSet out(det, rotations.size());
  out.values = std::move(slices.values);
  out.true_rotations = std::vector<Quaternion>(rotations.begin(), rotations.end());
  out.label = "K*";
  return out;
}

/// Scales frame k by phi_k ~ U(low, high).
inline FrameSet apply_fluence(FrameSet frames, double low, double high, std::uint64_t seed) {
  require(low > 0.0 && low <= high, "fluence range must satisfy 0 < low <= high");
  std::vector<double> phi(frames.count);
  for (std::size_t k = 0; k < frames.count; ++k) {
    std::mt19937_64 rng(mix_seed(seed, k));
    phi[k] = low == high ? low : std::uniform_real_distribution<double>(low, high)(rng);
    for (double& v : frames.frame(k)) v *= phi[k];
  }
  if (frames.true_fluences) {
    for (std::size_t k = 0; k < frames.count; ++k) phi[k] *= (*frames.true_fluences)[k];
  }
  frames.true_fluences = std::move(phi);
  frames.label = "Kf*";
  return frames;
}

/// Static background frame K_bg on the detector pixel grid.
struct BackgroundFrame {
  int side = 0;
  std::vector<double> values;
  std::string provenance;
};

/// Smooth low-frequency field plus constant offset with pixel mean `level`.
/// Stands in for a measured background.
inline BackgroundFrame synthesize_background(int side, double level, std::uint64_t seed) {
  require(side > 0, "background side must be positive");
  require(level >= 0.0, "background level must be nonnegative");
  BackgroundFrame bg{side, std::vector<double>(static_cast<std::size_t>(side) * side, 0.0),
                     "synthetic: smooth cosine field + offset"};
  if (level == 0.0) return bg;
  std::mt19937_64 rng(mix_seed(seed, 0x626b67));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  struct Mode {
    double kx, ky, phase, amp;
  };
  std::vector<Mode> modes;
  for (int m = 0; m < 6; ++m)
    modes.push_back({std::floor(u01(rng) * 4.0) - 1.5, std::floor(u01(rng) * 4.0) - 1.5,
                     2.0 * std::numbers::pi * u01(rng), 0.1 * u01(rng)});
  double total = 0.0;
  const double two_pi = 2.0 * std::numbers::pi;
  for (int py = 0; py < side; ++py)
    for (int px = 0; px < side; ++px) {
      double v = 1.0;
      for (const auto& md : modes)
        v += md.amp * std::cos(two_pi * (md.kx * px + md.ky * py) / side + md.phase);
      bg.values[static_cast<std::size_t>(py) * side + px] = v;
      total += v;
    }
  const double scale = level * static_cast<double>(bg.values.size()) / total;
  for (double& v : bg.values) v *= scale;
  return bg;
}

/// Draws counts ~ Po(c * frames + t * background) independently per
/// unmasked pixel; frame k uses its own RNG stream derived from (seed, k).
inline FrameSet draw_counts(const FrameSet& rates, double c, double t,
                            const BackgroundFrame* background, std::uint64_t seed,
                            unsigned workers = 0) {
  require(c > 0.0, "intensity factor must be positive");
  if (background && t != 0.0)
    require(background->values.size() == rates.pixel_count(),
            "background frame does not match the detector grid");
  FrameSet out = rates;
  parallel_for(rates.count, workers, [&](std::size_t k) {
    std::mt19937_64 rng(mix_seed(seed, k));
    auto src = rates.frame(k);
    auto dst = out.frame(k);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (rates.detector.mask[i]) {
        dst[i] = 0.0;
        continue;
      }
      double rate = c * src[i];
      if (background && t != 0.0) rate += t * background->values[i];
      require(rate >= 0.0 && std::isfinite(rate), "Poisson rate must be finite and nonnegative");
      dst[i] = rate > 0.0 ? static_cast<double>(std::poisson_distribution<long long>(rate)(rng)) : 0.0;
    }
  });
  return out;
}

inline FrameSet poissonize(const FrameSet& frames, std::uint64_t seed, unsigned workers = 0) {
  FrameSet out = draw_counts(frames, 1.0, 0.0, nullptr, seed, workers);
  out.label = frames.label == "Kf*" ? "Kf0" : "K0";
  return out;
}

/// Intensity factor c with max_ik (c * K_ik) = peak over unmasked pixels.
inline double intensity_factor_for_peak(const FrameSet& frames, double peak) {
  require(peak > 0.0, "peak photon count must be positive");
  double mx = 0.0;
  for (std::size_t k = 0; k < frames.count; ++k) {
    auto f = frames.frame(k);
    for (std::size_t i = 0; i < f.size(); ++i)
      if (!frames.detector.mask[i]) mx = std::max(mx, f[i]);
  }
  require(mx > 0.0, "frames carry no signal");
  return peak / mx;
}

/// Background-contaminated counts ~ Po(c * K + t * K_bg).
inline FrameSet add_background(const FrameSet& frames, const BackgroundFrame& background, double c,
                               double t, std::uint64_t seed, unsigned workers = 0) {
  require(background.side == frames.detector.side, "background side does not match frames");
  FrameSet out = draw_counts(frames, c, t, &background, seed, workers);
  out.label = t != 0.0 ? "Km+bg" : "Km";
  return out;
}

/// Multiplies every frame by a constant.
inline FrameSet scale_frames(FrameSet frames, double c) {
  for (double& v : frames.values) v *= c;
  return frames;
}

enum class RotationSource { grid, random };

/// Everything needed to regenerate one synthetic experiment.
struct DatasetSpec {
  int side = 64;
  double mask_radius = 8.0;
  int grid_n = 4;             // rotation grid the data rotations are drawn from
  std::size_t frames = 1000;
  double peak = 1000.0;       // max expected photons per pixel over the Kf* frames
  double fluence_low = 0.9;
  double fluence_high = 1.2;
  RotationSource rotation_source = RotationSource::grid;
  std::uint64_t seed = 1;

  void validate() const {
    require(side >= 8 && side % 2 == 0, "side must be even and >= 8");
    require(mask_radius >= 0.0, "beamstop radius must be nonnegative");
    require(grid_n >= 1, "grid refinement must be >= 1");
    require(frames >= 1, "need at least one frame");
    require(peak > 0.0, "peak photon count must be positive");
    require(fluence_low > 0.0 && fluence_low <= fluence_high, "invalid fluence range");
  }
};

/// The truth and the four frame variants sharing rotations and fluences:
/// K* (noiseless), K0 ~ Po(K*), Kf* = phi K*, Kf0 ~ Po(Kf*). All are scaled
/// by intensity_factor, as is `truth`.
struct SyntheticDataset {
  DatasetSpec spec;
  IntensityVolume truth;
  double intensity_factor = 1.0;
  FrameSet k_star, k_zero, kf_star, kf_zero;
};

inline SyntheticDataset generate_dataset(const DatasetSpec& spec, unsigned workers = 0) {
  spec.validate();
  SyntheticDataset d;
  d.spec = spec;
  d.truth = build_phantom(PhantomSpec::reference(spec.side));
  const RotationSet rots =
      spec.rotation_source == RotationSource::grid
          ? pick_from_grid(sample_rotation_grid(spec.grid_n), spec.frames, mix_seed(spec.seed, 1))
          : random_rotation_set(spec.frames, mix_seed(spec.seed, 1));
  const Detector det(spec.side, spec.mask_radius);
  FrameSet raw = generate_noiseless_frames(d.truth, rots.quaternions, det, workers);
  const FrameSet raw_f = apply_fluence(raw, spec.fluence_low, spec.fluence_high, mix_seed(spec.seed, 2));
  d.intensity_factor = intensity_factor_for_peak(raw_f, spec.peak);
  d.k_star = scale_frames(std::move(raw), d.intensity_factor);
  d.kf_star = scale_frames(raw_f, d.intensity_factor);
  d.k_zero = poissonize(d.k_star, mix_seed(spec.seed, 3), workers);
  d.kf_zero = poissonize(d.kf_star, mix_seed(spec.seed, 4), workers);
  for (double& v : d.truth.values) v *= d.intensity_factor;
  apply_beamstop(d.truth, spec.mask_radius);
  return d;
}

}  // namespace emcboot
