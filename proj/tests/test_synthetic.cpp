#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "emcboot/synthetic.hpp"

namespace emcboot {
namespace {

// Direct evaluation of the two-term model, written independently of the
// library: C sin^2(R/2) R^k summed over the two shape vectors.
double model_oracle(double x, double y, double z) {
  auto term = [&](double a0, double a1, double a2) {
    const double r = std::sqrt(a0 * x * x + a1 * y * y + a2 * z * z);
    return std::pow(std::sin(r / 2.0), 2) * std::pow(r, -4.0);
  };
  return term(1.5, 0.3, 0.5) + term(0.2, 0.9, 1.0);
}

TEST(Phantom, OffCenterVoxelMatchesScalarFormula) {
  const IntensityVolume v = build_phantom(PhantomSpec::reference(64));
  for (auto [ix, iy, iz] : {std::array{40, 20, 33}, std::array{0, 63, 10}, std::array{31, 32, 45}}) {
    const double x = ix - 32.0, y = iy - 32.0, z = iz - 32.0;
    EXPECT_NEAR(v.values[v.index(ix, iy, iz)], model_oracle(x, y, z), 1e-15);
  }
}

TEST(Phantom, CoordinateScaleSamplesTheSameObject) {
  const IntensityVolume a = build_phantom(PhantomSpec::reference(64));
  const IntensityVolume b = build_phantom(PhantomSpec::reference(128));
  // Voxel (40, 20, 33) at side 64 is voxel (80, 40, 66) at side 128.
  EXPECT_NEAR(a.values[a.index(40, 20, 33)], b.values[b.index(80, 40, 66)], 1e-15);
}

TEST(Phantom, IsotropicShapesGiveSphericalSymmetry) {
  PhantomSpec s;
  s.grid_side = 16;
  s.alpha = s.beta = {1.0, 1.0, 1.0};
  const IntensityVolume v = build_phantom(s);
  std::map<long, double> by_radius;
  for (std::size_t l = 0; l < v.size(); ++l) {
    const Vec3 c = v.coordinate(l);
    const long r2 = std::lround(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
    auto [it, fresh] = by_radius.emplace(r2, v.values[l]);
    if (!fresh) EXPECT_NEAR(it->second, v.values[l], 1e-12);
  }
}

TEST(Phantom, InvariantUnderItsSymmetries) {
  const PhantomSpec spec = PhantomSpec::reference(64);
  const Vec3 p{3.25, -7.5, 11.0};
  for (const Quaternion& s : phantom_symmetries())
    EXPECT_NEAR(phantom_value(spec, s.rotate(p)), phantom_value(spec, p), 1e-15);
}

TEST(Phantom, FiniteAndNonnegativeIncludingOrigin) {
  const IntensityVolume v = build_phantom(PhantomSpec::reference(32));
  for (double x : v.values) {
    EXPECT_TRUE(std::isfinite(x));
    EXPECT_GE(x, 0.0);
  }
}

TEST(Phantom, RejectsInvalidSpecs) {
  PhantomSpec s;
  s.alpha = {0.0, 1.0, 1.0};
  EXPECT_THROW(build_phantom(s), Error);
  PhantomSpec odd;
  odd.grid_side = 63;
  EXPECT_THROW(build_phantom(odd), Error);
}

TEST(Beamstop, LatticeCountAtRadiusEight) {
  EXPECT_EQ(Detector(64, 8.0).pixel_count() - Detector(64, 8.0).unmasked_count(), 193u);
  EXPECT_EQ(Detector(64, 0.0).unmasked_count(), 64u * 64u);
  EXPECT_EQ(Detector(64, 100.0).unmasked_count(), 0u);
}

TEST(Beamstop, ZeroesFramesAndVolumes) {
  FrameSet f(Detector(16, 0.0), 2);
  std::fill(f.values.begin(), f.values.end(), 3.0);
  const FrameSet g = apply_beamstop(f, 4.0);
  for (std::size_t k = 0; k < g.count; ++k)
    for (std::size_t i = 0; i < g.pixel_count(); ++i)
      EXPECT_EQ(g.frame(k)[i], g.detector.mask[i] ? 0.0 : 3.0);
  const FrameSet same = apply_beamstop(f, 0.0);
  EXPECT_EQ(same.values, f.values);

  IntensityVolume v(16, 2.0);
  apply_beamstop(v, 4.0);
  for (std::size_t l = 0; l < v.size(); ++l) {
    EXPECT_EQ(v.mask[l] != 0, v.radius(l) < 4.0);
    if (v.mask[l]) EXPECT_EQ(v.values[l], 0.0);
  }
}

TEST(NoiselessFrames, IdentityRotationIsCentralPlane) {
  const IntensityVolume v = build_phantom(PhantomSpec::reference(16));
  const Detector det(16, 0.0);
  const std::vector<Quaternion> rots{Quaternion::identity()};
  const FrameSet f = generate_noiseless_frames(v, rots, det);
  for (int py = 0; py < 16; ++py)
    for (int px = 0; px < 16; ++px)
      EXPECT_NEAR(f.frame(0)[py * 16 + px], v.values[v.index(px, py, 8)], 1e-15);
  ASSERT_TRUE(f.true_rotations);
}

TEST(NoiselessFrames, ConstantVolumeAndDoubleCover) {
  const IntensityVolume flat(16, 2.5);
  const Detector det(16, 2.0);
  const RotationSet rots = random_rotation_set(20, 3);
  const FrameSet f = generate_noiseless_frames(flat, rots.quaternions, det);
  std::vector<Quaternion> negated;
  for (const auto& q : rots.quaternions) negated.push_back(-q);
  const FrameSet g = generate_noiseless_frames(flat, negated, det);
  for (std::size_t k = 0; k < f.count; ++k)
    for (std::size_t i = 0; i < f.pixel_count(); ++i) {
      if (det.mask[i]) {
        EXPECT_EQ(f.frame(k)[i], 0.0);
        continue;
      }
      const Vec3 p = rots.quaternions[k].rotate(det.coords[i]);
      const bool inside = std::abs(p[0]) <= 7 && std::abs(p[1]) <= 7 && std::abs(p[2]) <= 7;
      if (inside) EXPECT_NEAR(f.frame(k)[i], 2.5, 1e-12);
      EXPECT_NEAR(f.frame(k)[i], g.frame(k)[i], 1e-12);
    }
}

TEST(Fluence, UnitRangeLeavesFramesUnchanged) {
  FrameSet f(Detector(8, 0.0), 3);
  std::iota(f.values.begin(), f.values.end(), 1.0);
  const FrameSet g = apply_fluence(f, 1.0, 1.0, 9);
  EXPECT_EQ(g.values, f.values);
}

TEST(Fluence, UniformLawMeanAndLinearity) {
  FrameSet f(Detector(4, 0.0), 10000);
  std::iota(f.values.begin(), f.values.end(), 0.0);
  const FrameSet g = apply_fluence(f, 0.9, 1.2, 21);
  ASSERT_TRUE(g.true_fluences);
  double mean = 0.0;
  for (double phi : *g.true_fluences) {
    EXPECT_GT(phi, 0.9);
    EXPECT_LT(phi, 1.2);
    mean += phi / 10000.0;
  }
  EXPECT_NEAR(mean, 1.05, 0.01);
  for (std::size_t k = 0; k < 50; ++k)
    EXPECT_NEAR(g.frame_total(k), (*g.true_fluences)[k] * f.frame_total(k), 1e-9 * f.frame_total(k) + 1e-12);
}

TEST(Poisson, ZeroRateMaskAndDeterminism) {
  FrameSet f(Detector(8, 2.0), 4);
  for (std::size_t k = 0; k < f.count; ++k)
    for (std::size_t i = 0; i < f.pixel_count(); ++i) f.frame(k)[i] = f.detector.mask[i] ? 0.0 : (i % 3) * 4.0;
  const FrameSet a = poissonize(f, 5), b = poissonize(f, 5);
  EXPECT_EQ(a.values, b.values);
  for (std::size_t k = 0; k < f.count; ++k)
    for (std::size_t i = 0; i < f.pixel_count(); ++i) {
      if (f.frame(k)[i] == 0.0) EXPECT_EQ(a.frame(k)[i], 0.0);
      EXPECT_EQ(a.frame(k)[i], std::round(a.frame(k)[i]));
    }
  EXPECT_NE(poissonize(f, 6).values, a.values);
}

TEST(Poisson, LargeRateSampleMean) {
  FrameSet f(Detector(100, 0.0), 1);
  std::fill(f.values.begin(), f.values.end(), 1e4);
  const FrameSet a = poissonize(f, 8);
  const double mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / a.values.size();
  EXPECT_NEAR(mean, 1e4, 100.0);
}

TEST(Poisson, TotalsMatchExpectedCounts) {
  FrameSet f(Detector(16, 3.0), 1);
  for (std::size_t i = 0; i < f.pixel_count(); ++i) f.values[i] = f.detector.mask[i] ? 0.0 : 0.5 + (i % 7);
  const double rate = f.frame_total(0);
  double mean = 0.0;
  const int seeds = 400;
  for (int s = 0; s < seeds; ++s) mean += poissonize(f, s).frame_total(0) / seeds;
  EXPECT_NEAR(mean, rate, 3.0 * std::sqrt(rate / seeds));
}

TEST(Background, LevelMeanAndDeterminism) {
  const BackgroundFrame zero = synthesize_background(32, 0.0, 1);
  for (double v : zero.values) EXPECT_EQ(v, 0.0);
  const BackgroundFrame a = synthesize_background(64, 0.5, 4), b = synthesize_background(64, 0.5, 4);
  EXPECT_EQ(a.values, b.values);
  const double mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / a.values.size();
  EXPECT_NEAR(mean, 0.5, 0.005);
  for (double v : a.values) EXPECT_GE(v, 0.0);
}

TEST(Background, ZeroTimesIsPlainPoisson) {
  FrameSet f(Detector(16, 2.0), 3);
  for (std::size_t j = 0; j < f.values.size(); ++j) f.values[j] = f.detector.mask[j % f.pixel_count()] ? 0.0 : 2.0;
  const BackgroundFrame bg = synthesize_background(16, 1.0, 2);
  const FrameSet a = add_background(f, bg, 3.0, 0.0, 10);
  const FrameSet b = poissonize(scale_frames(f, 3.0), 10);
  EXPECT_EQ(a.values, b.values);
}

TEST(Background, ZeroSignalDrawsBackground) {
  FrameSet f(Detector(32, 0.0), 200);
  const BackgroundFrame bg = synthesize_background(32, 2.0, 2);
  const FrameSet a = add_background(f, bg, 1.0, 1.0, 11);
  double mean = 0.0;
  for (std::size_t k = 0; k < a.count; ++k) mean += a.frame(k)[100] / a.count;
  EXPECT_NEAR(mean, bg.values[100], 4.0 * std::sqrt(bg.values[100] / a.count));
  EXPECT_THROW(add_background(f, synthesize_background(16, 1.0, 2), 1.0, 1.0, 1), Error);
}

TEST(Dataset, PeakCalibrationAndSharedTruth) {
  DatasetSpec s;
  s.side = 32;
  s.mask_radius = 4;
  s.grid_n = 2;
  s.frames = 40;
  s.peak = 1000.0;
  const SyntheticDataset d = generate_dataset(s);
  double mx = 0.0;
  for (double v : d.kf_star.values) mx = std::max(mx, v);
  EXPECT_NEAR(mx, 1000.0, 1.0);
  ASSERT_TRUE(d.kf_star.true_fluences && d.k_star.true_rotations && d.kf_zero.true_rotations);
  for (std::size_t k = 0; k < s.frames; ++k) {
    EXPECT_EQ(d.k_star.true_rotations->at(k).w, d.kf_zero.true_rotations->at(k).w);
    EXPECT_NEAR(d.kf_star.frame_total(k), d.kf_star.true_fluences->at(k) * d.k_star.frame_total(k),
                1e-9 * d.kf_star.frame_total(k));
  }
  const SyntheticDataset again = generate_dataset(s);
  EXPECT_EQ(again.kf_zero.values, d.kf_zero.values);
  DatasetSpec bad = s;
  bad.fluence_low = 2.0;
  EXPECT_THROW(generate_dataset(bad), Error);
}

}  // namespace
}  // namespace emcboot
