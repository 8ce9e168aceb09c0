#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "emcboot/emc.hpp"
#include "emcboot/metrics.hpp"
#include "emcboot/synthetic.hpp"

namespace emcboot {
namespace {

// Side 2 with a beamstop of radius 0.5: pixel 3 at the origin is masked,
// leaving three unmasked pixels.
Detector tiny_detector() { return Detector(2, 0.5); }

struct Instance {
  FrameSet frames;
  SliceStack slices;
  FluenceMatrix phi;
  RotationFrameMatrix P;
};

Instance random_instance(std::size_t m_rot, std::size_t m_data, std::uint64_t seed, bool integer_counts = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  std::poisson_distribution<int> pois(2.5);
  Instance in{FrameSet(tiny_detector(), m_data), SliceStack(m_rot, 4), FluenceMatrix(m_rot, m_data),
              RotationFrameMatrix(m_rot, m_data)};
  const Detector& det = in.frames.detector;
  for (std::size_t n = 0; n < in.frames.values.size(); ++n)
    in.frames.values[n] = det.mask[n % 4] ? 0.0 : (integer_counts ? pois(rng) : u(rng));
  for (std::size_t n = 0; n < in.slices.values.size(); ++n) in.slices.values[n] = det.mask[n % 4] ? 0.0 : u(rng);
  for (double& v : in.phi.values) v = u(rng);
  for (std::size_t k = 0; k < m_data; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < m_rot; ++j) s += in.P(j, k) = u(rng);
    for (std::size_t j = 0; j < m_rot; ++j) in.P(j, k) /= s;
  }
  return in;
}

double q_oracle(const Instance& in, std::size_t j, std::size_t k) {
  double q = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (in.frames.detector.mask[i]) continue;
    const double K = in.frames.frame(k)[i], W = in.slices.row(j)[i], phi = in.phi(j, k);
    q += K * std::log(phi * W) - phi * W;
  }
  return q;
}

double divergence_oracle(const FrameSet& f, const RotationFrameMatrix& P, const FluenceMatrix& phi,
                         const SliceStack& W) {
  double d = 0.0;
  for (std::size_t j = 0; j < P.rotations; ++j)
    for (std::size_t k = 0; k < P.frames; ++k)
      for (std::size_t i = 0; i < f.pixel_count(); ++i) {
        if (f.detector.mask[i]) continue;
        const double pk = P(j, k) * f.frame(k)[i], pw = P(j, k) * phi(j, k) * W.row(j)[i];
        if (pk > 0.0) d += pk * std::log(pk / pw);
        d += pw - pk;
      }
  return d;
}

TEST(LogLikelihood, Examples) {
  FrameSet zero(Detector(1, 0.0), 1);
  SliceStack w(1, 1);
  w.values[0] = 2.0;
  EXPECT_NEAR(log_likelihood_table(zero, w, FluenceMatrix::ones(1, 1))(0, 0), -2.0, 1e-15);
  FrameSet one(Detector(1, 0.0), 1);
  one.values[0] = 2.0;
  EXPECT_NEAR(log_likelihood_table(one, w, FluenceMatrix::ones(1, 1))(0, 0), 2.0 * std::log(2.0) - 2.0, 1e-15);
}

TEST(LogLikelihood, MatchesScalarOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance in = random_instance(3, 4, seed);
    const RotationFrameMatrix Q = log_likelihood_table(in.frames, in.slices, in.phi);
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(Q(j, k), q_oracle(in, j, k), 1e-12);
  }
}

TEST(LogLikelihood, FloorsEmptySlicesInsideTheLog) {
  FrameSet f(Detector(1, 0.0), 1);
  f.values[0] = 1.0;
  SliceStack w(2, 1);
  w.values = {0.0, 1.0};
  const RotationFrameMatrix Q = log_likelihood_table(f, w, FluenceMatrix::ones(2, 1));
  EXPECT_NEAR(Q(0, 0), std::log(1e-12 * 0.5), 1e-9);
  EXPECT_TRUE(std::isfinite(Q(0, 0)));
}

TEST(EStep, SingleRotationAndEqualSplit) {
  const Instance in = random_instance(1, 5, 3);
  const std::vector<double> w1{1.0};
  const ResponsibilityMatrix P = e_step(in.frames, in.slices, in.phi, w1);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(P(0, k), 1.0);

  RotationFrameMatrix Q(2, 3, -7.0);
  const std::vector<double> w2{0.5, 0.5};
  const ResponsibilityMatrix half = responsibilities_from_table(Q, w2);
  for (double p : half.values) EXPECT_DOUBLE_EQ(p, 0.5);
}

TEST(EStep, MatchesScalarOracleAndColumnsSum) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance in = random_instance(4, 3, seed + 100);
    const std::vector<double> w{0.1, 0.2, 0.3, 0.4};
    const ResponsibilityMatrix P = e_step(in.frames, in.slices, in.phi, w);
    for (std::size_t k = 0; k < 3; ++k) {
      double z = 0.0;
      for (std::size_t j = 0; j < 4; ++j) z += w[j] * std::exp(q_oracle(in, j, k));
      double col = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(P(j, k), w[j] * std::exp(q_oracle(in, j, k)) / z, 1e-12);
        col += P(j, k);
      }
      EXPECT_NEAR(col, 1.0, 1e-12);
    }
  }
}

TEST(EStep, ShiftInvariance) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 30.0);
  RotationFrameMatrix Q(6, 4);
  for (double& v : Q.values) v = g(rng);
  const std::vector<double> w(6, 1.0 / 6);
  RotationFrameMatrix shifted = Q;
  for (std::size_t k = 0; k < 4; ++k) {
    const double c = g(rng) * 1e3;
    for (std::size_t j = 0; j < 6; ++j) shifted(j, k) += c;
  }
  const ResponsibilityMatrix a = responsibilities_from_table(Q, w), b = responsibilities_from_table(shifted, w);
  for (std::size_t n = 0; n < a.values.size(); ++n) EXPECT_NEAR(a.values[n], b.values[n], 1e-12);
}

TEST(EStep, HugeLikelihoodGapsDoNotOverflow) {
  RotationFrameMatrix Q(2, 1);
  Q(0, 0) = -1e6;
  Q(1, 0) = -2e6;
  const std::vector<double> w{0.5, 0.5};
  const ResponsibilityMatrix P = responsibilities_from_table(Q, w);
  EXPECT_EQ(P(0, 0), 1.0);
  EXPECT_EQ(P(1, 0), 0.0);
  RotationFrameMatrix bad(1, 1, -std::numeric_limits<double>::infinity());
  EXPECT_THROW(responsibilities_from_table(bad, std::vector<double>{1.0}), Error);
}

TEST(Fluence, Examples) {
  Instance in = random_instance(2, 2, 7, false);
  // Frame 0 equals slice 1 exactly; frame 1 is slice 0 scaled by 1.1.
  for (std::size_t i = 0; i < 4; ++i) {
    in.frames.frame(0)[i] = in.slices.row(1)[i];
    in.frames.frame(1)[i] = 1.1 * in.slices.row(0)[i];
  }
  const FluenceMatrix phi = m_step_fluence(in.frames, in.slices, 1.0);
  EXPECT_NEAR(phi(1, 0), 1.0, 1e-12);
  EXPECT_NEAR(phi(0, 1), 1.1, 1e-12);
  for (double v : m_step_fluence(in.frames, in.slices, 1.0, FluenceMode::fixed).values) EXPECT_EQ(v, 1.0);
}

TEST(Fluence, MatchesScalarOracle) {
  const Instance in = random_instance(2, 2, 8);
  const double ratio = 0.83;
  const FluenceMatrix phi = m_step_fluence(in.frames, in.slices, ratio);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) {
      double kk = 0.0, ww = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        kk += in.frames.frame(k)[i];
        ww += in.slices.row(j)[i];
      }
      EXPECT_NEAR(phi(j, k), kk / ww * ratio, 1e-12);
    }
}

TEST(Fluence, EmptySliceIsAnError) {
  Instance in = random_instance(2, 1, 9);
  std::fill(in.slices.values.begin(), in.slices.values.begin() + 4, 0.0);
  EXPECT_THROW(m_step_fluence(in.frames, in.slices, 1.0), Error);
  const FluenceMatrix phi = m_step_fluence(in.frames, in.slices, 2.0, FluenceMode::estimate, true);
  EXPECT_EQ(phi(0, 0), 2.0);
}

TEST(MStepSlices, Examples) {
  Instance in = random_instance(2, 2, 10);
  RotationFrameMatrix one_hot(2, 2);
  one_hot(0, 1) = 1.0;
  one_hot(1, 0) = 1.0;
  const SliceUpdate a = m_step_slices(in.frames, one_hot, FluenceMatrix::ones(2, 2));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.slices.row(0)[i], in.frames.frame(1)[i]);
    EXPECT_EQ(a.slices.row(1)[i], in.frames.frame(0)[i]);
  }

  FrameSet twins(tiny_detector(), 2);
  twins.values = {3.0, 1.0, 4.0, 0.0, 3.0, 1.0, 4.0, 0.0};
  RotationFrameMatrix shared(1, 2, 1.0);
  const SliceUpdate b = m_step_slices(twins, shared, FluenceMatrix::ones(1, 2));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(b.slices.row(0)[i], twins.frame(0)[i]);
}

TEST(MStepSlices, MatchesScalarOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance in = random_instance(2, 2, seed + 200);
    const SliceUpdate u = m_step_slices(in.frames, in.P, in.phi);
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t i = 0; i < 4; ++i) {
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < 2; ++k) {
          num += in.P(j, k) * in.frames.frame(k)[i];
          den += in.P(j, k) * in.phi(j, k);
        }
        EXPECT_NEAR(u.slices.row(j)[i], num / den, 1e-12);
      }
  }
}

TEST(MStepSlices, ZeroMassRotationKeepsPreviousSlice) {
  Instance in = random_instance(2, 3, 11);
  for (std::size_t k = 0; k < 3; ++k) {
    in.P(0, k) = 1.0;
    in.P(1, k) = 0.0;
  }
  const SliceUpdate u = m_step_slices(in.frames, in.P, in.phi, &in.slices);
  EXPECT_EQ(u.skipped, 1u);
  EXPECT_EQ(u.mass[1], 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(u.slices.row(1)[i], in.slices.row(1)[i]);
}

TEST(KleinDivergence, ZeroAtIdentity) {
  Instance in = random_instance(2, 2, 12, false);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) in.phi(j, k) = 1.0;
  for (std::size_t i = 0; i < 4; ++i) {
    in.slices.row(1)[i] = in.slices.row(0)[i];
    in.frames.frame(0)[i] = in.frames.frame(1)[i] = in.slices.row(0)[i];
  }
  EXPECT_NEAR(klein_divergence(in.frames, in.P, in.phi, in.slices), 0.0, 1e-12);
}

TEST(KleinDivergence, NonnegativeAndMatchesOracle) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const Instance in = random_instance(2, 2, seed + 300);
    const double d = klein_divergence(in.frames, in.P, in.phi, in.slices);
    EXPECT_GE(d, -1e-12);
    EXPECT_NEAR(d, divergence_oracle(in.frames, in.P, in.phi, in.slices), 1e-12 * (1.0 + std::abs(d)));
  }
}

TEST(KleinDivergence, SliceUpdateNeverIncreasesIt) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const Instance in = random_instance(3, 4, seed + 400);
    const double before = klein_divergence(in.frames, in.P, in.phi, in.slices);
    const SliceUpdate u = m_step_slices(in.frames, in.P, in.phi, &in.slices);
    EXPECT_LE(klein_divergence(in.frames, in.P, in.phi, u.slices), before + 1e-12);
  }
}

TEST(RunEmc, SingleFrameSingleRotationClosedForm) {
  const Detector det(8, 0.0);
  FrameSet f(det, 1);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(1.0, 5.0);
  for (double& v : f.values) v = u(rng);
  EmcConfig cfg;
  cfg.rotations = std::make_shared<RotationSet>(RotationSet::uniform({Quaternion::identity()}));
  cfg.fluence_mode = FluenceMode::fixed;
  const EmcResult r = run_emc(f, cfg);
  ASSERT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 2);
  const std::vector<Quaternion> id{Quaternion::identity()};
  const Compression expected = compress(f.values, id, det, 8);
  for (std::size_t l = 0; l < r.volume.size(); ++l) EXPECT_NEAR(r.volume.values[l], expected.volume.values[l], 1e-12);
}

// Starting from the truth with noiseless frames at grid rotations, every
// frame is assigned to its own rotation and one iteration returns the
// compressed expansion of the truth. The truth is random so that no two
// grid rotations see the same slice.
TEST(RunEmc, TruthIsAFixedPointUpToSmearing) {
  IntensityVolume truth(16);
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  for (double& v : truth.values) v = u(rng);
  const RotationSet grid = sample_rotation_grid(2);
  const Detector det(16, 2.0);
  std::vector<std::size_t> picks;
  for (std::size_t j = 0; j < grid.size(); j += 7) picks.push_back(j);
  std::vector<Quaternion> rots;
  for (auto j : picks) rots.push_back(grid.quaternions[j]);
  FrameSet f = generate_noiseless_frames(truth, rots, det);
  for (double& v : f.values) v *= 1e4;
  EmcConfig cfg;
  cfg.rotations = std::make_shared<RotationSet>(grid);
  cfg.fluence_mode = FluenceMode::fixed;
  cfg.max_iterations = 1;
  IntensityVolume init = truth;
  for (double& v : init.values) v *= 1e4;
  const EmcResult r = run_emc(f, cfg, init);
  for (std::size_t k = 0; k < picks.size(); ++k) EXPECT_EQ(r.responsibilities.mode(k), picks[k]);
  const Compression smeared = compress(expand(init, rots, det), rots, det, 16);
  for (std::size_t l = 0; l < truth.size(); ++l)
    if (!smeared.volume.mask[l]) EXPECT_NEAR(r.volume.values[l], smeared.volume.values[l], 1e-9 * init.values[l] + 1e-9);
}

TEST(RunEmc, TraceInvariantsAndDeterminism) {
  DatasetSpec s;
  s.side = 16;
  s.mask_radius = 2;
  s.grid_n = 2;
  s.frames = 80;
  s.peak = 200.0;
  const SyntheticDataset d = generate_dataset(s);
  EmcConfig cfg;
  cfg.rotations = std::make_shared<RotationSet>(sample_rotation_grid(2));
  cfg.max_iterations = 8;
  cfg.workers = 1;
  const EmcResult a = run_emc(d.kf_zero, cfg), b = run_emc(d.kf_zero, cfg);
  EXPECT_EQ(a.volume.values, b.volume.values);
  ASSERT_EQ(a.trace.size(), 8u);
  for (const TraceRow& row : a.trace) {
    EXPECT_LE(row.divergence_after, row.divergence_before + 1e-10 * std::abs(row.divergence_before));
    EXPECT_GE(row.change, 0.0);
  }
  for (std::size_t k = 0; k < a.responsibilities.frames; ++k) {
    double col = 0.0;
    for (std::size_t j = 0; j < a.responsibilities.rotations; ++j) col += a.responsibilities(j, k);
    EXPECT_NEAR(col, 1.0, 1e-12);
  }
  cfg.workers = 3;
  const EmcResult c = run_emc(d.kf_zero, cfg);
  const ShellPartition p = make_shells(16, 1.0, 2.0);
  const ShellErrorCurve ea = weak_shell_error(a.volume, d.truth, Quaternion::identity(), p);
  const ShellErrorCurve ec = weak_shell_error(c.volume, d.truth, Quaternion::identity(), p);
  for (std::size_t u = 0; u < ea.values.size(); ++u)
    if (std::isfinite(ea.values[u])) EXPECT_NEAR(ea.values[u], ec.values[u], 1e-6);
}

TEST(RunEmc, RejectsBadInputs) {
  FrameSet f(Detector(8, 0.0), 1);
  EmcConfig cfg;
  EXPECT_THROW(run_emc(f, cfg), Error);
  cfg.rotations = std::make_shared<RotationSet>(sample_rotation_grid(1));
  cfg.epsilon = 0.0;
  EXPECT_THROW(run_emc(f, cfg), Error);
}

// Noiseless frames from random init: the most probable rotation of a frame
// should match its true rotation once the global orientation of the
// reconstruction and the phantom's own 180 degree symmetries are factored out.
TEST(RunEmc, FluenceWarmupMatchesFixedFluenceRun) {
  DatasetSpec spec;
  spec.side = 16;
  spec.mask_radius = 2;
  spec.grid_n = 1;
  spec.frames = 30;
  const SyntheticDataset d = generate_dataset(spec);
  EmcConfig est;
  est.rotations = std::make_shared<RotationSet>(sample_rotation_grid(1));
  est.fluence_warmup = 3;
  est.max_iterations = 5;
  est.epsilon = 1e6;
  EmcConfig fixed = est;
  fixed.fluence_mode = FluenceMode::fixed;
  fixed.max_iterations = 3;
  fixed.epsilon = 1e-300;
  const EmcResult a = run_emc(d.kf_zero, est);
  const EmcResult b = run_emc(d.kf_zero, fixed);
  ASSERT_EQ(a.iterations, 4);
  EXPECT_TRUE(a.converged);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(a.trace[t].change, b.trace[t].change);
  EXPECT_NE(a.trace[3].divergence_after, b.trace[2].divergence_after);
  est.fluence_warmup = -1;
  EXPECT_THROW(run_emc(d.kf_zero, est), Error);
}

TEST(RunEmc, RecoversOrientationsOfNoiselessFrames) {
  const int side = 64;
  const IntensityVolume truth = build_phantom(PhantomSpec::reference(side));
  const Detector det(side, 8.0);
  const RotationSet grid = sample_rotation_grid(4);
  const std::vector<Quaternion> truth_rots = pick_from_grid(grid, 200, 17).quaternions;
  FrameSet f = generate_noiseless_frames(truth, truth_rots, det);
  const double c = intensity_factor_for_peak(f, 3.0);
  for (double& v : f.values) v *= c;
  EmcConfig cfg;
  cfg.rotations = std::make_shared<RotationSet>(grid);
  cfg.fluence_mode = FluenceMode::fixed;
  cfg.max_iterations = 40;
  const EmcResult r = run_emc(f, cfg);
  std::vector<Quaternion> modes;
  for (std::size_t k = 0; k < f.count; ++k) modes.push_back(grid.quaternions[r.responsibilities.mode(k)]);
  EXPECT_GE(recovered_orientations(truth_rots, modes, mean_nearest_neighbor_spacing(grid),
                                   phantom_symmetries()),
            180u);
}

}  // namespace
}  // namespace emcboot
