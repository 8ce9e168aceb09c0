#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "emcboot/uncertainty.hpp"

namespace emcboot {
namespace {

IntensityVolume random_volume(int side, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  IntensityVolume v(side);
  for (double& x : v.values) x = u(rng);
  return v;
}

SyntheticDataset small_dataset(std::size_t frames = 60) {
  DatasetSpec s;
  s.side = 16;
  s.mask_radius = 2;
  s.grid_n = 1;
  s.frames = frames;
  s.peak = 500.0;
  return generate_dataset(s);
}

EmcConfig small_config(int n = 1) {
  EmcConfig cfg;
  cfg.rotations = std::make_shared<RotationSet>(sample_rotation_grid(n));
  cfg.max_iterations = 6;
  return cfg;
}

void expect_total_identity(const BootstrapResult& r) {
  for (std::size_t l = 0; l < r.R_total.size(); ++l) {
    const double lhs = r.R_total.values[l] * r.R_total.values[l];
    const double rhs = r.beta * r.beta * r.R_std.values[l] * r.R_std.values[l] +
                       r.R_bias.values[l] * r.R_bias.values[l] + r.R_S_hat.values[l] * r.R_S_hat.values[l];
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(rhs, 1e-300));
  }
}

TEST(ComposeTotal, QuadratureIdentity) {
  const IntensityVolume a = random_volume(8, 1, 0.0, 2.0), b = random_volume(8, 2, -1.0, 1.0),
                        c = random_volume(8, 3, -0.5, 0.5);
  const double beta = 2.0;
  const IntensityVolume t = compose_total(a, b, c, beta);
  for (std::size_t l = 0; l < t.size(); ++l) {
    const double rhs = beta * beta * a.values[l] * a.values[l] + b.values[l] * b.values[l] + c.values[l] * c.values[l];
    EXPECT_NEAR(t.values[l] * t.values[l], rhs, 1e-10 * rhs);
  }
  const IntensityVolume zero(8);
  for (double v : compose_total(zero, zero, zero, beta).values) EXPECT_EQ(v, 0.0);
}

TEST(Smearing, ConstantVolumeHasNone) {
  const IntensityVolume flat(16, 2.0);
  const Detector det(16, 0.0);
  const auto rots = sample_rotation_grid(2).quaternions;
  const IntensityVolume rs = estimate_smearing(flat, rots, det);
  for (std::size_t l = 0; l < rs.size(); ++l)
    if (!rs.mask[l] && flat.radius(l) < 6.0) EXPECT_NEAR(rs.values[l], 0.0, 1e-12);
}

TEST(ErrorChains, NamesAndUnknownRows) {
  EXPECT_TRUE(error_chain("R_S").smearing);
  EXPECT_FALSE(error_chain("R_S").emc);
  const ErrorChainSpec t = error_chain("R_S+R_F+R_N+R_T");
  EXPECT_TRUE(t.smearing);
  EXPECT_FALSE(t.true_fluence);
  EXPECT_FALSE(t.true_responsibilities);
  EXPECT_EQ(t.e_frames, FrameVariant::kf_zero);
  EXPECT_EQ(error_chain("R_T").m_frames, FrameVariant::k_star);
  EXPECT_THROW(error_chain("R_X"), Error);
  EXPECT_EQ(standard_error_chains().size(), 7u);
}

TEST(ErrorChains, AllTrueChainIsExact) {
  const SyntheticDataset d = small_dataset();
  ErrorChainRunner runner(d, small_config());
  ErrorChainSpec s;
  s.label = "exact";
  s.e_frames = s.m_frames = FrameVariant::k_star;
  s.true_responsibilities = true;
  s.true_fluence = true;
  const ChainResult r = runner.measure(s);
  EXPECT_TRUE(r.converged);
  for (std::size_t u = 0; u < r.weak.size(); ++u)
    if (std::isfinite(r.weak.values[u])) EXPECT_NEAR(r.weak.values[u], 0.0, 1e-12);
}

TEST(ErrorChains, NoiseChainIsPositiveAndSmearingNeedsTruth) {
  const SyntheticDataset d = small_dataset();
  ErrorChainRunner runner(d, small_config());
  const ChainResult rn = runner.measure("R_N");
  EXPECT_GT(shell_mean(rn.weak, 2, 7), 0.0);
  ErrorChainSpec bad = error_chain("R_S");
  bad.smearing = false;
  EXPECT_THROW(runner.measure(bad), Error);
}

TEST(Bootstrap, SmallInstanceIdentitiesAndDeterminism) {
  const SyntheticDataset d = small_dataset(40);
  const EmcConfig cfg = small_config();
  BootstrapOptions opt;
  opt.B = 2;
  opt.seed = 9;
  const BootstrapPair a = run_bootstrap(d.kf_zero, cfg, opt);
  ASSERT_TRUE(a.standard && a.emb);
  expect_total_identity(*a.standard);
  expect_total_identity(*a.emb);
  std::set<std::size_t> seen;
  for (const auto& picks : a.picks) {
    EXPECT_EQ(picks.size(), 40u);
    seen.insert(picks.begin(), picks.end());
  }
  EXPECT_EQ(a.emb->unseen_frames, 40u - seen.size());
  for (std::size_t l = 0; l < a.standard->V.size(); ++l)
    if (!a.standard->V.mask[l]) EXPECT_GE(a.standard->V.values[l], 0.0);

  const BootstrapPair b = run_bootstrap(d.kf_zero, cfg, opt);
  EXPECT_EQ(a.standard->R_total.values, b.standard->R_total.values);
  EXPECT_EQ(a.emb->R_total.values, b.emb->R_total.values);
}

TEST(Bootstrap, RejectsDegenerateSettings) {
  const SyntheticDataset d = small_dataset(10);
  BootstrapOptions opt;
  opt.B = 1;
  EXPECT_THROW(run_bootstrap(d.kf_zero, small_config(), opt), Error);
  opt.B = 2;
  opt.beta = -1.0;
  EXPECT_THROW(run_bootstrap(d.kf_zero, small_config(), opt), Error);
  EXPECT_EQ(bootstrap_picks(5, 3, 0), bootstrap_picks(5, 3, 0));
  EXPECT_NE(bootstrap_picks(50, 3, 0), bootstrap_picks(50, 3, 1));
}

TEST(Sweep, ProducesOneRowPerSpec) {
  SweepOptions opt;
  opt.dataset.side = 16;
  opt.dataset.mask_radius = 2;
  opt.dataset.grid_n = 1;
  opt.bootstrap.B = 2;
  const std::vector<SweepSpec> specs{{100.0, false, 20}, {100.0, true, 20}};
  const auto rows = intensity_sweep(specs, small_config(), opt);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_TRUE(std::isfinite(shell_mean(r.curve, 2, 7)));
    EXPECT_GE(shell_mean(r.curve, 2, 7), 0.0);
  }
}

}  // namespace
}  // namespace emcboot
