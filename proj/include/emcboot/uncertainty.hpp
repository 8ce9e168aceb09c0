#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/emc.hpp"
#include "emcboot/frames.hpp"
#include "emcboot/metrics.hpp"
#include "emcboot/rotations.hpp"
#include "emcboot/slicing.hpp"
#include "emcboot/synthetic.hpp"
#include "emcboot/volume.hpp"

namespace emcboot {

/// W* = c(K*): the noiseless frames compressed at their true rotations.
inline IntensityVolume best_reconstruction(const FrameSet& noiseless, unsigned workers = 0) {
  require(noiseless.true_rotations.has_value(), "best reconstruction: true rotations not recorded");
  return compress_frames(noiseless, *noiseless.true_rotations, noiseless.detector.side, workers).volume;
}

/// One-hot responsibilities at the grid rotation nearest to each true rotation.
inline ResponsibilityMatrix true_responsibilities(const FrameSet& frames, const RotationSet& grid) {
  require(frames.true_rotations.has_value(), "true rotations not recorded");
  ResponsibilityMatrix P(grid.size(), frames.count);
  for (std::size_t k = 0; k < frames.count; ++k)
    P(nearest_rotation(grid, (*frames.true_rotations)[k]), k) = 1.0;
  return P;
}

/// phi*_jk = recorded fluence of frame k (1 when none was applied).
inline FluenceMatrix true_fluence(const FrameSet& frames, std::size_t m_rot) {
  if (!frames.true_fluences) return FluenceMatrix::ones(m_rot, frames.count);
  return FluenceMatrix::per_frame(m_rot, *frames.true_fluences);
}

/// Slices re-inserted at g * R_j: the volume seen from a rotated frame,
/// without resampling the already compressed grid.
inline IntensityVolume reinsert(const EmcResult& run, const RotationSet& rots, const Quaternion& g,
                                const Detector& det, unsigned workers = 0) {
  std::vector<Quaternion> moved(rots.size());
  for (std::size_t j = 0; j < rots.size(); ++j) moved[j] = (g * rots.quaternions[j]).normalized();
  return compress(run.slices, moved, det, det.side, run.rotation_mass, workers).volume;
}

/// Scale factor s with sum(s * w) = sum(ref) over shell voxels unmasked in both.
inline double gauge_factor(const IntensityVolume& w, const IntensityVolume& ref, const ShellPartition& p) {
  double a = 0.0, b = 0.0;
  for (const auto& shell : p.voxels)
    for (std::size_t l : shell)
      if (!w.mask[l] && !ref.mask[l]) {
        a += w.values[l];
        b += ref.values[l];
      }
  return a > 0.0 ? b / a : 1.0;
}

enum class FrameVariant { k_star, k_zero, kf_star, kf_zero };
enum class Reference { best, truth };

inline const FrameSet& variant(const SyntheticDataset& d, FrameVariant v) {
  switch (v) {
    case FrameVariant::k_star: return d.k_star;
    case FrameVariant::k_zero: return d.k_zero;
    case FrameVariant::kf_star: return d.kf_star;
    case FrameVariant::kf_zero: return d.kf_zero;
  }
  return d.k_star;
}

/// One row of the error decomposition. Without `emc` the estimate is the
/// m_frames compressed at their true rotations.
struct ErrorChainSpec {
  std::string label;
  bool emc = true;
  FrameVariant e_frames = FrameVariant::k_zero;
  FrameVariant m_frames = FrameVariant::k_zero;
  bool true_responsibilities = false;
  bool true_fluence = true;
  bool smearing = false;  // compare against the truth instead of W*
  Reference reference() const { return smearing ? Reference::truth : Reference::best; }
};

/// Named rows: R_S, R_N, R_T, R_N+R_T, R_F, R_F+R_N, R_F+R_T, R_F+R_N+R_T,
/// and any of them prefixed with "R_S+" to measure against the truth.
inline ErrorChainSpec error_chain(const std::string& name) {
  using F = FrameVariant;
  ErrorChainSpec s;
  s.label = name;
  std::string base = name;
  if (base.rfind("R_S+", 0) == 0) {
    s.smearing = true;
    base = base.substr(4);
  }
  if (name == "R_S") {
    s.smearing = true;
    s.emc = false;
    s.e_frames = s.m_frames = F::k_star;
    return s;
  }
  struct Row {
    bool emc;
    F e, m;
    bool p_true, phi_true;
  };
  static const std::map<std::string, Row> rows{
      {"R_N", {false, F::k_zero, F::k_zero, true, true}},
      {"R_T", {true, F::k_zero, F::k_star, false, true}},
      {"R_N+R_T", {true, F::k_zero, F::k_zero, false, true}},
      {"R_F", {true, F::kf_zero, F::kf_star, true, false}},
      {"R_F+R_N", {true, F::kf_zero, F::kf_zero, true, false}},
      {"R_F+R_T", {true, F::kf_zero, F::kf_star, false, false}},
      {"R_F+R_N+R_T", {true, F::kf_zero, F::kf_zero, false, false}},
  };
  const auto it = rows.find(base);
  if (it == rows.end()) throw Error(ErrorKind::config, "unknown error chain '" + name + "'");
  s.emc = it->second.emc;
  s.e_frames = it->second.e;
  s.m_frames = it->second.m;
  s.true_responsibilities = it->second.p_true;
  s.true_fluence = it->second.phi_true;
  return s;
}

inline const std::vector<std::string>& standard_error_chains() {
  static const std::vector<std::string> names{"R_S",     "R_N",         "R_T",
                                              "R_N+R_T", "R_F+R_N+R_T", "R_S+R_N+R_T",
                                              "R_S+R_F+R_N+R_T"};
  return names;
}

struct ChainOptions {
  int align_restarts = 1;
  AlignOptions align;
  /// Rescale estimates whose fluence was estimated to the reference sum,
  /// fixing the phi * W scale ambiguity.
  bool match_scale = true;
};

struct ChainResult {
  ErrorChainSpec spec;
  ShellErrorCurve weak, strong;
  bool converged = true;
  int iterations = 0;
  Quaternion alignment;
  double scale = 1.0;
};

/// Measures error chains on one dataset, sharing EMC runs between chains
/// that differ only in their reference.
class ErrorChainRunner {
 public:
  ErrorChainRunner(const SyntheticDataset& data, EmcConfig config, ChainOptions options = {})
      : data_(data),
        config_(std::move(config)),
        options_(options),
        shells_(make_shells(data.spec.side, data.spec.side / 64.0 >= 1.0 ? data.spec.side / 64.0 : 1.0,
                            data.spec.mask_radius)) {
    require(config_.rotations != nullptr, "error chains: rotation set missing");
  }

  const ShellPartition& shells() const { return shells_; }

  const IntensityVolume& best() {
    if (!best_) best_ = best_reconstruction(data_.k_star, config_.workers);
    return *best_;
  }

  const EmcResult& emc_run(const ErrorChainSpec& s) {
    const auto key = std::make_tuple(static_cast<int>(s.e_frames), static_cast<int>(s.m_frames),
                                     s.true_responsibilities, s.true_fluence);
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    const RotationSet& rots = *config_.rotations;
    const FrameSet& ef = variant(data_, s.e_frames);
    const FrameSet& mf = variant(data_, s.m_frames);
    EmcProblem prob{&ef, &mf, std::nullopt, std::nullopt};
    if (s.true_responsibilities) prob.frozen_responsibilities = true_responsibilities(mf, rots);
    if (s.true_fluence) prob.frozen_fluence = true_fluence(mf, rots.size());
    const IntensityVolume init = initial_volume(mf.detector.side, mf.detector.mask_radius,
                                                mf.mean_unmasked_count(), config_.seed);
    return runs_.emplace(key, run_emc(prob, config_, init)).first->second;
  }

  ChainResult measure(const ErrorChainSpec& s) {
    require(s.smearing || s.label != "R_S", "R_S must be measured against the truth");
    ChainResult out;
    out.spec = s;
    const IntensityVolume& ref = s.smearing ? data_.truth : best();
    IntensityVolume est;
    if (!s.emc) {
      const FrameSet& mf = variant(data_, s.m_frames);
      est = s.label == "R_S" ? best() : best_reconstruction(mf, config_.workers);
    } else {
      const EmcResult& run = emc_run(s);
      out.converged = run.converged;
      out.iterations = run.iterations;
      if (s.true_responsibilities) {
        est = run.volume;
      } else {
        const Alignment a =
            align_volumes(run.volume, ref, options_.align_restarts, config_.seed, options_.align, &shells_);
        out.alignment = a.rotation;
        est = reinsert(run, *config_.rotations, a.rotation, variant(data_, s.m_frames).detector,
                       config_.workers);
      }
      if (!s.true_fluence && options_.match_scale) {
        out.scale = gauge_factor(est, ref, shells_);
        for (double& v : est.values) v *= out.scale;
      }
    }
    const Quaternion id = Quaternion::identity();
    out.weak = weak_shell_error(est, ref, id, shells_);
    out.strong = strong_shell_error(est, ref, id, shells_);
    out.weak.label = out.strong.label = s.label;
    return out;
  }

  ChainResult measure(const std::string& name) { return measure(error_chain(name)); }

 private:
  const SyntheticDataset& data_;
  EmcConfig config_;
  ChainOptions options_;
  ShellPartition shells_;
  std::optional<IntensityVolume> best_;
  std::map<std::tuple<int, int, bool, bool>, EmcResult> runs_;
};

inline ChainResult measure_error_chain(const ErrorChainSpec& spec, const SyntheticDataset& data,
                                       const EmcConfig& config, const ChainOptions& options = {}) {
  ErrorChainRunner runner(data, config, options);
  return runner.measure(spec);
}

/// R_S_hat = c(e(W_M)) - W_M over the given rotations.
inline IntensityVolume estimate_smearing(const IntensityVolume& w_m, std::span<const Quaternion> rotations,
                                         const Detector& det, unsigned workers = 0) {
  require(!rotations.empty(), "smearing estimate: no rotations");
  require(det.side == w_m.side, "smearing estimate: grid mismatch");
  const SliceStack slices = expand(w_m, rotations, det, workers);
  Compression c = compress(slices, rotations, det, w_m.side, {}, workers);
  IntensityVolume out(w_m.side);
  for (std::size_t l = 0; l < out.size(); ++l) {
    if (c.volume.mask[l] || w_m.mask[l]) {
      out.mask[l] = 1;
      continue;
    }
    out.values[l] = c.volume.values[l] - w_m.values[l];
  }
  return out;
}

struct BootstrapResult {
  std::string method;
  IntensityVolume W_M, V, R_std, R_bias, R_S_hat, R_total;
  int B = 0;
  double beta = 2.0;
  std::vector<Quaternion> alignments;  // per sample (standard) or of W_a (EMB)
  std::size_t unconverged = 0;
  std::size_t unseen_frames = 0;
};

/// R_total = sqrt(beta^2 R_std^2 + R_bias^2 + R_S_hat^2) voxelwise.
inline IntensityVolume compose_total(const IntensityVolume& r_std, const IntensityVolume& r_bias,
                                     const IntensityVolume& r_s, double beta) {
  IntensityVolume out(r_std.side);
  for (std::size_t l = 0; l < out.size(); ++l) {
    out.mask[l] = r_std.mask[l] | r_bias.mask[l] | r_s.mask[l];
    const double a = beta * r_std.values[l], b = r_bias.values[l], c = r_s.values[l];
    out.values[l] = std::sqrt(a * a + b * b + c * c);
  }
  return out;
}

struct BootstrapOptions {
  int B = 20;
  double beta = 2.0;
  std::uint64_t seed = 1;
  bool standard = true;
  bool emb = true;
  int align_restarts = 1;
  AlignOptions align;
};

struct BootstrapPair {
  EmcResult universe;
  std::optional<BootstrapResult> standard, emb;
  std::vector<std::vector<std::size_t>> picks;
};

/// Bootstrap resample r: M_data universe indices drawn with replacement.
inline std::vector<std::size_t> bootstrap_picks(std::size_t m_data, std::uint64_t seed, std::size_t r) {
  std::mt19937_64 rng(mix_seed(seed, r));
  std::uniform_int_distribution<std::size_t> pick(0, m_data - 1);
  std::vector<std::size_t> out(m_data);
  for (auto& k : out) k = pick(rng);
  return out;
}

/// Runs the universe and B resamples once and derives the standard and/or
/// EMB estimates from the same runs. Every run starts from the same model.
/// With estimated fluence each aligned sample is rescaled to the universe
/// sum before averaging, since phi * W fixes only the product.
inline BootstrapPair run_bootstrap(const FrameSet& universe, const EmcConfig& config,
                                   const BootstrapOptions& opt) {
  require(opt.B >= 2, "bootstrap needs B >= 2");
  require(opt.beta >= 0.0, "beta must be nonnegative");
  require(config.rotations != nullptr, "bootstrap: rotation set missing");
  const RotationSet& rots = *config.rotations;
  const Detector& det = universe.detector;
  const int side = det.side;
  const std::size_t n_vox = IntensityVolume::voxel_count(side);
  const ShellPartition shells = make_shells(side, std::max(1.0, side / 64.0), det.mask_radius);
  const IntensityVolume init =
      initial_volume(side, det.mask_radius, universe.mean_unmasked_count(), config.seed);

  BootstrapPair out;
  out.universe = run_emc(universe, config, init);
  const EmcResult& ua = out.universe;
  const IntensityVolume& w_a = ua.volume;
  const auto universe_modes = ua.modes();
  std::vector<Quaternion> mode_rotations(universe.count);
  for (std::size_t k = 0; k < universe.count; ++k) mode_rotations[k] = rots.quaternions[universe_modes[k]];

  std::vector<double> mean(n_vox, 0.0), m2(n_vox, 0.0);
  std::vector<std::uint8_t> mask = w_a.mask;
  RotationFrameMatrix counts;
  if (opt.emb) counts = RotationFrameMatrix(rots.size(), universe.count);
  std::vector<double> occurrences(universe.count, 0.0);
  std::vector<Quaternion> alignments;
  std::size_t unconverged = ua.converged ? 0 : 1;

  for (int r = 0; r < opt.B; ++r) {
    auto picks = bootstrap_picks(universe.count, opt.seed, static_cast<std::size_t>(r));
    const FrameSet sample = universe.subset(picks);
    const EmcResult run = run_emc(sample, config, init);
    unconverged += run.converged ? 0 : 1;
    const Alignment a = align_volumes(run.volume, w_a, opt.align_restarts,
                                      mix_seed(opt.seed, 0x616c6e + r), opt.align, &shells);
    alignments.push_back(a.rotation);
    if (opt.standard) {
      IntensityVolume aligned = reinsert(run, rots, a.rotation, det, config.workers);
      if (config.fluence_mode == FluenceMode::estimate) {
        const double g = gauge_factor(aligned, w_a, shells);
        for (double& v : aligned.values) v *= g;
      }
      const double n = r + 1.0;
      for (std::size_t l = 0; l < n_vox; ++l) {
        mask[l] |= aligned.mask[l];
        const double d = aligned.values[l] - mean[l];
        mean[l] += d / n;
        m2[l] += d * (aligned.values[l] - mean[l]);
      }
    }
    if (opt.emb) {
      const auto modes = run.modes();
      for (std::size_t t = 0; t < picks.size(); ++t) {
        const Quaternion moved = (a.rotation * rots.quaternions[modes[t]]).normalized();
        counts(nearest_rotation(rots, moved), picks[t]) += 1.0;
        occurrences[picks[t]] += 1.0;
      }
    }
    out.picks.push_back(std::move(picks));
  }

  const double B = opt.B;
  if (opt.standard) {
    BootstrapResult s;
    s.method = "standard";
    s.B = opt.B;
    s.beta = opt.beta;
    s.alignments = alignments;
    s.unconverged = unconverged;
    s.W_M = IntensityVolume(side);
    s.V = IntensityVolume(side);
    s.R_std = IntensityVolume(side);
    s.R_bias = IntensityVolume(side);
    for (std::size_t l = 0; l < n_vox; ++l) {
      s.W_M.mask[l] = s.V.mask[l] = s.R_std.mask[l] = s.R_bias.mask[l] = mask[l];
      if (mask[l]) continue;
      s.W_M.values[l] = mean[l];
      s.V.values[l] = m2[l] / (B - 1.0);
      s.R_std.values[l] = std::sqrt(s.V.values[l] / B);
      s.R_bias.values[l] = mean[l] - w_a.values[l];
    }
    s.R_S_hat = estimate_smearing(s.W_M, mode_rotations, det, config.workers);
    s.R_total = compose_total(s.R_std, s.R_bias, s.R_S_hat, opt.beta);
    out.standard = std::move(s);
  }

  if (opt.emb) {
    BootstrapResult e;
    e.method = "emb";
    e.B = opt.B;
    e.beta = opt.beta;
    e.unconverged = unconverged;
    ResponsibilityMatrix H(rots.size(), universe.count);
    for (std::size_t k = 0; k < universe.count; ++k) {
      if (occurrences[k] == 0.0) {
        ++e.unseen_frames;
        continue;
      }
      for (std::size_t j = 0; j < rots.size(); ++j) H(j, k) = counts(j, k) / occurrences[k];
    }
    const SliceUpdate mean2d = m_step_slices(universe, H, ua.fluence, nullptr, config.workers);
    SliceStack var2d(rots.size(), universe.pixel_count());
    for (std::size_t j = 0; j < rots.size(); ++j) {
      if (mean2d.mass[j] == 0.0) continue;
      auto w = mean2d.slices.row(j);
      auto v = var2d.row(j);
      double h_total = 0.0;
      for (std::size_t k = 0; k < universe.count; ++k) {
        const double h = H(j, k);
        if (h == 0.0) continue;
        h_total += h;
        const double phi = ua.fluence(j, k);
        auto f = universe.frame(k);
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double d = f[i] - phi * w[i];
          v[i] += h * d * d;
        }
      }
      for (double& x : v) x /= h_total;
    }
    e.W_M = compress(mean2d.slices, rots.quaternions, det, side, mean2d.mass, config.workers).volume;
    e.V = compress(var2d, rots.quaternions, det, side, mean2d.mass, config.workers).volume;
    const Alignment a = align_volumes(w_a, e.W_M, opt.align_restarts, mix_seed(opt.seed, 0x656d62),
                                      opt.align, &shells);
    e.alignments = {a.rotation};
    const IntensityVolume rw_a = reinsert(ua, rots, a.rotation, det, config.workers);
    e.R_std = IntensityVolume(side);
    e.R_bias = IntensityVolume(side);
    for (std::size_t l = 0; l < n_vox; ++l) {
      const std::uint8_t m = e.W_M.mask[l] | e.V.mask[l] | rw_a.mask[l];
      e.W_M.mask[l] = e.V.mask[l] = e.R_std.mask[l] = e.R_bias.mask[l] = m;
      if (m) {
        e.W_M.values[l] = e.V.values[l] = 0.0;
        continue;
      }
      e.R_std.values[l] = std::sqrt(std::max(0.0, e.V.values[l]) / B);
      e.R_bias.values[l] = e.W_M.values[l] - rw_a.values[l];
    }
    e.R_S_hat = estimate_smearing(e.W_M, mode_rotations, det, config.workers);
    e.R_total = compose_total(e.R_std, e.R_bias, e.R_S_hat, opt.beta);
    out.emb = std::move(e);
  }
  return out;
}

inline BootstrapResult standard_bootstrap(const FrameSet& universe, int B, double beta,
                                          const EmcConfig& config, std::uint64_t seed) {
  BootstrapOptions opt;
  opt.B = B;
  opt.beta = beta;
  opt.seed = seed;
  opt.emb = false;
  return *run_bootstrap(universe, config, opt).standard;
}

inline BootstrapResult emb_bootstrap(const FrameSet& universe, int B, double beta,
                                     const EmcConfig& config, std::uint64_t seed) {
  BootstrapOptions opt;
  opt.B = B;
  opt.beta = beta;
  opt.seed = seed;
  opt.standard = false;
  return *run_bootstrap(universe, config, opt).emb;
}

struct SweepSpec {
  double peak = 1000.0;
  bool background = false;
  std::size_t frames = 250;
};

struct SweepRow {
  SweepSpec spec;
  double mean_uncertainty = 0.0;  // shell mean of the bootstrap metric over r in [8, 30]
  ShellErrorCurve curve;
  std::size_t unconverged = 0;
};

struct SweepOptions {
  DatasetSpec dataset;            // side, beamstop, grid, fluence, seed
  double background_level = 0.5;  // mean photons per pixel of K_bg
  BootstrapOptions bootstrap;
};

/// For each spec: universe Po(c phi K* + t K_bg) at the requested peak, then
/// a standard bootstrap; reports the shell-mean bootstrap metric.
inline std::vector<SweepRow> intensity_sweep(const std::vector<SweepSpec>& specs,
                                             const EmcConfig& config, const SweepOptions& opt) {
  std::vector<SweepRow> rows;
  const BackgroundFrame bg =
      synthesize_background(opt.dataset.side, opt.background_level, mix_seed(opt.dataset.seed, 5));
  for (const SweepSpec& s : specs) {
    DatasetSpec ds = opt.dataset;
    ds.frames = s.frames;
    ds.peak = s.peak;
    const SyntheticDataset d = generate_dataset(ds, config.workers);
    FrameSet universe = add_background(d.kf_star, bg, 1.0, s.background ? 1.0 : 0.0,
                                       mix_seed(ds.seed, 6), config.workers);
    BootstrapOptions bo = opt.bootstrap;
    bo.emb = false;
    bo.standard = true;
    const BootstrapPair res = run_bootstrap(universe, config, bo);
    const ShellPartition shells =
        make_shells(ds.side, std::max(1.0, ds.side / 64.0), ds.mask_radius);
    SweepRow row;
    row.spec = s;
    row.curve = bootstrap_shell_error(res.standard->R_total, res.universe.volume, shells);
    row.curve.label = "R_total";
    row.mean_uncertainty = shell_mean(row.curve);
    row.unconverged = res.standard->unconverged;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace emcboot
