#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
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

/// Dense rotation-by-frame matrix, row-major (rotation j, frame k).
struct RotationFrameMatrix {
  std::size_t rotations = 0;
  std::size_t frames = 0;
  std::vector<double> values;

  RotationFrameMatrix() = default;
  RotationFrameMatrix(std::size_t m_rot, std::size_t m_data, double fill = 0.0)
      : rotations(m_rot), frames(m_data), values(m_rot * m_data, fill) {}

  double& operator()(std::size_t j, std::size_t k) { return values[j * frames + k]; }
  double operator()(std::size_t j, std::size_t k) const { return values[j * frames + k]; }
  std::span<const double> row(std::size_t j) const { return {values.data() + j * frames, frames}; }
};

/// P_jk; every column is a probability distribution over rotations.
struct ResponsibilityMatrix : RotationFrameMatrix {
  using RotationFrameMatrix::RotationFrameMatrix;

  /// Most probable rotation of frame k; the lowest index wins ties.
  std::size_t mode(std::size_t k) const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < rotations; ++j)
      if ((*this)(j, k) > (*this)(best, k)) best = j;
    return best;
  }
};

/// phi_jk > 0.
struct FluenceMatrix : RotationFrameMatrix {
  using RotationFrameMatrix::RotationFrameMatrix;

  static FluenceMatrix ones(std::size_t m_rot, std::size_t m_data) { return {m_rot, m_data, 1.0}; }

  /// phi_jk = per_frame[k] for every rotation.
  static FluenceMatrix per_frame(std::size_t m_rot, std::span<const double> per_frame) {
    FluenceMatrix f(m_rot, per_frame.size());
    for (std::size_t j = 0; j < m_rot; ++j)
      std::copy(per_frame.begin(), per_frame.end(), f.values.begin() + j * per_frame.size());
    return f;
  }
};

enum class FluenceMode { estimate, fixed };

struct EmcConfig {
  double epsilon = 1e-3;
  int max_iterations = 60;
  std::shared_ptr<const RotationSet> rotations;
  std::uint64_t seed = 1;
  FluenceMode fluence_mode = FluenceMode::estimate;
  // Leading iterations that run with unit fluence before estimation starts.
  int fluence_warmup = 10;
  double log_floor_ratio = 1e-12;
  unsigned workers = 0;
};

inline constexpr std::size_t kGemmBlock = 128;

namespace detail {

using MatrixMap = Eigen::Map<const Eigen::MatrixXd>;

inline MatrixMap frame_matrix(const FrameSet& frames) {
  return MatrixMap(frames.values.data(), static_cast<Eigen::Index>(frames.pixel_count()),
                   static_cast<Eigen::Index>(frames.count));
}

/// tau = ratio * (mean unmasked slice value); values below it enter logs as tau.
inline double log_floor(const SliceStack& slices, const Detector& det, double ratio) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < slices.rotations; ++j) {
    auto row = slices.row(j);
    for (std::size_t i = 0; i < row.size(); ++i)
      if (!det.mask[i]) {
        total += row[i];
        ++n;
      }
  }
  const double mean = n ? total / static_cast<double>(n) : 0.0;
  return mean > 0.0 ? ratio * mean : std::numeric_limits<double>::min();
}

/// Fills block columns with log(max(W_ij, tau)) over unmasked pixels.
inline Eigen::MatrixXd log_block(const SliceStack& slices, const Detector& det, double tau,
                                 std::size_t j0, std::size_t j1) {
  Eigen::MatrixXd L(static_cast<Eigen::Index>(slices.pixels), static_cast<Eigen::Index>(j1 - j0));
  for (std::size_t j = j0; j < j1; ++j) {
    auto row = slices.row(j);
    double* col = L.col(static_cast<Eigen::Index>(j - j0)).data();
    for (std::size_t i = 0; i < row.size(); ++i)
      col[i] = det.mask[i] ? 0.0 : std::log(std::max(row[i], tau));
  }
  return L;
}

inline std::vector<double> slice_sums(const SliceStack& slices, const Detector& det) {
  std::vector<double> s(slices.rotations, 0.0);
  for (std::size_t j = 0; j < slices.rotations; ++j) {
    auto row = slices.row(j);
    for (std::size_t i = 0; i < row.size(); ++i)
      if (!det.mask[i]) s[j] += row[i];
  }
  return s;
}

inline std::size_t block_count(std::size_t m_rot) { return (m_rot + kGemmBlock - 1) / kGemmBlock; }

}  // namespace detail

/// Q_jk = sum_i (K_ik log(phi_jk W_ij) - phi_jk W_ij) over unmasked pixels i,
/// the Poisson log-likelihood up to a per-frame constant. W enters the
/// logarithm floored at tau = ratio * mean(W).
inline RotationFrameMatrix log_likelihood_table(const FrameSet& frames, const SliceStack& slices,
                                                const FluenceMatrix& fluence,
                                                double log_floor_ratio = 1e-12,
                                                unsigned workers = 0) {
  const Detector& det = frames.detector;
  require(slices.pixels == frames.pixel_count(), "likelihood: pixel count mismatch");
  require(fluence.rotations == slices.rotations && fluence.frames == frames.count,
          "likelihood: fluence shape mismatch");
  const double tau = detail::log_floor(slices, det, log_floor_ratio);
  const auto sums = detail::slice_sums(slices, det);
  std::vector<double> totals(frames.count);
  for (std::size_t k = 0; k < frames.count; ++k) totals[k] = frames.frame_total(k);
  const auto K = detail::frame_matrix(frames);
  RotationFrameMatrix Q(slices.rotations, frames.count);
  parallel_for(detail::block_count(slices.rotations), workers, [&](std::size_t b) {
    const std::size_t j0 = b * kGemmBlock, j1 = std::min(slices.rotations, j0 + kGemmBlock);
    const Eigen::MatrixXd L = detail::log_block(slices, det, tau, j0, j1);
    const Eigen::MatrixXd G = L.transpose() * K;
    for (std::size_t j = j0; j < j1; ++j)
      for (std::size_t k = 0; k < frames.count; ++k) {
        const double phi = fluence(j, k);
        const double q = G(static_cast<Eigen::Index>(j - j0), static_cast<Eigen::Index>(k)) +
                         totals[k] * std::log(phi) - phi * sums[j];
        if (!std::isfinite(q))
          throw Error(ErrorKind::numeric, "log-likelihood is not finite for frame " +
                                              std::to_string(k) + ", rotation " + std::to_string(j));
        Q(j, k) = q;
      }
  });
  return Q;
}

/// Relative weights below exp(-700) (about 1e-304) are stored as exact
/// zeros rather than subnormals.
inline constexpr double kUnderflow = -700.0;

/// Column-wise normalization P_jk = w_j exp(Q_jk) / sum_j' w_j' exp(Q_j'k),
/// evaluated with the column maximum subtracted.
inline ResponsibilityMatrix responsibilities_from_table(const RotationFrameMatrix& Q,
                                                        std::span<const double> prior) {
  require(prior.size() == Q.rotations, "e-step: prior weight count mismatch");
  ResponsibilityMatrix P(Q.rotations, Q.frames);
  std::vector<double> log_w(prior.size());
  for (std::size_t j = 0; j < prior.size(); ++j) log_w[j] = std::log(prior[j]);
  for (std::size_t k = 0; k < Q.frames; ++k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < Q.rotations; ++j) mx = std::max(mx, log_w[j] + Q(j, k));
    if (!std::isfinite(mx))
      throw Error(ErrorKind::numeric, "no rotation explains frame " + std::to_string(k));
    double total = 0.0;
    for (std::size_t j = 0; j < Q.rotations; ++j) {
      const double x = log_w[j] + Q(j, k) - mx;
      const double e = x < kUnderflow ? 0.0 : std::exp(x);
      P(j, k) = e;
      total += e;
    }
    for (std::size_t j = 0; j < Q.rotations; ++j) P(j, k) /= total;
  }
  return P;
}

inline ResponsibilityMatrix e_step(const FrameSet& frames, const SliceStack& slices,
                                   const FluenceMatrix& fluence, std::span<const double> prior,
                                   double log_floor_ratio = 1e-12, unsigned workers = 0) {
  return responsibilities_from_table(
      log_likelihood_table(frames, slices, fluence, log_floor_ratio, workers), prior);
}

/// phi_jk = (sum_i K_ik / sum_i W_ij) * volume_sum_ratio. Fixed mode
/// returns all ones. Rotations with an all-zero slice are an error unless
/// `tolerate_empty`, in which case they get the bare ratio.
inline FluenceMatrix m_step_fluence(const FrameSet& frames, const SliceStack& slices,
                                    double volume_sum_ratio,
                                    FluenceMode mode = FluenceMode::estimate,
                                    bool tolerate_empty = false) {
  if (mode == FluenceMode::fixed) return FluenceMatrix::ones(slices.rotations, frames.count);
  const auto sums = detail::slice_sums(slices, frames.detector);
  std::vector<double> totals(frames.count);
  for (std::size_t k = 0; k < frames.count; ++k) totals[k] = frames.frame_total(k);
  FluenceMatrix phi(slices.rotations, frames.count);
  for (std::size_t j = 0; j < slices.rotations; ++j) {
    if (!(sums[j] > 0.0)) {
      if (!tolerate_empty)
        throw Error(ErrorKind::numeric, "fluence: slice of rotation " + std::to_string(j) + " is empty");
      for (std::size_t k = 0; k < frames.count; ++k) phi(j, k) = volume_sum_ratio;
      continue;
    }
    for (std::size_t k = 0; k < frames.count; ++k)
      phi(j, k) = totals[k] / sums[j] * volume_sum_ratio;
  }
  return phi;
}

namespace detail {

/// C_ij = sum_k P_jk K_ik, the shared numerator of the slice update and the
/// divergence. Blocks with dense P use a GEMM, sparse ones accumulate frames.
inline SliceStack weighted_frame_sums(const FrameSet& frames, const RotationFrameMatrix& P,
                                      unsigned workers) {
  const std::size_t m_rot = P.rotations, m_data = frames.count, m_pix = frames.pixel_count();
  SliceStack C(m_rot, m_pix);
  const auto K = frame_matrix(frames);
  const MatrixMap Pt(P.values.data(), static_cast<Eigen::Index>(m_data), static_cast<Eigen::Index>(m_rot));
  parallel_for(block_count(m_rot), workers, [&](std::size_t b) {
    const std::size_t j0 = b * kGemmBlock, j1 = std::min(m_rot, j0 + kGemmBlock);
    std::size_t nnz = 0;
    for (std::size_t j = j0; j < j1; ++j)
      for (double p : P.row(j)) nnz += p > 0.0;
    if (nnz * 20 > (j1 - j0) * m_data) {
      Eigen::Map<Eigen::MatrixXd> out(C.values.data() + j0 * m_pix, static_cast<Eigen::Index>(m_pix),
                                      static_cast<Eigen::Index>(j1 - j0));
      out.noalias() = K * Pt.middleCols(static_cast<Eigen::Index>(j0), static_cast<Eigen::Index>(j1 - j0));
      return;
    }
    for (std::size_t j = j0; j < j1; ++j) {
      auto row = C.row(j);
      for (std::size_t k = 0; k < m_data; ++k) {
        const double p = P(j, k);
        if (p == 0.0) continue;
        auto f = frames.frame(k);
        for (std::size_t i = 0; i < m_pix; ++i) row[i] += p * f[i];
      }
    }
  });
  return C;
}

/// Per-frame constants of the divergence: sum_i K log K and sum_i K.
struct FrameStats {
  std::vector<double> klogk, totals;
};

inline FrameStats frame_stats(const FrameSet& frames) {
  const Detector& det = frames.detector;
  FrameStats st{std::vector<double>(frames.count, 0.0), std::vector<double>(frames.count, 0.0)};
  for (std::size_t k = 0; k < frames.count; ++k) {
    auto f = frames.frame(k);
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (det.mask[i] || f[i] <= 0.0) continue;
      st.klogk[k] += f[i] * std::log(f[i]);
      st.totals[k] += f[i];
    }
  }
  return st;
}

/// D = sum_jk P_jk (sum_i K log K - K_k log phi_jk - K_k + phi_jk S_j)
///     - sum_ij C_ij log(max(W_ij, tau)),
/// the generalized KL divergence regrouped around C = P-weighted frame sums.
inline double divergence(const FrameSet& frames, const FrameStats& st, const RotationFrameMatrix& P,
                         const FluenceMatrix& phi, const SliceStack& slices, const SliceStack& C,
                         double log_floor_ratio) {
  const Detector& det = frames.detector;
  const double tau = log_floor(slices, det, log_floor_ratio);
  const auto sums = slice_sums(slices, det);
  double d = 0.0;
  for (std::size_t j = 0; j < P.rotations; ++j) {
    double acc = 0.0;
    bool assigned = false;
    for (std::size_t k = 0; k < P.frames; ++k) {
      const double p = P(j, k);
      if (p == 0.0) continue;
      assigned = true;
      const double f = phi(j, k);
      acc += p * (st.klogk[k] - st.totals[k] * std::log(f) - st.totals[k] + f * sums[j]);
    }
    if (!assigned) continue;  // C_j is zero too
    auto w = slices.row(j);
    auto c = C.row(j);
    for (std::size_t i = 0; i < w.size(); ++i)
      if (c[i] > 0.0 && !det.mask[i]) acc -= c[i] * std::log(std::max(w[i], tau));
    d += acc;
  }
  if (!std::isfinite(d)) throw Error(ErrorKind::numeric, "divergence is not finite");
  return d;
}

}  // namespace detail

struct SliceUpdate {
  SliceStack slices;
  std::vector<double> mass;  // sum_k P_jk, zero for skipped rotations
  std::size_t skipped = 0;   // rotations that kept their previous slice
};

/// W_ij = C_ij / sum_k P_jk phi_jk given the precomputed C = P-weighted sums.
inline SliceUpdate slices_from_sums(const RotationFrameMatrix& P, const FluenceMatrix& phi, const SliceStack& C,
                                    const SliceStack* previous) {
  const std::size_t m_rot = P.rotations, m_data = P.frames, m_pix = C.pixels;
  require(phi.rotations == m_rot && phi.frames == m_data && C.rotations == m_rot, "m-step: shape mismatch");
  require(!previous || (previous->rotations == m_rot && previous->pixels == m_pix),
          "m-step: previous slice shape mismatch");
  const double threshold = 1e-12 * static_cast<double>(m_data) / static_cast<double>(m_rot);
  SliceUpdate out{SliceStack(m_rot, m_pix), std::vector<double>(m_rot, 0.0), 0};
  for (std::size_t j = 0; j < m_rot; ++j) {
    double mass = 0.0, den = 0.0;
    for (std::size_t k = 0; k < m_data; ++k) {
      mass += P(j, k);
      den += P(j, k) * phi(j, k);
    }
    auto row = out.slices.row(j);
    if (mass < threshold || !(den > 0.0)) {
      ++out.skipped;
      if (previous) std::copy(previous->row(j).begin(), previous->row(j).end(), row.begin());
      continue;
    }
    out.mass[j] = mass;
    auto c = C.row(j);
    for (std::size_t i = 0; i < m_pix; ++i) row[i] = c[i] / den;
  }
  return out;
}

/// W_ij = sum_k P_jk K_ik / sum_k P_jk phi_jk. Rotations whose total
/// responsibility falls below 1e-12 * M_data / M_rot keep `previous`.
inline SliceUpdate m_step_slices(const FrameSet& frames, const RotationFrameMatrix& P,
                                 const FluenceMatrix& phi, const SliceStack* previous = nullptr,
                                 unsigned workers = 0) {
  require(P.frames == frames.count, "m-step: shape mismatch");
  return slices_from_sums(P, phi, detail::weighted_frame_sums(frames, P, workers), previous);
}

/// Generalized Kullback-Leibler objective of the M step,
///   D = sum_ijk P_jk [K_ik log(K_ik / (phi_jk W_ij)) - K_ik + phi_jk W_ij],
/// over unmasked pixels, with 0 log 0 = 0 and W floored at tau inside logs.
inline double klein_divergence(const FrameSet& frames, const RotationFrameMatrix& P,
                               const FluenceMatrix& phi, const SliceStack& slices,
                               double log_floor_ratio = 1e-12, unsigned workers = 0) {
  require(slices.rotations == P.rotations && slices.pixels == frames.pixel_count() &&
              P.frames == frames.count && phi.rotations == P.rotations && phi.frames == P.frames,
          "divergence: shape mismatch");
  return detail::divergence(frames, detail::frame_stats(frames), P, phi, slices,
                            detail::weighted_frame_sums(frames, P, workers), log_floor_ratio);
}

/// Random starting model: U(0.5, 1.5) * mean_level outside the beamstop
/// sphere, zero inside.
inline IntensityVolume initial_volume(int side, double mask_radius, double mean_level,
                                      std::uint64_t seed) {
  IntensityVolume vol(side);
  std::mt19937_64 rng(mix_seed(seed, 0x696e6974));
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (std::size_t l = 0; l < vol.size(); ++l) {
    const double r = u(rng);
    if (vol.radius(l) >= mask_radius) vol.values[l] = r * mean_level;
  }
  return vol;
}

/// Sum_l |a_l / mean(a) - b_l / mean(b)| over voxels outside the beamstop:
/// the stopping metric on unit-mean normalized volumes.
inline double normalized_change(const IntensityVolume& a, const IntensityVolume& b,
                                double mask_radius) {
  double sa = 0.0, sb = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.size(); ++l)
    if (a.radius(l) >= mask_radius) {
      sa += a.values[l];
      sb += b.values[l];
      ++n;
    }
  if (n == 0 || sa <= 0.0 || sb <= 0.0) return std::numeric_limits<double>::infinity();
  const double ma = sa / n, mb = sb / n;
  double change = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l)
    if (a.radius(l) >= mask_radius) change += std::abs(a.values[l] / ma - b.values[l] / mb);
  return change;
}

struct TraceRow {
  int iteration = 0;
  double change = 0.0;
  double divergence_before = 0.0;  // D before the fluence/slice update pair
  double divergence_after = 0.0;   // D after it
  std::size_t skipped_rotations = 0;
  std::size_t empty_voxels = 0;
};

struct EmcResult {
  IntensityVolume volume;
  ResponsibilityMatrix responsibilities;  // from the last E step
  FluenceMatrix fluence;                  // from the last M step
  SliceStack slices;                      // from the last M step
  std::vector<double> rotation_mass;      // compression weights of the last C step
  int iterations = 0;
  bool converged = false;
  std::vector<TraceRow> trace;

  /// Per-frame most probable rotation index.
  std::vector<std::size_t> modes() const {
    std::vector<std::size_t> m(responsibilities.frames);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = responsibilities.mode(k);
    return m;
  }
};

/// Inputs of one EMC run, general enough for the error-decomposition chains:
/// the E step may read different frames than the M step, and either the
/// responsibilities or the fluences may be frozen (their update is skipped).
struct EmcProblem {
  const FrameSet* e_frames = nullptr;
  const FrameSet* m_frames = nullptr;
  std::optional<ResponsibilityMatrix> frozen_responsibilities;
  std::optional<FluenceMatrix> frozen_fluence;
};

/// The expansion / expectation / maximization / compression loop. Each
/// compression weights slice j by its responsibility mass sum_k P_jk, so
/// rotations no frame is assigned to do not enter the volume. Stops when
/// the normalized change drops to epsilon or after max_iterations.
inline EmcResult run_emc(const EmcProblem& problem, const EmcConfig& config,
                         const IntensityVolume& initial) {
  require(problem.e_frames && problem.m_frames, "emc: frames missing");
  const FrameSet& ef = *problem.e_frames;
  const FrameSet& mf = *problem.m_frames;
  require(ef.count > 0 && ef.count == mf.count, "emc: E and M frame sets must be nonempty and equal");
  require(ef.pixel_count() == mf.pixel_count(), "emc: frame geometries differ");
  require(config.rotations && config.rotations->size() > 0, "emc: rotation set missing");
  require(config.epsilon > 0.0, "emc: epsilon must be positive");
  require(config.fluence_warmup >= 0, "emc: fluence warmup must be nonnegative");
  require(initial.side == mf.detector.side, "emc: volume side must match the detector");
  const RotationSet& rots = *config.rotations;
  const Detector& det = mf.detector;
  const double mask_radius = det.mask_radius;
  if (problem.frozen_responsibilities)
    require(problem.frozen_responsibilities->rotations == rots.size() &&
                problem.frozen_responsibilities->frames == mf.count,
            "emc: frozen responsibility shape mismatch");
  if (problem.frozen_fluence)
    require(problem.frozen_fluence->rotations == rots.size() &&
                problem.frozen_fluence->frames == mf.count,
            "emc: frozen fluence shape mismatch");

  const detail::FrameStats stats = detail::frame_stats(mf);
  EmcResult res;
  res.volume = initial;
  std::optional<double> previous_sum;
  FluenceMatrix phi;
  for (int it = 1; it <= config.max_iterations; ++it) {
    const SliceStack slices = expand(res.volume, rots.quaternions, det, config.workers);
    double current_sum = 0.0;
    for (std::size_t l = 0; l < res.volume.size(); ++l)
      if (res.volume.radius(l) >= mask_radius) current_sum += res.volume.values[l];
    const double ratio = previous_sum && current_sum > 0.0 ? *previous_sum / current_sum : 1.0;

    // The E step sees the fluence that maximizes Q for the current slices;
    // the normalization term enters only the M step.
    const bool warmup = !problem.frozen_fluence && config.fluence_mode == FluenceMode::estimate &&
                        it <= config.fluence_warmup;
    const FluenceMode mode = warmup ? FluenceMode::fixed : config.fluence_mode;
    phi = problem.frozen_fluence ? *problem.frozen_fluence
                                 : m_step_fluence(mf, slices, 1.0, mode, true);

    ResponsibilityMatrix P = problem.frozen_responsibilities
                                 ? *problem.frozen_responsibilities
                                 : e_step(ef, slices, phi, rots.weights, config.log_floor_ratio,
                                          config.workers);
    const SliceStack C = detail::weighted_frame_sums(mf, P, config.workers);
    TraceRow row;
    row.iteration = it;
    row.divergence_before = detail::divergence(mf, stats, P, phi, slices, C, config.log_floor_ratio);
    if (!problem.frozen_fluence && mode == FluenceMode::estimate)
      for (double& v : phi.values) v *= ratio;
    SliceUpdate upd = slices_from_sums(P, phi, C, &slices);
    row.divergence_after = detail::divergence(mf, stats, P, phi, upd.slices, C, config.log_floor_ratio);
    row.skipped_rotations = upd.skipped;

    Compression c = compress(upd.slices, rots.quaternions, det, res.volume.side, upd.mass,
                             config.workers);
    row.empty_voxels = c.empty_voxels;
    row.change = normalized_change(c.volume, res.volume, mask_radius);
    previous_sum = current_sum;

    res.volume = std::move(c.volume);
    res.responsibilities = std::move(P);
    res.fluence = phi;
    res.slices = std::move(upd.slices);
    res.rotation_mass = std::move(upd.mass);
    res.iterations = it;
    res.trace.push_back(row);
    if (row.change <= config.epsilon && !warmup) {
      res.converged = true;
      break;
    }
  }
  return res;
}

inline EmcResult run_emc(const FrameSet& frames, const EmcConfig& config,
                         const IntensityVolume& initial) {
  return run_emc(EmcProblem{&frames, &frames, std::nullopt, std::nullopt}, config, initial);
}

/// run_emc from the seeded random starting model.
inline EmcResult run_emc(const FrameSet& frames, const EmcConfig& config) {
  const IntensityVolume init = initial_volume(frames.detector.side, frames.detector.mask_radius,
                                              frames.mean_unmasked_count(), config.seed);
  return run_emc(frames, config, init);
}

}  // namespace emcboot
