#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/frames.hpp"
#include "emcboot/parallel.hpp"
#include "emcboot/quaternion.hpp"
#include "emcboot/rotations.hpp"
#include "emcboot/slicing.hpp"
#include "emcboot/volume.hpp"

namespace emcboot {

/// Radial shells S_u = {l : s_u <= |p_l| < s_{u+1}} in voxel units. Curves
/// report radii divided by `radius_unit`, so grids of different sides that
/// sample the same object share one radial axis.
struct ShellPartition {
  int side = 0;
  double radius_unit = 1.0;
  std::vector<double> boundaries;                // voxel units, size U + 1
  std::vector<std::vector<std::size_t>> voxels;  // size U

  std::size_t shells() const { return voxels.size(); }
  double lower(std::size_t u) const { return boundaries[u] / radius_unit; }
  double upper(std::size_t u) const { return boundaries[u + 1] / radius_unit; }
};

/// Shells of `width` voxels from radius `width` up to side / 2. Voxels
/// behind the beamstop (radius < excluded_radius) belong to no shell.
/// radius_unit defaults to the width.
inline ShellPartition make_shells(int side, double width = 1.0, double excluded_radius = 0.0,
                                  double radius_unit = 0.0) {
  require(side > 0, "shells: side must be positive");
  require(width > 0.0, "shells: width must be positive");
  ShellPartition p;
  p.side = side;
  p.radius_unit = radius_unit > 0.0 ? radius_unit : width;
  const double r_max = side / 2.0;
  for (double b = width; b <= r_max + 1e-9; b += width) p.boundaries.push_back(b);
  require(p.boundaries.size() >= 2, "shells: width too large for the grid");
  p.voxels.resize(p.boundaries.size() - 1);
  IntensityVolume probe;
  probe.side = side;
  const double lo = p.boundaries.front(), hi = p.boundaries.back();
  for (std::size_t l = 0; l < IntensityVolume::voxel_count(side); ++l) {
    const double r = probe.radius(l);
    if (r < lo || r >= hi || r < excluded_radius) continue;
    const auto u = static_cast<std::size_t>(std::floor((r - lo) / width));
    p.voxels[std::min(u, p.voxels.size() - 1)].push_back(l);
  }
  return p;
}

enum class ShellMetric { strong, weak, bootstrap };

inline std::string to_string(ShellMetric m) {
  switch (m) {
    case ShellMetric::strong: return "strong";
    case ShellMetric::weak: return "weak";
    case ShellMetric::bootstrap: return "bootstrap";
  }
  return "unknown";
}

/// Per-shell values; NaN marks a shell without usable voxels.
struct ShellErrorCurve {
  std::vector<double> lower, upper, values;
  std::vector<std::size_t> counts;
  ShellMetric metric = ShellMetric::weak;
  std::string label;

  std::size_t size() const { return values.size(); }
  double radius(std::size_t u) const { return 0.5 * (lower[u] + upper[u]); }
};

/// Mean over shells lying inside [lo, hi] (reported units), skipping absent ones.
inline double shell_mean(const ShellErrorCurve& c, double lo = 8.0, double hi = 30.0) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t u = 0; u < c.size(); ++u)
    if (c.lower[u] >= lo - 1e-9 && c.upper[u] <= hi + 1e-9 && std::isfinite(c.values[u])) {
      s += c.values[u];
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

/// Least-squares slope of value against shell radius over [lo, hi].
inline double shell_slope(const ShellErrorCurve& c, double lo = 8.0, double hi = 30.0) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t u = 0; u < c.size(); ++u)
    if (c.lower[u] >= lo - 1e-9 && c.upper[u] <= hi + 1e-9 && std::isfinite(c.values[u])) {
      const double x = c.radius(u), y = c.values[u];
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      ++n;
    }
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

namespace detail {

inline ShellErrorCurve empty_curve(const ShellPartition& p, ShellMetric m) {
  ShellErrorCurve c;
  c.metric = m;
  for (std::size_t u = 0; u < p.shells(); ++u) {
    c.lower.push_back(p.lower(u));
    c.upper.push_back(p.upper(u));
  }
  c.values.assign(p.shells(), std::numeric_limits<double>::quiet_NaN());
  c.counts.assign(p.shells(), 0);
  return c;
}

/// Trilinear value of `vol` at `point`; false outside the voxel-center hull
/// or when any corner is masked.
inline bool sample_unmasked(const IntensityVolume& vol, const Vec3& point, double& value) {
  if (!sample_inside(vol, point, value)) return false;
  const int n = vol.side;
  const double h = n / 2;
  int i0[3];
  for (int a = 0; a < 3; ++a) i0[a] = std::min(static_cast<int>(point[a] + h), n - 2);
  for (int c = 0; c < 8; ++c) {
    const std::size_t l = vol.index(i0[0] + (c & 1), i0[1] + ((c >> 1) & 1), i0[2] + ((c >> 2) & 1));
    if (vol.mask[l]) return false;
  }
  return true;
}

/// Value of R W2 at voxel l: W2 sampled at R^T p_l.
inline bool rotated_value(const IntensityVolume& w2, const Mat3& rt, const Vec3& p, double& v) {
  return sample_unmasked(w2, Quaternion::apply(rt, p), v);
}

inline Mat3 transpose(const Mat3& m) {
  Mat3 t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t[r][c] = m[c][r];
  return t;
}

}  // namespace detail

/// (R W)(p) = W(R^T p) by trilinear resampling. Voxels whose preimage leaves
/// the grid or touches a masked voxel come back masked.
inline IntensityVolume resample(const IntensityVolume& w, const Quaternion& r) {
  IntensityVolume out(w.side);
  const Mat3 rt = detail::transpose(r.matrix());
  for (std::size_t l = 0; l < out.size(); ++l) {
    double v;
    if (detail::rotated_value(w, rt, out.coordinate(l), v)) {
      out.values[l] = v;
    } else {
      out.mask[l] = 1;
    }
  }
  return out;
}

/// Default rho: 1e-6 times the mean unmasked |W1|.
inline double default_rho(const IntensityVolume& w1) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < w1.size(); ++l)
    if (!w1.mask[l]) {
      s += std::abs(w1.values[l]);
      ++n;
    }
  return n ? 1e-6 * s / static_cast<double>(n) : 1e-300;
}

/// Strong error: per-shell mean of |W1 - RW2| / max(rho, (|W1| + |RW2|) / 2).
/// rho <= 0 selects default_rho(W1).
inline ShellErrorCurve strong_shell_error(const IntensityVolume& w1, const IntensityVolume& w2,
                                          const Quaternion& r, const ShellPartition& p,
                                          double rho = 0.0) {
  require(w1.side == w2.side && w1.side == p.side, "strong error: grid mismatch");
  if (rho <= 0.0) rho = default_rho(w1);
  ShellErrorCurve c = detail::empty_curve(p, ShellMetric::strong);
  const Mat3 rt = detail::transpose(r.matrix());
  for (std::size_t u = 0; u < p.shells(); ++u) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t l : p.voxels[u]) {
      if (w1.mask[l]) continue;
      double b;
      if (!detail::rotated_value(w2, rt, w1.coordinate(l), b)) continue;
      const double a = w1.values[l];
      acc += std::abs(a - b) / std::max(rho, 0.5 * (std::abs(a) + std::abs(b)));
      ++n;
    }
    c.counts[u] = n;
    if (n) c.values[u] = acc / static_cast<double>(n);
  }
  return c;
}

/// Weak error: per-shell sum |W1 - RW2| over sum |W1 + RW2| / 2.
inline ShellErrorCurve weak_shell_error(const IntensityVolume& w1, const IntensityVolume& w2,
                                        const Quaternion& r, const ShellPartition& p,
                                        std::size_t stride = 1) {
  require(w1.side == w2.side && w1.side == p.side, "weak error: grid mismatch");
  require(stride >= 1, "weak error: stride must be positive");
  ShellErrorCurve c = detail::empty_curve(p, ShellMetric::weak);
  const Mat3 rt = detail::transpose(r.matrix());
  for (std::size_t u = 0; u < p.shells(); ++u) {
    double num = 0.0, den = 0.0;
    std::size_t n = 0;
    const auto& vox = p.voxels[u];
    for (std::size_t t = 0; t < vox.size(); t += stride) {
      const std::size_t l = vox[t];
      if (w1.mask[l]) continue;
      double b;
      if (!detail::rotated_value(w2, rt, w1.coordinate(l), b)) continue;
      const double a = w1.values[l];
      num += std::abs(a - b);
      den += 0.5 * std::abs(a + b);
      ++n;
    }
    c.counts[u] = n;
    if (n && den > 0.0) c.values[u] = num / den;
  }
  return c;
}

/// Bootstrap shell metric: sum |R_total| over sum |W_a| per shell.
inline ShellErrorCurve bootstrap_shell_error(const IntensityVolume& r_total,
                                             const IntensityVolume& w_a, const ShellPartition& p) {
  require(r_total.side == w_a.side && w_a.side == p.side, "bootstrap error: grid mismatch");
  ShellErrorCurve c = detail::empty_curve(p, ShellMetric::bootstrap);
  for (std::size_t u = 0; u < p.shells(); ++u) {
    double num = 0.0, den = 0.0;
    std::size_t n = 0;
    for (std::size_t l : p.voxels[u]) {
      if (w_a.mask[l]) continue;
      num += std::abs(r_total.values[l]);
      den += std::abs(w_a.values[l]);
      ++n;
    }
    c.counts[u] = n;
    if (n && den > 0.0) c.values[u] = num / den;
  }
  return c;
}

/// Mean over non-absent shells of the weak error.
inline double mean_weak_error(const IntensityVolume& w1, const IntensityVolume& w2,
                              const Quaternion& r, const ShellPartition& p,
                              std::size_t stride = 1) {
  const ShellErrorCurve c = weak_shell_error(w1, w2, r, p, stride);
  double s = 0.0;
  std::size_t n = 0;
  for (double v : c.values)
    if (std::isfinite(v)) {
      s += v;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::infinity();
}

struct AlignOptions {
  int coarse_n = 3;             // rotation grid of the coarse stage
  std::size_t coarse_stride = 8;  // voxel subsampling inside each shell
  std::size_t refine_from = 3;  // best coarse points refined per restart
  double step_tolerance_deg = 0.2;
  double score_tolerance = 1e-6;
  int max_evaluations = 400;
  unsigned workers = 0;
};

struct Alignment {
  Quaternion rotation;
  double score = 0.0;  // mean weak error of W_fixed against R W_moving
};

namespace detail {

/// Nelder-Mead over rotation-vector perturbations exp(v) * start.
inline Alignment refine_rotation(const IntensityVolume& moving, const IntensityVolume& fixed,
                                 const ShellPartition& p, const Quaternion& start, double step,
                                 const AlignOptions& opt) {
  auto at = [&](const Vec3& v) { return (Quaternion::from_rotation_vector(v) * start).normalized(); };
  auto f = [&](const Vec3& v) { return mean_weak_error(fixed, moving, at(v), p); };
  std::array<Vec3, 4> x{};
  std::array<double, 4> fx{};
  for (int a = 0; a < 3; ++a) x[a + 1][a] = step;
  for (int i = 0; i < 4; ++i) fx[i] = f(x[i]);
  int evals = 4;
  const double tol = opt.step_tolerance_deg * std::numbers::pi / 180.0;
  auto add = [](const Vec3& a, const Vec3& b, double s) {
    return Vec3{a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])};
  };
  while (evals < opt.max_evaluations) {
    std::array<int, 4> ord{0, 1, 2, 3};
    std::sort(ord.begin(), ord.end(), [&](int a, int b) { return fx[a] < fx[b]; });
    std::array<Vec3, 4> xs;
    std::array<double, 4> fs;
    for (int i = 0; i < 4; ++i) {
      xs[i] = x[ord[i]];
      fs[i] = fx[ord[i]];
    }
    x = xs;
    fx = fs;
    double diameter = 0.0;
    for (int i = 1; i < 4; ++i)
      diameter = std::max(diameter, norm(Vec3{x[i][0] - x[0][0], x[i][1] - x[0][1], x[i][2] - x[0][2]}));
    if (diameter < tol || fx[3] - fx[0] < opt.score_tolerance) break;
    Vec3 c{0, 0, 0};
    for (int i = 0; i < 3; ++i)
      for (int a = 0; a < 3; ++a) c[a] += x[i][a] / 3.0;
    const Vec3 xr = add(c, x[3], -1.0);
    const double fr = f(xr);
    ++evals;
    if (fr < fx[0]) {
      const Vec3 xe = add(c, x[3], -2.0);
      const double fe = f(xe);
      ++evals;
      if (fe < fr) {
        x[3] = xe;
        fx[3] = fe;
      } else {
        x[3] = xr;
        fx[3] = fr;
      }
    } else if (fr < fx[2]) {
      x[3] = xr;
      fx[3] = fr;
    } else {
      const bool outside = fr < fx[3];
      const Vec3 xc = outside ? add(c, xr, 0.5) : add(c, x[3], 0.5);
      const double fc = f(xc);
      ++evals;
      if (fc < std::min(fr, fx[3])) {
        x[3] = xc;
        fx[3] = fc;
      } else {
        for (int i = 1; i < 4; ++i) {
          x[i] = add(x[0], x[i], 0.5);
          fx[i] = f(x[i]);
          ++evals;
        }
      }
    }
  }
  int best = static_cast<int>(std::min_element(fx.begin(), fx.end()) - fx.begin());
  return {at(x[best]).canonical(), fx[best]};
}

}  // namespace detail

/// Finds R minimizing the shell-averaged weak error between W_fixed and
/// R W_moving: a coarse grid scan on subsampled voxels, then Nelder-Mead
/// from the best coarse points. Each restart offsets the coarse grid by a
/// random rotation; the result is the best member of the most populated
/// basin (solutions within 3 degrees share a basin).
inline Alignment align_volumes(const IntensityVolume& moving, const IntensityVolume& fixed,
                               int restarts = 1, std::uint64_t seed = 1,
                               const AlignOptions& opt = {}, const ShellPartition* shells = nullptr) {
  require(moving.side == fixed.side, "align: volumes differ in side");
  require(restarts >= 1, "align: restarts must be positive");
  const ShellPartition own =
      shells ? ShellPartition{} : make_shells(fixed.side, std::max(1.0, fixed.side / 64.0));
  const ShellPartition& p = shells ? *shells : own;
  // The score is not scale invariant, so compare at matched shell sums.
  double sm = 0.0, sf = 0.0;
  for (const auto& shell : p.voxels)
    for (std::size_t l : shell)
      if (!moving.mask[l] && !fixed.mask[l]) {
        sm += moving.values[l];
        sf += fixed.values[l];
      }
  std::optional<IntensityVolume> scaled;
  if (sm > 0.0 && sf > 0.0 && sm != sf) {
    scaled = moving;
    for (double& v : scaled->values) v *= sf / sm;
  }
  const IntensityVolume& mov = scaled ? *scaled : moving;
  const RotationSet grid = sample_rotation_grid(opt.coarse_n);
  const double spacing = 72.0 / opt.coarse_n * std::numbers::pi / 180.0;

  std::vector<Alignment> found(static_cast<std::size_t>(restarts));
  for (int r = 0; r < restarts; ++r) {
    const Quaternion offset = r == 0 ? Quaternion::identity()
                                     : random_rotation_set(1, mix_seed(seed, r)).quaternions[0];
    std::vector<double> score(grid.size());
    parallel_for(grid.size(), opt.workers, [&](std::size_t j) {
      score[j] = mean_weak_error(fixed, mov, (grid.quaternions[j] * offset).normalized(), p,
                                 opt.coarse_stride);
    });
    std::vector<std::size_t> order(grid.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] < score[b]; });
    const std::size_t m = std::min(opt.refine_from, order.size());
    std::vector<Alignment> cand(m);
    parallel_for(m, opt.workers, [&](std::size_t t) {
      cand[t] = detail::refine_rotation(mov, fixed, p,
                                        (grid.quaternions[order[t]] * offset).normalized(),
                                        0.5 * spacing, opt);
    });
    found[r] = *std::min_element(cand.begin(), cand.end(),
                                 [](const Alignment& a, const Alignment& b) { return a.score < b.score; });
  }
  const double basin = 3.0 * std::numbers::pi / 180.0;
  std::size_t best = 0, best_pop = 0;
  for (std::size_t i = 0; i < found.size(); ++i) {
    std::size_t pop = 0;
    for (const auto& g : found) pop += geodesic_distance(found[i].rotation, g.rotation) < basin;
    if (pop > best_pop || (pop == best_pop && found[i].score < found[best].score)) {
      best = i;
      best_pop = pop;
    }
  }
  return found[best];
}

/// Number of frames whose estimated rotation lies within `tolerance` of the
/// true one after factoring out the best single global rotation. Rotations
/// are compared modulo the object's symmetries (left factors) and the
/// in-plane half turn that maps every central slice of a Friedel-symmetric
/// volume onto itself (right factor).
inline std::size_t recovered_orientations(std::span<const Quaternion> truth,
                                          std::span<const Quaternion> estimated, double tolerance,
                                          std::span<const Quaternion> symmetries = {}) {
  require(truth.size() == estimated.size(), "recovered_orientations: size mismatch");
  std::vector<Quaternion> left(symmetries.begin(), symmetries.end());
  if (left.empty()) left.push_back(Quaternion::identity());
  const Quaternion right[2] = {Quaternion::identity(), Quaternion{0.0, 0.0, 0.0, 1.0}};
  auto matches = [&](const Quaternion& t, const Quaternion& e) {
    for (const Quaternion& s : left)
      for (const Quaternion& r : right)
        if (geodesic_distance(t, s * e * r) <= tolerance) return true;
    return false;
  };
  std::size_t best = 0;
  for (std::size_t c = 0; c < truth.size(); ++c)
    for (const Quaternion& s : left)
      for (const Quaternion& r : right) {
        const Quaternion g = (truth[c] * (s * estimated[c] * r).conjugate()).normalized();
        std::size_t hits = 0;
        for (std::size_t k = 0; k < truth.size(); ++k) hits += matches(truth[k], g * estimated[k]);
        best = std::max(best, hits);
      }
  return best;
}

struct Baselines {
  ShellErrorCurve r100_strong, r100_weak, r50_strong, r50_weak;
};

/// Reference failure levels: the noiseless frames compressed at random
/// rotations (all of them, or the first half with the rest at their true
/// rotations), each compared against `truth`.
inline Baselines hidden_data_baselines(const FrameSet& noiseless, const IntensityVolume& truth,
                                       const ShellPartition& p, std::uint64_t seed,
                                       unsigned workers = 0) {
  require(noiseless.true_rotations.has_value(), "baselines: true rotations not recorded");
  require(truth.side == noiseless.detector.side, "baselines: grid mismatch");
  const std::size_t m = noiseless.count;
  const RotationSet scrambled = random_rotation_set(m, seed);
  std::vector<Quaternion> half = *noiseless.true_rotations;
  for (std::size_t k = 0; k < m / 2; ++k) half[k] = scrambled.quaternions[k];
  const IntensityVolume w100 = compress_frames(noiseless, scrambled.quaternions, truth.side, workers).volume;
  const IntensityVolume w50 = compress_frames(noiseless, half, truth.side, workers).volume;
  const Quaternion id = Quaternion::identity();
  Baselines b{strong_shell_error(truth, w100, id, p), weak_shell_error(truth, w100, id, p),
              strong_shell_error(truth, w50, id, p), weak_shell_error(truth, w50, id, p)};
  b.r100_strong.label = b.r100_weak.label = "R_100";
  b.r50_strong.label = b.r50_weak.label = "R_50";
  return b;
}

}  // namespace emcboot
