#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <unordered_map>
#include <vector>

#include "emcboot/common.hpp"
#include "emcboot/quaternion.hpp"

namespace emcboot {

/// Discretized rotation space with prior weights summing to one.
struct RotationSet {
  std::vector<Quaternion> quaternions;
  std::vector<double> weights;
  int refinement = 0;        // 600-cell refinement level, 0 when not a grid
  std::uint64_t seed = 0;    // seed for random sets

  std::size_t size() const { return quaternions.size(); }

  static RotationSet uniform(std::vector<Quaternion> qs, int refinement = 0, std::uint64_t seed = 0) {
    RotationSet set;
    const double w = qs.empty() ? 0.0 : 1.0 / static_cast<double>(qs.size());
    set.weights.assign(qs.size(), w);
    set.quaternions = std::move(qs);
    set.refinement = refinement;
    set.seed = seed;
    return set;
  }
};

/// Number of rotations produced by sample_rotation_grid(n).
constexpr std::size_t grid_size(int n) {
  const auto m = static_cast<std::size_t>(n);
  return 10 * (5 * m * m * m + m);
}

namespace detail {

/// The 120 vertices of the 600-cell on the unit 3-sphere.
inline std::vector<Quaternion> cell600_vertices() {
  std::vector<Quaternion> v;
  for (int axis = 0; axis < 4; ++axis) {
    for (double s : {1.0, -1.0}) {
      std::array<double, 4> c{};
      c[axis] = s;
      v.push_back({c[0], c[1], c[2], c[3]});
    }
  }
  for (int mask = 0; mask < 16; ++mask) {
    auto h = [&](int b) { return (mask >> b & 1) ? -0.5 : 0.5; };
    v.push_back({h(0), h(1), h(2), h(3)});
  }
  const double phi = 0.5 * (1.0 + std::sqrt(5.0));
  const std::array<double, 4> base{0.5 * phi, 0.5, 0.5 / phi, 0.0};
  // the 12 even permutations of four positions
  const int perms[12][4] = {{0, 1, 2, 3}, {0, 2, 3, 1}, {0, 3, 1, 2}, {1, 0, 3, 2},
                            {1, 2, 0, 3}, {1, 3, 2, 0}, {2, 0, 1, 3}, {2, 1, 3, 0},
                            {2, 3, 0, 1}, {3, 0, 2, 1}, {3, 1, 0, 2}, {3, 2, 1, 0}};
  for (const auto& p : perms) {
    for (int signs = 0; signs < 8; ++signs) {
      std::array<double, 4> c{};
      for (int i = 0; i < 3; ++i) c[p[i]] = (signs >> i & 1) ? -base[i] : base[i];
      c[p[3]] = 0.0;
      v.push_back({c[0], c[1], c[2], c[3]});
    }
  }
  return v;
}

/// Tetrahedral cells as vertex index quadruples (600 of them).
inline std::vector<std::array<int, 4>> cell600_cells(const std::vector<Quaternion>& v) {
  const int n = static_cast<int>(v.size());
  const double edge_dot = 0.25 * (1.0 + std::sqrt(5.0));  // cos(36 deg)
  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      adj[a][b] = a != b && std::abs(dot(v[a], v[b]) - edge_dot) < 1e-9;
  std::vector<std::array<int, 4>> cells;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      if (!adj[a][b]) continue;
      for (int c = b + 1; c < n; ++c) {
        if (!adj[a][c] || !adj[b][c]) continue;
        for (int d = c + 1; d < n; ++d)
          if (adj[a][d] && adj[b][d] && adj[c][d]) cells.push_back({a, b, c, d});
      }
    }
  return cells;
}

}  // namespace detail

/// Quasi-uniform grid on SO(3) from the n-fold refinement of the 600-cell:
/// barycentric lattice points of every tetrahedral cell, projected to the
/// 3-sphere and reduced modulo q ~ -q. Yields 10(5n^3 + n) rotations with
/// uniform weights, canonicalized to w >= 0.
inline RotationSet sample_rotation_grid(int n) {
  require(n >= 1, "rotation grid refinement must be >= 1");
  require(n < 512, "rotation grid refinement must be < 512");
  const auto verts = detail::cell600_vertices();
  const auto cells = detail::cell600_cells(verts);
  std::vector<int> antipode(verts.size());
  for (std::size_t a = 0; a < verts.size(); ++a)
    for (std::size_t b = 0; b < verts.size(); ++b)
      if (dot(verts[a], verts[b]) < -1.0 + 1e-9) antipode[a] = static_cast<int>(b);

  // A lattice point is identified exactly by its sorted (vertex, coefficient)
  // support; the antipodal point swaps every vertex for its antipode.
  using Term = std::pair<int, int>;
  auto encode = [](std::array<Term, 4> terms, int count) {
    std::sort(terms.begin(), terms.begin() + count);
    std::uint64_t key = 0;
    for (int i = 0; i < count; ++i)
      key = (key << 16) | (static_cast<std::uint64_t>(terms[i].first) << 9) |
            static_cast<std::uint64_t>(terms[i].second);
    return key;
  };

  std::unordered_map<std::uint64_t, std::size_t> seen;
  seen.reserve(grid_size(n) * 2);
  std::vector<Quaternion> out;
  out.reserve(grid_size(n));
  for (const auto& cell : cells) {
    for (int i = 0; i <= n; ++i)
      for (int j = 0; i + j <= n; ++j)
        for (int k = 0; i + j + k <= n; ++k) {
          const int coef[4] = {i, j, k, n - i - j - k};
          std::array<Term, 4> terms{}, anti{};
          int count = 0;
          for (int t = 0; t < 4; ++t) {
            if (coef[t] == 0) continue;
            terms[count] = {cell[t], coef[t]};
            anti[count] = {antipode[cell[t]], coef[t]};
            ++count;
          }
          const std::uint64_t key = std::min(encode(terms, count), encode(anti, count));
          if (seen.contains(key)) continue;
          seen.emplace(key, out.size());
          Quaternion q{0, 0, 0, 0};
          for (int t = 0; t < 4; ++t) {
            const Quaternion& v = verts[cell[t]];
            q.w += coef[t] * v.w;
            q.x += coef[t] * v.x;
            q.y += coef[t] * v.y;
            q.z += coef[t] * v.z;
          }
          out.push_back(q.normalized().canonical());
        }
  }
  return RotationSet::uniform(std::move(out), n);
}

/// Haar-uniform i.i.d. rotations (normalized Gaussian 4-vectors).
inline RotationSet random_rotation_set(std::size_t count, std::uint64_t seed) {
  require(count >= 1, "rotation count must be >= 1");
  std::mt19937_64 rng(mix_seed(seed, 0x726f74));
  std::normal_distribution<double> gauss;
  std::vector<Quaternion> qs;
  qs.reserve(count);
  while (qs.size() < count) {
    Quaternion q{gauss(rng), gauss(rng), gauss(rng), gauss(rng)};
    if (q.norm() < 1e-8) continue;
    qs.push_back(q.normalized().canonical());
  }
  return RotationSet::uniform(std::move(qs), 0, seed);
}

/// Draws `count` members of `grid` uniformly with replacement.
inline RotationSet pick_from_grid(const RotationSet& grid, std::size_t count, std::uint64_t seed) {
  require(grid.size() > 0, "cannot pick from an empty rotation set");
  std::mt19937_64 rng(mix_seed(seed, 0x7069636b));
  std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
  std::vector<Quaternion> qs;
  qs.reserve(count);
  for (std::size_t k = 0; k < count; ++k) qs.push_back(grid.quaternions[pick(rng)]);
  return RotationSet::uniform(std::move(qs), 0, seed);
}

/// Index of the member of `set` closest to q (lowest index on ties).
inline std::size_t nearest_rotation(const RotationSet& set, const Quaternion& q) {
  std::size_t best = 0;
  double best_dot = -1.0;
  for (std::size_t j = 0; j < set.size(); ++j) {
    const double d = std::abs(dot(set.quaternions[j], q));
    if (d > best_dot) {
      best_dot = d;
      best = j;
    }
  }
  return best;
}

/// Mean geodesic distance from a member to its nearest other member,
/// estimated over at most `max_probe` evenly strided members.
inline double mean_nearest_neighbor_spacing(const RotationSet& set, std::size_t max_probe = 2000) {
  const std::size_t m = set.size();
  if (m < 2) return 0.0;
  const std::size_t stride = std::max<std::size_t>(1, m / max_probe);
  double total = 0.0;
  std::size_t probes = 0;
  for (std::size_t a = 0; a < m; a += stride) {
    double best = -1.0;
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      best = std::max(best, std::abs(dot(set.quaternions[a], set.quaternions[b])));
    }
    total += 2.0 * std::acos(std::min(1.0, best));
    ++probes;
  }
  return total / static_cast<double>(probes);
}

}  // namespace emcboot
