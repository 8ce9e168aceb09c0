#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace emcboot {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

/// Unit quaternion, scalar first. Rotations follow the active convention
/// v' = q v q*, so the quaternion for +90 degrees about z maps (1,0,0) to
/// (0,1,0). Composition: rotating by a and then by b is b * a.
struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion identity() { return {}; }

  static Quaternion from_axis_angle(const Vec3& axis, double angle) {
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    const double s = std::sin(0.5 * angle) / n;
    return {std::cos(0.5 * angle), axis[0] * s, axis[1] * s, axis[2] * s};
  }

  /// Exponential map of a rotation vector (axis * angle).
  static Quaternion from_rotation_vector(const Vec3& v) {
    const double angle = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (angle < 1e-300) return identity();
    return from_axis_angle(v, angle);
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  /// Sign representative with w > 0; on the w = 0 equator the first
  /// nonzero vector component is made positive.
  Quaternion canonical() const {
    constexpr double eps = 1e-14;
    double sign = 1.0;
    if (w < -eps) {
      sign = -1.0;
    } else if (std::abs(w) <= eps) {
      for (double c : {x, y, z}) {
        if (std::abs(c) > eps) {
          sign = c < 0 ? -1.0 : 1.0;
          break;
        }
      }
    }
    return {sign * w, sign * x, sign * y, sign * z};
  }

  Mat3 matrix() const {
    const double ww = w * w, xx = x * x, yy = y * y, zz = z * z;
    const double xy = x * y, xz = x * z, yz = y * z;
    const double wx = w * x, wy = w * y, wz = w * z;
    return {{{ww + xx - yy - zz, 2 * (xy - wz), 2 * (xz + wy)},
             {2 * (xy + wz), ww - xx + yy - zz, 2 * (yz - wx)},
             {2 * (xz - wy), 2 * (yz + wx), ww - xx - yy + zz}}};
  }

  Vec3 rotate(const Vec3& v) const { return apply(matrix(), v); }

  static Vec3 apply(const Mat3& m, const Vec3& v) {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
  }

  friend Quaternion operator*(const Quaternion& a, const Quaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
  }
};

inline double dot(const Quaternion& a, const Quaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

/// Rotation angle between two orientations, in [0, pi]. Insensitive to the
/// double cover.
inline double geodesic_distance(const Quaternion& a, const Quaternion& b) {
  const double c = std::min(1.0, std::abs(dot(a, b)));
  return 2.0 * std::acos(c);
}

inline std::vector<Vec3> rotate_coordinates(const Quaternion& q, std::span<const Vec3> coords) {
  const Mat3 m = q.matrix();
  std::vector<Vec3> out;
  out.reserve(coords.size());
  for (const auto& c : coords) out.push_back(Quaternion::apply(m, c));
  return out;
}

inline double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

}  // namespace emcboot
