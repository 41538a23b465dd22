#include "ptld/rotmath.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ptld::rotmath {

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return s;
}

constexpr double kDegenerateNorm = 1e-8;

}  // namespace

Rot6D rot6d_from_matrix(const Rotation& r) {
  const Mat3& m = r.matrix;
  return {m(0, 0), m(1, 0), m(2, 0), m(0, 1), m(1, 1), m(2, 1)};
}

Rotation matrix_from_rot6d(const Rot6D& r) {
  Vec3 a(r[0], r[1], r[2]);
  Vec3 b(r[3], r[4], r[5]);
  const double na = a.norm();
  if (!(na > kDegenerateNorm)) {
    throw DegenerateInput("rot6d: first column norm below threshold");
  }
  const Vec3 c0 = a / na;
  const Vec3 residual = b - c0.dot(b) * c0;
  const double nr = residual.norm();
  if (!(nr > kDegenerateNorm)) {
    throw DegenerateInput("rot6d: columns are (nearly) parallel");
  }
  const Vec3 c1 = residual / nr;
  Rotation out;
  out.matrix.col(0) = c0;
  out.matrix.col(1) = c1;
  out.matrix.col(2) = c0.cross(c1);
  return out;
}

double geodesic_distance(const Rotation& a, const Rotation& b) {
  // atan2 form of arccos((tr - 1) / 2); keeps full precision near 0 and pi.
  const Mat3 rel = a.matrix.transpose() * b.matrix;
  const double c = std::clamp((rel.trace() - 1.0) * 0.5, -1.0, 1.0);
  const Vec3 axis(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  const double s = 0.5 * axis.norm();
  return std::atan2(s, c);
}

Rotation exp_map(const Vec3& rv) {
  const double angle = rv.norm();
  const Mat3 k = skew(rv);
  double sa;  // sin(angle) / angle
  double cb;  // (1 - cos(angle)) / angle^2
  if (angle < 1e-4) {
    const double a2 = angle * angle;
    sa = 1.0 - a2 / 6.0 + a2 * a2 / 120.0;
    cb = 0.5 - a2 / 24.0 + a2 * a2 / 720.0;
  } else {
    sa = std::sin(angle) / angle;
    cb = (1.0 - std::cos(angle)) / (angle * angle);
  }
  return {Mat3::Identity() + sa * k + cb * k * k};
}

Rotation exp_map(const AngularVelocity& w, double dt) { return exp_map(Vec3(w.omega * dt)); }

Vec3 log_map(const Rotation& r) {
  const Mat3& m = r.matrix;
  const double angle = geodesic_distance(Rotation::identity(), r);
  const Vec3 v(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  if (angle < 1e-6) {
    return 0.5 * v;
  }
  if (std::numbers::pi - angle < 1e-4) {
    // Axis from the symmetric part: R + I = 2 a a^T near pi.
    const Mat3 s = 0.5 * (m + Mat3::Identity());
    Eigen::Index col = 0;
    s.diagonal().maxCoeff(&col);
    Vec3 axis = s.col(col) / std::sqrt(std::max(s(col, col), 1e-300));
    if (axis.dot(v) < 0.0) axis = -axis;
    return angle * axis.normalized();
  }
  return v * (angle / (2.0 * std::sin(angle)));
}

Rotation rot_x(double a) {
  return {Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix()};
}

Rotation rot_y(double a) {
  return {Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix()};
}

Rotation rot_z(double a) {
  Mat3 m;
  const double c = std::cos(a);
  const double s = std::sin(a);
  m << c, -s, 0.0,
       s, c, 0.0,
       0.0, 0.0, 1.0;
  return {m};
}

Rotation sample_goal_in_cone(std::mt19937_64& rng, double theta_max) {
  if (!(theta_max >= 0.0 && theta_max <= std::numbers::pi / 2 + 1e-12)) {
    throw std::invalid_argument("sample_goal_in_cone: theta_max must lie in [0, pi/2]");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double cos_max = std::cos(theta_max);
  const double cos_tilt = 1.0 - unit(rng) * (1.0 - cos_max);
  const double tilt = std::acos(std::clamp(cos_tilt, -1.0, 1.0));
  const double azimuth = 2.0 * std::numbers::pi * unit(rng);
  const double roll = 2.0 * std::numbers::pi * unit(rng);
  // Tilt about the horizontal axis perpendicular to the azimuth direction.
  const Vec3 axis(-std::sin(azimuth), std::cos(azimuth), 0.0);
  const Rotation tilt_rot = exp_map(Vec3(axis * tilt));
  return tilt_rot * rot_z(roll);
}

double tilt_angle(const Rotation& r) {
  const double cz = std::clamp(r.matrix(2, 2), -1.0, 1.0);
  const Vec3 z = r.matrix.col(2);
  return std::atan2(std::hypot(z.x(), z.y()), cz);
}

Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return {q.toRotationMatrix()};
}

bool is_valid_rotation(const Rotation& r, double tol) {
  const Mat3 gram = r.matrix.transpose() * r.matrix;
  if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(r.matrix.determinant() - 1.0) <= tol;
}

Rotation project_to_so3(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
  return {u * v.transpose()};
}

}  // namespace ptld::rotmath
