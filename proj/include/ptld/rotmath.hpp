#pragma once

// SO(3) helpers used by the plants, the policies and the pose probe.

#include <Eigen/Core>

#include <array>
#include <random>
#include <stdexcept>

namespace ptld::rotmath {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

/// Rotation matrix, orthonormal with det +1.
struct Rotation {
  Mat3 matrix = Mat3::Identity();

  static Rotation identity() { return {}; }
  Rotation operator*(const Rotation& other) const { return {matrix * other.matrix}; }
  Rotation inverse() const { return {matrix.transpose()}; }
  Vec3 apply(const Vec3& v) const { return matrix * v; }
};

/// First two columns of a rotation matrix, column-major: [c0 | c1].
using Rot6D = std::array<double, 6>;

/// Angular velocity in rad/s.
struct AngularVelocity {
  Vec3 omega = Vec3::Zero();
};

class DegenerateInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Rot6D rot6d_from_matrix(const Rotation& r);

// Gram-Schmidt on the two stored columns; the third is their cross product.
Rotation matrix_from_rot6d(const Rot6D& r);

// arccos((tr(R1^T R2) - 1) / 2) with the argument clamped to [-1, 1].
double geodesic_distance(const Rotation& a, const Rotation& b);

Rotation exp_map(const AngularVelocity& w, double dt);
Rotation exp_map(const Vec3& rotation_vector);

// Inverse of exp_map, angle in [0, pi].
Vec3 log_map(const Rotation& r);

Rotation rot_x(double angle);
Rotation rot_y(double angle);
Rotation rot_z(double angle);

// Area-uniform sample of the +z axis image inside the spherical cap of half
// angle theta_max, followed by a uniform roll about the tilted axis.
Rotation sample_goal_in_cone(std::mt19937_64& rng, double theta_max);

// Tilt of R * z_hat away from z_hat, in [0, pi].
double tilt_angle(const Rotation& r);

// Haar-uniform random rotation (used by tests and grasp randomization).
Rotation random_rotation(std::mt19937_64& rng);

bool is_valid_rotation(const Rotation& r, double tol = 1e-9);

// Re-orthonormalize after long integration.
Rotation project_to_so3(const Mat3& m);

constexpr double deg2rad(double deg) { return deg * 3.14159265358979323846 / 180.0; }
constexpr double rad2deg(double rad) { return rad * 180.0 / 3.14159265358979323846; }

}  // namespace ptld::rotmath
