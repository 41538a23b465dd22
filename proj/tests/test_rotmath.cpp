#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ptld/rotmath.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

using namespace ptld::rotmath;

namespace {

constexpr double kPi = std::numbers::pi;

// Independent route: 2 * acos(|q1 . q2|) through Eigen's quaternion conversion.
double quaternion_distance(const Rotation& a, const Rotation& b) {
  const Eigen::Quaterniond qa(a.matrix);
  const Eigen::Quaterniond qb(b.matrix);
  const double dot = std::min(1.0, std::abs(qa.coeffs().dot(qb.coeffs())));
  return 2.0 * std::acos(dot);
}

double max_abs_diff(const Mat3& a, const Mat3& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("rot6d of analytic rotations") {
  const Rot6D id = rot6d_from_matrix(Rotation::identity());
  CHECK(id == Rot6D{1, 0, 0, 0, 1, 0});

  const Rot6D rz = rot6d_from_matrix(rot_z(kPi / 2));
  const Rot6D expected{0, 1, 0, -1, 0, 0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(rz[i] == doctest::Approx(expected[i]).epsilon(1e-15));
}

TEST_CASE("rot6d round trip on seeded rotations") {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Rotation r = random_rotation(rng);
    const Rotation back = matrix_from_rot6d(rot6d_from_matrix(r));
    worst = std::max(worst, max_abs_diff(r.matrix, back.matrix));
    CHECK(is_valid_rotation(back));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("matrix_from_rot6d normalizes and rejects degenerate input") {
  CHECK(max_abs_diff(matrix_from_rot6d({1, 0, 0, 0, 1, 0}).matrix, Mat3::Identity()) == 0.0);
  CHECK(max_abs_diff(matrix_from_rot6d({2, 0, 0, 0, 3, 0}).matrix, Mat3::Identity()) < 1e-15);
  CHECK_THROWS_AS(matrix_from_rot6d({1, 0, 0, 1, 0, 0}), DegenerateInput);
  CHECK_THROWS_AS(matrix_from_rot6d({0, 0, 0, 0, 1, 0}), DegenerateInput);
}

TEST_CASE("geodesic distance") {
  CHECK(geodesic_distance(Rotation::identity(), Rotation::identity()) == 0.0);
  CHECK(geodesic_distance(Rotation::identity(), rot_z(0.7)) == doctest::Approx(0.7).epsilon(1e-12));

  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Rotation a = random_rotation(rng);
    const Rotation b = random_rotation(rng);
    worst = std::max(worst, std::abs(geodesic_distance(a, b) - quaternion_distance(a, b)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("geodesic distance is a metric on sampled triples") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const Rotation a = random_rotation(rng);
    const Rotation b = random_rotation(rng);
    const Rotation c = random_rotation(rng);
    const double ab = geodesic_distance(a, b);
    CHECK(ab == doctest::Approx(geodesic_distance(b, a)).epsilon(1e-12));
    CHECK(ab <= geodesic_distance(a, c) + geodesic_distance(c, b) + 1e-9);
    CHECK(geodesic_distance(a, a) < 1e-12);
    CHECK(ab >= 0.0);
    CHECK(ab <= kPi);
  }
}

TEST_CASE("exp map") {
  CHECK(max_abs_diff(exp_map(AngularVelocity{}, 0.05).matrix, Mat3::Identity()) == 0.0);
  const Rotation quarter = exp_map(AngularVelocity{Vec3(0, 0, kPi)}, 0.5);
  CHECK(max_abs_diff(quarter.matrix, rot_z(kPi / 2).matrix) < 1e-12);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1e-3);
  for (int i = 0; i < 200; ++i) {
    const AngularVelocity w{Vec3(n(rng), n(rng), n(rng))};
    const double dt = 0.05;
    CHECK(std::abs(geodesic_distance(exp_map(w, dt), Rotation::identity()) - w.omega.norm() * dt) < 1e-9);
  }
}

TEST_CASE("exp map composes along a shared axis") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 200; ++i) {
    const AngularVelocity w{Vec3(n(rng), n(rng), n(rng))};
    const Rotation lhs = exp_map(w, 0.13) * exp_map(w, 0.29);
    CHECK(max_abs_diff(lhs.matrix, exp_map(w, 0.42).matrix) < 1e-12);
  }
}

TEST_CASE("log map inverts exp map") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 500; ++i) {
    const Rotation r = random_rotation(rng);
    CHECK(max_abs_diff(exp_map(log_map(r)).matrix, r.matrix) < 1e-9);
  }
  const Rotation half = rot_x(kPi);
  CHECK(max_abs_diff(exp_map(log_map(half)).matrix, half.matrix) < 1e-9);
}

TEST_CASE("cone sampler respects the cap") {
  std::mt19937_64 rng(1);
  const Rotation zero = sample_goal_in_cone(rng, 0.0);
  CHECK(zero.matrix.col(2) == Vec3::UnitZ());

  const double theta = deg2rad(40.0);
  double max_tilt = 0.0;
  double min_tilt = 10.0;
  for (int i = 0; i < 10000; ++i) {
    const Rotation r = sample_goal_in_cone(rng, theta);
    const double t = tilt_angle(r);
    max_tilt = std::max(max_tilt, t);
    min_tilt = std::min(min_tilt, t);
  }
  CHECK(max_tilt <= theta + 1e-12);
  CHECK(min_tilt >= 0.0);
}

TEST_CASE("cone sampler matches the area-uniform cap CDF") {
  std::mt19937_64 rng(2024);
  const double theta = deg2rad(40.0);
  std::vector<double> tilts;
  for (int i = 0; i < 10000; ++i) tilts.push_back(tilt_angle(sample_goal_in_cone(rng, theta)));
  std::sort(tilts.begin(), tilts.end());
  const double denom = 1.0 - std::cos(theta);
  double ks = 0.0;
  const double n = static_cast<double>(tilts.size());
  for (std::size_t i = 0; i < tilts.size(); ++i) {
    const double cdf = (1.0 - std::cos(tilts[i])) / denom;
    ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
  }
  CHECK(ks < 0.02);
}

TEST_CASE("cone sampler is deterministic given the seed") {
  std::mt19937_64 a(99), b(99);
  for (int i = 0; i < 10; ++i) {
    CHECK(sample_goal_in_cone(a, 0.5).matrix == sample_goal_in_cone(b, 0.5).matrix);
  }
  std::mt19937_64 c(0);
  CHECK_THROWS_AS(sample_goal_in_cone(c, 2.0), std::invalid_argument);
}
