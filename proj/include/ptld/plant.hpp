#pragma once

// Toy in-hand manipulation plants.
//
// Task I (rotation): K fingers around a disc-like object with a three-lobed
// profile. Each finger has a radial joint (squeeze) and a tangential roller
// (drive). The object spins about z, its center slides in the plane and it
// sinks when friction cannot carry its weight.
//
// Task II (reorientation): 4 fingers x 2 joints drive the object's SO(3)
// orientation through fixed mixing matrices, gated by contact and corrupted
// by random slip. Goals are sampled in a cone about +z.
//
// Deployment plants add tactile frames, a noisy pose tracker, a lower
// friction range and one control step of actuation lag.

#include "ptld/config.hpp"
#include "ptld/rotmath.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::plant {

enum class Task { Rotation, Reorientation };

std::string task_name(Task t);
Task parse_task(const std::string& s);

class EmptyCache : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NotDeploymentPlant : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ContactDuringBaseline : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PoseNoise {
  double sigma_R = 0.0;  // rad, half-normal rotation error magnitude
  double sigma_p = 0.0;
  int latency_steps = 0;
  double p_dropout = 0.0;
};

struct TactileNoise {
  double sigma = 0.02;         // white noise per reading
  double offset_sigma = 0.2;   // static per-taxel offset
  double drift_rho = 0.9;      // AR(1) coefficient per tactile frame
  double drift_sigma = 0.01;   // AR(1) innovation
  double jitter_sigma = 0.25;  // slip jitter on the third channel
  double contact_width = 0.15; // taxel height kernel width
};

struct RewardTerm {
  std::string name;
  double scale = 0.0;
};

struct PlantParams {
  Task task = Task::Rotation;
  bool deployment = false;

  int K = 3;
  double dt_control = 0.05;
  int tactile_substeps = 5;
  int taxels_per_finger = 4;
  int max_steps = 200;

  double k_n = 10.0;
  double k_t = 2.0;
  double mu_min = 0.6;
  double mu_max = 1.0;
  double mass_min = 0.8;
  double mass_max = 1.2;
  double inertia = 0.1;
  double damping = 1.5;

  double N_min = 0.0;  // extra hold margin; the object sinks when mu * sum(N) < mass + N_min
  double z_drop = 0.3;
  int T_drop = 10;
  double delta_contact = 0.05;
  double fall_rate = 1.0;

  // Task I geometry and actuation
  double R_obj = 1.0;
  double lobe = 0.06;        // three-lobed radius modulation
  double ecc = 0.04;         // first and second harmonics, absorbed by the sliding center
  double dr_max = 0.12;      // radial command range about the grasp configuration
  double v_max = 1.0;        // roller speed limit
  double tau_r = 0.05;       // radial servo time constant
  double k_joint = 100.0;    // joint compliance seen by the position encoder
  double proprio_noise = 0.005;
  double c_p = 20.0;         // lateral drag
  double g_lat_max = 0.15;   // hidden lateral load
  double omega_clip = 1.0;
  double grasp_r_lo = 0.80;
  double grasp_r_hi = 0.98;

  // Task II
  double a_slip = 4.0;
  double N_slip = 1.0;
  double eta_max = 0.3;
  double beta = 0.5;
  double rot_gain = 8.0;
  double q_ref = 0.3;
  double N_0 = 0.5;
  double dq_max = 0.1;
  double servo_alpha = 0.5;  // per substep fraction of target error closed
  double k_p = 1.0;
  double omega_noise = 0.01;
  double q_lower = -1.5;
  double q_upper = 1.5;
  double q_cmd_lower = -2.0;
  double q_cmd_upper = 2.0;
  double finger_length = 0.5;
  double goal_cone = 0.6981317007977318;  // 40 degrees
  double success_tol = 0.25;
  double eps_goal = 0.1;
  int N_max_success = 10;

  PoseNoise pose;
  TactileNoise tactile;
  int actuation_lag = 0;

  std::vector<RewardTerm> rotation_rewards;
  std::vector<RewardTerm> reorientation_rewards;

  static PlantParams defaults(Task task, bool deployment = false);
  // Reads "plant.*" (or "deploy.*" overrides when deployment) and reward scales.
  static PlantParams from_config(Config& cfg, Task task, bool deployment);
  // Every field as config keys; hash() covers exactly these.
  Config to_config() const;
  std::uint64_t hash() const;
  void validate() const;

  int action_dim() const;
  int proprio_dim() const;
  int goal_dim() const;
  int pose_dim() const;
  int privileged_dim() const;
  int taxels() const { return K * taxels_per_finger; }
  int tactile_frame_dim() const { return taxels() * 3; }
  double scale_of(const std::string& term) const;

 private:
  void read_fields(Config& cfg);
};

std::vector<RewardTerm> default_rotation_rewards();
std::vector<RewardTerm> default_reorientation_rewards();

// Mixing matrix of finger i (Task II): column 0 flexion, column 1 abduction.
Eigen::Matrix<double, 3, 2> mixing_matrix(int finger);

struct PoseReading {
  rotmath::Vec3 position = rotmath::Vec3::Zero();
  rotmath::Rotation R = rotmath::Rotation::identity();
};

struct PlantState {
  Task task = Task::Rotation;
  std::mt19937_64 rng;
  int t = 0;
  int t0 = 0;
  bool dropped = false;
  bool timeout = false;
  int low_contact_steps = 0;

  double mu = 1.0;
  double mass = 1.0;
  std::vector<double> N;
  std::vector<std::uint8_t> slip;
  std::vector<double> action;       // applied this step
  std::vector<double> prev_action;  // applied the step before
  std::vector<double> pending;      // queued by the lag line

  // Task I
  double theta = 0.0;
  double theta_start = 0.0;
  double omega_z = 0.0;
  double z = 0.0;
  Eigen::Vector2d p = Eigen::Vector2d::Zero();
  Eigen::Vector2d p0 = Eigen::Vector2d::Zero();
  Eigen::Vector2d p_prev = Eigen::Vector2d::Zero();
  Eigen::Vector2d g_lat = Eigen::Vector2d::Zero();
  std::vector<double> r, r_grasp, r_target, v, f, r_meas;
  double work = 0.0;  // accumulated over the last control step

  // Task II
  rotmath::Rotation R = rotmath::Rotation::identity();
  rotmath::Rotation R_prev = rotmath::Rotation::identity();
  rotmath::Rotation goal = rotmath::Rotation::identity();
  rotmath::Vec3 omega = rotmath::Vec3::Zero();
  rotmath::Vec3 pos = rotmath::Vec3::Zero();
  rotmath::Vec3 pos0 = rotmath::Vec3::Zero();
  rotmath::Vec3 pos_prev = rotmath::Vec3::Zero();
  std::vector<double> q, q0, q_target, qdot, qdot_prev, tau, dq, eta;
  int streak = 0;
  int goals_reached = 0;

  // sensors
  std::deque<PoseReading> pose_history;
  PoseReading last_delivered;
  bool delivered_once = false;
  std::vector<double> tactile_raw;  // substeps x taxels x 3
  std::vector<double> tactile_offset;
  std::vector<double> tactile_drift;
  std::vector<double> tactile_baseline;
  std::vector<double> taxel_pos;  // taxels x 3

  int contacts(double delta_contact) const;
};

struct GraspEntry {
  std::vector<double> joints;  // Task I: radial r_i; Task II: q
  double theta = 0.0;          // Task I object angle
  rotmath::Rotation R = rotmath::Rotation::identity();
};

struct GraspCache {
  Task task = Task::Rotation;
  std::uint64_t seed = 0;
  std::vector<GraspEntry> entries;
};

struct RewardBreakdown {
  struct Entry {
    std::string name;
    double raw = 0.0;
    double scale = 0.0;
    double contribution = 0.0;
  };
  std::vector<Entry> terms;
  double total = 0.0;

  void add(const std::string& name, double raw, double scale);
  const Entry& at(const std::string& name) const;
};

struct ObservationBundle {
  std::vector<double> privileged;
  std::vector<double> proprio;
  std::vector<double> goal;
  std::vector<double> pose;
  std::vector<double> tactile;    // empty outside deployment plants
  std::vector<double> taxel_pos;  // empty outside deployment plants
};

struct GoalEvent {
  bool reached = false;
  bool done = false;
};

struct StepResult {
  ObservationBundle obs;
  RewardBreakdown reward;
  bool done = false;
  bool dropped = false;
  bool timeout = false;
  bool goal_reached = false;
};

PlantState reset(const PlantParams& params, std::mt19937_64& rng, const GraspCache& cache);
StepResult step(const PlantParams& params, PlantState& state, std::span<const double> action);
ObservationBundle observe(const PlantParams& params, PlantState& state);

// Reward of the transition that produced `state` under `action`.
RewardBreakdown reward_rotation(const PlantParams& params, const PlantState& state,
                                std::span<const double> action);
RewardBreakdown reward_reorientation(const PlantParams& params, const PlantState& state,
                                     std::span<const double> action);
GoalEvent goal_and_episode_reset(const PlantParams& params, PlantState& state);

GraspCache generate_grasp_cache(const PlantParams& params, std::mt19937_64& rng, std::size_t n);
bool grasp_is_stable(const PlantParams& params, const GraspEntry& entry, int steps);

std::vector<double> tactile_observe(const PlantParams& params, const PlantState& state,
                                    std::span<const double> baseline);
// Opens the fingers, records `duration_steps` control steps of tactile frames
// and returns the per-reading mean. Leaves the state's fingers open.
std::vector<double> estimate_tactile_baseline(const PlantParams& params, PlantState& state,
                                              int duration_steps);
PoseReading noisy_pose_sensor(const PlantParams& params, PlantState& state, std::mt19937_64& rng);
PoseReading true_pose(const PlantState& state);

// Radial profile of the Task I object at body angle alpha.
double object_radius(const PlantParams& params, double alpha);
double finger_angle(const PlantParams& params, int i);

// Convenience wrapper holding params, cache, state and the tactile baseline.
class Env {
 public:
  Env(PlantParams params, const GraspCache* cache, std::uint64_t seed);
  ObservationBundle reset();
  StepResult step(std::span<const double> action);
  const PlantParams& params() const { return params_; }
  PlantState& state() { return state_; }
  const PlantState& state() const { return state_; }
  void calibrate_tactile(int duration_steps);
  const std::vector<double>& baseline() const { return baseline_; }

 private:
  PlantParams params_;
  const GraspCache* cache_;
  std::mt19937_64 rng_;
  PlantState state_;
  std::vector<double> baseline_;
};

}  // namespace ptld::plant
