#include "ptld/plant.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ptld::plant {

using rotmath::Rotation;
using rotmath::Vec3;

namespace {

constexpr double kPi = std::numbers::pi;

// Observation scaling so every channel is O(1).
constexpr double kPosScale = 10.0;
constexpr double kZScale = 5.0;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double gauss(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::Vector2d finger_dir(const PlantParams& params, int i) {
  const double a = finger_angle(params, i);
  return {std::cos(a), std::sin(a)};
}

double taxel_height(const PlantParams& params, int j) {
  if (params.taxels_per_finger == 1) return 0.0;
  return -0.3 + 0.6 * j / (params.taxels_per_finger - 1);
}

// Task II fingertip position in the hand frame.
Vec3 fingertip(const PlantParams& params, const PlantState& s, int i) {
  const double a = kPi / 4 + i * kPi / 2;
  const Vec3 u(std::cos(a), std::sin(a), 0.0);
  const Vec3 t(-std::sin(a), std::cos(a), 0.0);
  const double l = params.finger_length;
  return u * (1.0 - l * s.q[2 * i]) + t * (0.5 * l * s.q[2 * i + 1]);
}

void push_frame(const PlantParams& params, PlantState& s, const std::vector<double>& contact_h,
                const std::vector<double>& shear) {
  const TactileNoise& tn = params.tactile;
  const int per = params.taxels_per_finger;
  for (int i = 0; i < params.K; ++i) {
    for (int j = 0; j < per; ++j) {
      const double d = taxel_height(params, j) - contact_h[i];
      const double k = std::exp(-d * d / (2 * tn.contact_width * tn.contact_width));
      const double clean[3] = {s.N[i] * k, shear[i] * k, s.slip[i] ? tn.jitter_sigma * gauss(s.rng) : 0.0};
      for (int c = 0; c < 3; ++c) {
        const std::size_t idx = static_cast<std::size_t>((i * per + j) * 3 + c);
        double& drift = s.tactile_drift[idx];
        drift = tn.drift_rho * drift + tn.drift_sigma * gauss(s.rng);
        s.tactile_raw.push_back(clean[c] + s.tactile_offset[idx] + drift + tn.sigma * gauss(s.rng));
      }
    }
  }
}

void sense_rotation(const PlantParams& params, PlantState& s) {
  std::vector<double> h(params.K, s.z);
  push_frame(params, s, h, s.f);
}

void sense_reorientation(const PlantParams& params, PlantState& s) {
  std::vector<double> h(params.K), shear(params.K);
  for (int i = 0; i < params.K; ++i) {
    h[i] = 0.3 * std::tanh(s.q[2 * i + 1]);
    shear[i] = s.N[i] * s.eta[i] * s.qdot[2 * i + 1];
  }
  push_frame(params, s, h, shear);
}

void update_taxel_positions(const PlantParams& params, PlantState& s) {
  s.taxel_pos.assign(static_cast<std::size_t>(params.taxels()) * 3, 0.0);
  for (int i = 0; i < params.K; ++i) {
    Vec3 base;
    if (params.task == Task::Rotation) {
      const Eigen::Vector2d u = finger_dir(params, i);
      base = Vec3(u.x() * s.r[i], u.y() * s.r[i], 0.0);
    } else {
      base = fingertip(params, s, i);
    }
    for (int j = 0; j < params.taxels_per_finger; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i * params.taxels_per_finger + j) * 3;
      s.taxel_pos[idx] = base.x();
      s.taxel_pos[idx + 1] = base.y();
      s.taxel_pos[idx + 2] = base.z() + taxel_height(params, j);
    }
  }
}

std::vector<double> take_action(const PlantParams& params, PlantState& s, std::span<const double> action) {
  const int n = params.action_dim();
  std::vector<double> a(n, 0.0);
  for (int i = 0; i < n && i < static_cast<int>(action.size()); ++i) {
    a[i] = std::isfinite(action[i]) ? std::clamp(action[i], -1.0, 1.0) : 0.0;
  }
  if (params.actuation_lag > 0) std::swap(a, s.pending);
  s.prev_action = s.action;
  s.action = a;
  return a;
}

void rotation_physics(const PlantParams& params, PlantState& s, const std::vector<double>& a) {
  const int K = params.K;
  const double h = params.dt_control / params.tactile_substeps;
  for (int i = 0; i < K; ++i) {
    s.r_target[i] = s.r_grasp[i] - a[2 * i] * params.dr_max;
    s.v[i] = a[2 * i + 1] * params.v_max;
  }
  s.p_prev = s.p;
  s.work = 0.0;
  const double servo = std::min(1.0, h / params.tau_r);
  for (int sub = 0; sub < params.tactile_substeps; ++sub) {
    std::vector<double> rdot(K);
    for (int i = 0; i < K; ++i) {
      rdot[i] = (s.r_target[i] - s.r[i]) * servo / h;
      s.r[i] += rdot[i] * h;
    }
    double torque = 0.0;
    double hold = 0.0;
    Eigen::Vector2d push = Eigen::Vector2d::Zero();
    for (int i = 0; i < K; ++i) {
      const Eigen::Vector2d u = finger_dir(params, i);
      const double rho = object_radius(params, finger_angle(params, i) - s.theta);
      const double depth = rho - (s.r[i] - s.p.dot(u));
      s.N[i] = params.k_n * std::max(0.0, depth);
      const double limit = s.mu * s.N[i];
      const double want = params.k_t * (s.v[i] - rho * s.omega_z);
      s.f[i] = std::clamp(want, -limit, limit);
      s.slip[i] = s.N[i] > 0.0 && std::abs(want) > limit;
      torque += rho * s.f[i];
      hold += limit;
      push -= s.N[i] * u;
      s.work += (std::abs(s.f[i] * s.v[i]) + s.N[i] * std::abs(rdot[i])) * h / params.dt_control;
    }
    s.omega_z += h * (torque - params.damping * s.omega_z) / params.inertia;
    s.theta += s.omega_z * h;
    s.p += h * (push + s.mass * s.g_lat) / params.c_p;
    const double weight = s.mass + params.N_min;
    if (hold < weight) s.z -= h * params.fall_rate * (1.0 - hold / weight);
    if (params.deployment) sense_rotation(params, s);
  }
  for (int i = 0; i < K; ++i) {
    s.r_meas[i] = s.r[i] + s.N[i] / params.k_joint;
  }
}

void reorientation_physics(const PlantParams& params, PlantState& s, const std::vector<double>& a) {
  const int K = params.K;
  const int nq = 2 * K;
  const double h = params.dt_control / params.tactile_substeps;
  for (int j = 0; j < nq; ++j) {
    s.q_target[j] = std::clamp(s.q_target[j] + a[j] * params.dq_max, params.q_cmd_lower, params.q_cmd_upper);
  }
  // Slip is drawn once per control step for every finger in contact.
  for (int i = 0; i < K; ++i) {
    const bool contact = s.N[i] > params.delta_contact;
    const bool slipping =
        contact && uniform(s.rng, 0.0, 1.0) < sigmoid(params.a_slip * (params.N_slip - s.N[i]));
    s.slip[i] = slipping;
    s.eta[i] = slipping ? uniform(s.rng, 0.0, params.eta_max) : 1.0;
  }
  s.R_prev = s.R;
  s.pos_prev = s.pos;
  s.qdot_prev = s.qdot;
  const std::vector<double> q_start = s.q;
  for (int j = 0; j < nq; ++j) s.tau[j] = params.k_p * (s.q_target[j] - s.q[j]);
  for (int sub = 0; sub < params.tactile_substeps; ++sub) {
    Vec3 drive = Vec3::Zero();
    double hold = 0.0;
    Vec3 push = Vec3::Zero();
    for (int i = 0; i < K; ++i) {
      Eigen::Vector2d qd;
      for (int k = 0; k < 2; ++k) {
        const int j = 2 * i + k;
        const double next = s.q[j] + params.servo_alpha * (s.q_target[j] - s.q[j]);
        s.qdot[j] = (next - s.q[j]) / h;
        s.q[j] = next;
        qd[k] = s.qdot[j];
      }
      s.N[i] = params.k_n * std::max(0.0, s.q[2 * i] - params.q_ref);
      if (s.N[i] <= params.delta_contact) s.slip[i] = 0;
      const double w = s.N[i] / (s.N[i] + params.N_0);
      drive += w * s.eta[i] * (mixing_matrix(i) * qd);
      hold += s.mu * s.N[i];
      const double ang = kPi / 4 + i * kPi / 2;
      push -= s.N[i] * Vec3(std::cos(ang), std::sin(ang), 0.0);
    }
    s.omega = (1.0 - params.beta) * s.omega + params.beta * params.rot_gain * drive;
    if (params.omega_noise > 0.0) {
      for (int k = 0; k < 3; ++k) s.omega[k] += params.omega_noise * gauss(s.rng);
    }
    s.R = rotmath::exp_map(rotmath::AngularVelocity{s.omega}, h) * s.R;
    Vec3 vel = push / params.c_p;
    const double weight = s.mass + params.N_min;
    vel.z() = hold < weight ? -params.fall_rate * (1.0 - hold / weight) : 0.0;
    s.pos += h * vel;
    if (params.deployment) sense_reorientation(params, s);
  }
  s.R = rotmath::project_to_so3(s.R.matrix);
  for (int j = 0; j < nq; ++j) s.dq[j] = s.q[j] - q_start[j];
}

void check_drop(const PlantParams& params, PlantState& s) {
  if (s.contacts(params.delta_contact) < 2) {
    ++s.low_contact_steps;
  } else {
    s.low_contact_steps = 0;
  }
  const double height = params.task == Task::Rotation ? s.z : s.pos.z();
  if (height < -params.z_drop || s.low_contact_steps >= params.T_drop) s.dropped = true;
}

void init_sensors(const PlantParams& params, PlantState& s) {
  s.pose_history.clear();
  s.delivered_once = false;
  s.tactile_raw.clear();
  if (!params.deployment) return;
  const std::size_t n = static_cast<std::size_t>(params.tactile_frame_dim());
  if (s.tactile_offset.size() != n) {
    s.tactile_offset.resize(n);
    for (auto& o : s.tactile_offset) o = params.tactile.offset_sigma * gauss(s.rng);
    s.tactile_drift.assign(n, 0.0);
  }
}

std::vector<double> rot6d_vec(const Rotation& R) {
  const auto r = rotmath::rot6d_from_matrix(R);
  return {r.begin(), r.end()};
}

void append(std::vector<double>& out, const std::vector<double>& v) { out.insert(out.end(), v.begin(), v.end()); }

}  // namespace

std::string task_name(Task t) { return t == Task::Rotation ? "rotation" : "reorientation"; }

Task parse_task(const std::string& s) {
  if (s == "rotation" || s == "I" || s == "1") return Task::Rotation;
  if (s == "reorientation" || s == "II" || s == "2") return Task::Reorientation;
  throw ConfigError("unknown task '" + s + "' (expected rotation or reorientation)");
}

std::vector<RewardTerm> default_rotation_rewards() {
  return {{"rotation", 1.0}, {"position", -0.5}, {"work", -0.05}, {"torque", -0.1}, {"off_axis", -0.1}};
}

std::vector<RewardTerm> default_reorientation_rewards() {
  return {{"goal", 2.0},
          {"success", 5.0},
          {"streak", 2.0},
          {"contact", 0.1},
          {"position", 0.05},
          {"finger_pose", -1.0},
          {"fingertip_object", -0.2},
          {"angular_velocity", -0.05},
          {"acceleration", -0.005},
          {"action", -0.005},
          {"action_rate", -0.2},
          {"joint_limit", -0.1},
          {"object_velocity", -1.0},
          {"torque", -0.5},
          {"work", -4.0},
          {"timeout", -1.0},
          {"alive", -0.01}};
}

PlantParams PlantParams::defaults(Task task, bool deployment) {
  PlantParams p;
  p.task = task;
  p.deployment = deployment;
  p.rotation_rewards = default_rotation_rewards();
  p.reorientation_rewards = default_reorientation_rewards();
  if (task == Task::Reorientation) {
    p.K = 4;
    p.k_n = 5.0;
    p.mu_min = 0.5;
    p.mu_max = 1.0;
    p.c_p = 50.0;
    p.max_steps = 300;
  }
  if (deployment) {
    p.actuation_lag = 1;
    p.pose = PoseNoise{0.05, 0.002, 1, 0.05};
    if (task == Task::Rotation) {
      p.mu_min = 0.35;
      p.mu_max = 0.6;
    } else {
      p.mu_min = 0.4;
      p.mu_max = 0.8;
      p.N_slip = 1.5;
    }
  } else {
    p.pose = PoseNoise{0.02, 0.001, 0, 0.0};
  }
  return p;
}

PlantParams PlantParams::from_config(Config& cfg, Task task, bool deployment) {
  PlantParams p = defaults(task, deployment);
  p.read_fields(cfg);
  p.validate();
  return p;
}

Config PlantParams::to_config() const {
  Config cfg;
  PlantParams copy = *this;
  copy.read_fields(cfg);
  cfg.set("plant.task", task_name(task));
  cfg.set("plant.deployment", deployment);
  return cfg;
}

std::uint64_t PlantParams::hash() const { return to_config().hash(); }

void PlantParams::read_fields(Config& cfg) {
  PlantParams& p = *this;
  const bool deployment = p.deployment;
  const Task task = p.task;
  const std::string tn = task == Task::Rotation ? "rotation" : "reorientation";
  // Shared keys live in [plant] (or [plant_reorientation]); deployment-only
  // overrides live in [deploy] / [deploy_reorientation].
  const std::string base = task == Task::Rotation ? "plant." : "plant_reorientation.";
  const std::string dep = task == Task::Rotation ? "deploy." : "deploy_reorientation.";
  auto rd = [&](const std::string& key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    field = static_cast<T>(cfg.get(base + key, field));
  };
  auto rd_dep = [&](const std::string& key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if (deployment) field = static_cast<T>(cfg.get(dep + key, field));
  };
  rd("K", p.K);
  rd("dt_control", p.dt_control);
  rd("tactile_substeps", p.tactile_substeps);
  rd("taxels_per_finger", p.taxels_per_finger);
  rd("max_steps", p.max_steps);
  rd("k_n", p.k_n);
  rd("k_t", p.k_t);
  rd("mass_min", p.mass_min);
  rd("mass_max", p.mass_max);
  rd("inertia", p.inertia);
  rd("damping", p.damping);
  rd("N_min", p.N_min);
  rd("z_drop", p.z_drop);
  rd("T_drop", p.T_drop);
  rd("delta_contact", p.delta_contact);
  rd("fall_rate", p.fall_rate);
  if (task == Task::Rotation) {
    rd("R_obj", p.R_obj);
    rd("lobe", p.lobe);
    rd("ecc", p.ecc);
    rd("dr_max", p.dr_max);
    rd("v_max", p.v_max);
    rd("tau_r", p.tau_r);
    rd("k_joint", p.k_joint);
    rd("proprio_noise", p.proprio_noise);
    rd("c_p", p.c_p);
    rd("g_lat_max", p.g_lat_max);
    rd("omega_clip", p.omega_clip);
    rd("grasp_r_lo", p.grasp_r_lo);
    rd("grasp_r_hi", p.grasp_r_hi);
  } else {
    rd("beta", p.beta);
    rd("rot_gain", p.rot_gain);
    rd("q_ref", p.q_ref);
    rd("N_0", p.N_0);
    rd("dq_max", p.dq_max);
    rd("servo_alpha", p.servo_alpha);
    rd("k_p", p.k_p);
    rd("omega_noise", p.omega_noise);
    rd("q_lower", p.q_lower);
    rd("q_upper", p.q_upper);
    rd("q_cmd_lower", p.q_cmd_lower);
    rd("q_cmd_upper", p.q_cmd_upper);
    rd("finger_length", p.finger_length);
    rd("goal_cone", p.goal_cone);
    rd("success_tol", p.success_tol);
    rd("eps_goal", p.eps_goal);
    rd("N_max_success", p.N_max_success);
    rd("c_p", p.c_p);
    rd("eta_max", p.eta_max);
    rd("a_slip", p.a_slip);
  }
  // Keys that differ between training and deployment plants.
  if (deployment) {
    rd_dep("mu_min", p.mu_min);
    rd_dep("mu_max", p.mu_max);
    rd_dep("actuation_lag", p.actuation_lag);
    rd_dep("pose_sigma_R", p.pose.sigma_R);
    rd_dep("pose_sigma_p", p.pose.sigma_p);
    rd_dep("pose_latency_steps", p.pose.latency_steps);
    rd_dep("pose_p_dropout", p.pose.p_dropout);
    rd_dep("tactile_sigma", p.tactile.sigma);
    rd_dep("tactile_offset_sigma", p.tactile.offset_sigma);
    rd_dep("tactile_drift_rho", p.tactile.drift_rho);
    rd_dep("tactile_drift_sigma", p.tactile.drift_sigma);
    rd_dep("tactile_jitter_sigma", p.tactile.jitter_sigma);
    rd_dep("tactile_contact_width", p.tactile.contact_width);
    if (task == Task::Reorientation) rd_dep("N_slip", p.N_slip);
  } else {
    rd("mu_min", p.mu_min);
    rd("mu_max", p.mu_max);
    rd("pose_sigma_R", p.pose.sigma_R);
    rd("pose_sigma_p", p.pose.sigma_p);
    rd("pose_latency_steps", p.pose.latency_steps);
    rd("pose_p_dropout", p.pose.p_dropout);
    if (task == Task::Reorientation) rd("N_slip", p.N_slip);
  }
  auto& terms = task == Task::Rotation ? p.rotation_rewards : p.reorientation_rewards;
  for (auto& t : terms) t.scale = cfg.get("reward_" + tn + "." + t.name, t.scale);
}

void PlantParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string("plant parameter ") + name + " must be > 0");
  };
  positive(K, "K");
  positive(dt_control, "dt_control");
  positive(k_n, "k_n");
  positive(k_t, "k_t");
  positive(inertia, "inertia");
  positive(z_drop, "z_drop");
  positive(T_drop, "T_drop");
  positive(delta_contact, "delta_contact");
  positive(taxels_per_finger, "taxels_per_finger");
  positive(max_steps, "max_steps");
  positive(mass_min, "mass_min");
  if (tactile_substeps < 1) throw ConfigError("plant parameter tactile_substeps must be >= 1");
  if (mu_min < 0.0 || mu_max < mu_min) throw ConfigError("plant friction range must satisfy 0 <= mu_min <= mu_max");
  if (mass_max < mass_min) throw ConfigError("plant mass range is empty");
  if (damping < 0.0) throw ConfigError("plant parameter damping must be >= 0");
  if (task == Task::Reorientation && K != 4) throw ConfigError("reorientation plant expects K = 4");
  if (goal_cone < 0.0 || goal_cone > kPi / 2) throw ConfigError("goal_cone must be in [0, pi/2]");
  if (pose.latency_steps < 0 || pose.p_dropout < 0.0 || pose.p_dropout > 1.0) {
    throw ConfigError("pose sensor latency and dropout out of range");
  }
  if (actuation_lag < 0 || actuation_lag > 1) throw ConfigError("actuation_lag must be 0 or 1");
}

int PlantParams::action_dim() const { return 2 * K; }
int PlantParams::proprio_dim() const { return 4 * K; }
int PlantParams::goal_dim() const { return task == Task::Rotation ? 0 : 6; }
int PlantParams::pose_dim() const { return task == Task::Rotation ? 5 : 15; }
int PlantParams::privileged_dim() const {
  if (task == Task::Rotation) return 22 + 3 * K + proprio_dim();
  return 26 + 6 * K + proprio_dim() + goal_dim();
}

double PlantParams::scale_of(const std::string& term) const {
  for (const auto& t : task == Task::Rotation ? rotation_rewards : reorientation_rewards) {
    if (t.name == term) return t.scale;
  }
  throw ConfigError("unknown reward term " + term);
}

Eigen::Matrix<double, 3, 2> mixing_matrix(int finger) {
  static const double s3 = 1.0 / std::sqrt(3.0);
  static const double s2 = 1.0 / std::sqrt(2.0);
  Eigen::Matrix<double, 3, 2> M;
  switch (finger) {
    case 0: M << 0, 1, s2, 0, s2, 0; break;
    case 1: M << s2, 0, 0, 1, -s2, 0; break;
    case 2: M << -s2, 0, s2, 0, 0, 1; break;
    default: M << 0, s3, -s2, -s3, s2, s3; break;
  }
  return M;
}

int PlantState::contacts(double delta_contact) const {
  return static_cast<int>(std::count_if(N.begin(), N.end(), [&](double n) { return n > delta_contact; }));
}

double object_radius(const PlantParams& params, double alpha) {
  return params.R_obj * (1.0 + params.ecc * (std::cos(alpha) + std::sin(2.0 * alpha)) + params.lobe * std::cos(3.0 * alpha));
}

double finger_angle(const PlantParams& params, int i) { return kPi / 2 + 2.0 * kPi * i / params.K; }

void RewardBreakdown::add(const std::string& name, double raw, double scale) {
  const double c = raw * scale;
  terms.push_back({name, raw, scale, c});
  total += c;
}

const RewardBreakdown::Entry& RewardBreakdown::at(const std::string& name) const {
  for (const auto& t : terms) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("no reward term " + name);
}

namespace {

PlantState blank_state(const PlantParams& params) {
  PlantState s;
  s.task = params.task;
  const std::size_t K = static_cast<std::size_t>(params.K);
  s.N.assign(K, 0.0);
  s.slip.assign(K, 0);
  s.action.assign(params.action_dim(), 0.0);
  s.prev_action = s.action;
  s.pending = s.action;
  if (params.task == Task::Rotation) {
    s.r.assign(K, params.R_obj);
    s.r_grasp = s.r;
    s.r_target = s.r;
    s.v.assign(K, 0.0);
    s.f.assign(K, 0.0);
    s.r_meas = s.r;
  } else {
    s.q.assign(2 * K, 0.0);
    s.q0 = s.q;
    s.q_target = s.q;
    s.qdot = s.q;
    s.qdot_prev = s.q;
    s.tau = s.q;
    s.dq = s.q;
    s.eta.assign(K, 1.0);
  }
  return s;
}

void load_entry(const PlantParams& params, PlantState& s, const GraspEntry& e) {
  if (params.task == Task::Rotation) {
    s.r = e.joints;
    s.r_grasp = e.joints;
    s.r_target = e.joints;
    s.theta = e.theta;
    s.theta_start = e.theta;
    for (int i = 0; i < params.K; ++i) {
      const double rho = object_radius(params, finger_angle(params, i) - s.theta);
      s.N[i] = params.k_n * std::max(0.0, rho - s.r[i]);
      s.r_meas[i] = s.r[i] + s.N[i] / params.k_joint;
    }
  } else {
    s.q = e.joints;
    s.q0 = e.joints;
    s.q_target = e.joints;
    s.R = e.R;
    s.R_prev = e.R;
    for (int i = 0; i < params.K; ++i) s.N[i] = params.k_n * std::max(0.0, s.q[2 * i] - params.q_ref);
  }
}

}  // namespace

PlantState reset(const PlantParams& params, std::mt19937_64& rng, const GraspCache& cache) {
  if (cache.entries.empty()) throw EmptyCache("grasp cache is empty");
  PlantState s = blank_state(params);
  const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, cache.entries.size() - 1)(rng);
  s.rng.seed(rng());
  load_entry(params, s, cache.entries[idx]);
  s.mu = uniform(s.rng, params.mu_min, params.mu_max);
  s.mass = uniform(s.rng, params.mass_min, params.mass_max);
  if (params.task == Task::Rotation) {
    const double ang = uniform(s.rng, 0.0, 2.0 * kPi);
    const double mag = params.g_lat_max * std::sqrt(uniform(s.rng, 0.0, 1.0));
    s.g_lat = Eigen::Vector2d(std::cos(ang), std::sin(ang)) * mag;
  } else {
    s.goal = rotmath::sample_goal_in_cone(s.rng, params.goal_cone);
  }
  init_sensors(params, s);
  return s;
}

StepResult step(const PlantParams& params, PlantState& s, std::span<const double> action) {
  StepResult out;
  const std::vector<double> a = take_action(params, s, action);
  s.tactile_raw.clear();
  if (params.task == Task::Rotation) {
    rotation_physics(params, s, a);
  } else {
    reorientation_physics(params, s, a);
  }
  ++s.t;
  check_drop(params, s);
  s.timeout = s.t >= params.max_steps;
  if (params.task == Task::Rotation) {
    out.reward = reward_rotation(params, s, a);
  } else {
    out.reward = reward_reorientation(params, s, a);
    out.goal_reached = goal_and_episode_reset(params, s).reached;
  }
  out.dropped = s.dropped;
  out.timeout = s.timeout;
  out.done = s.dropped || s.timeout;
  out.obs = observe(params, s);
  return out;
}

PoseReading true_pose(const PlantState& s) {
  PoseReading r;
  if (s.task == Task::Rotation) {
    r.position = Vec3(s.p.x(), s.p.y(), s.z);
    r.R = rotmath::rot_z(s.theta);
  } else {
    r.position = s.pos;
    r.R = s.R;
  }
  return r;
}

PoseReading noisy_pose_sensor(const PlantParams& params, PlantState& s, std::mt19937_64& rng) {
  const PoseNoise& pn = params.pose;
  if (s.pose_history.empty()) s.pose_history.push_front(true_pose(s));
  if (s.delivered_once && pn.p_dropout > 0.0 && uniform(rng, 0.0, 1.0) < pn.p_dropout) return s.last_delivered;
  const std::size_t lag = std::min<std::size_t>(static_cast<std::size_t>(pn.latency_steps), s.pose_history.size() - 1);
  PoseReading r = s.pose_history[lag];
  if (pn.sigma_R > 0.0) {
    Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
    axis.normalize();
    const double angle = std::abs(pn.sigma_R * gauss(rng));
    r.R = rotmath::exp_map(axis * angle) * r.R;
  }
  if (pn.sigma_p > 0.0) {
    for (int k = 0; k < 3; ++k) r.position[k] += pn.sigma_p * gauss(rng);
  }
  s.last_delivered = r;
  s.delivered_once = true;
  return r;
}

ObservationBundle observe(const PlantParams& params, PlantState& s) {
  ObservationBundle o;
  s.pose_history.push_front(true_pose(s));
  while (s.pose_history.size() > static_cast<std::size_t>(params.pose.latency_steps) + 1) s.pose_history.pop_back();
  const PoseReading pr = noisy_pose_sensor(params, s, s.rng);
  const int K = params.K;

  if (params.task == Task::Rotation) {
    for (int i = 0; i < K; ++i) {
      const double r = s.r_meas[i] + params.proprio_noise * gauss(s.rng);
      o.proprio.push_back((r - params.R_obj) / params.dr_max);
    }
    for (int i = 0; i < K; ++i) o.proprio.push_back(s.v[i] / params.v_max + params.proprio_noise * gauss(s.rng));
    append(o.proprio, s.action);
    const double th = std::atan2(pr.R.matrix(1, 0), pr.R.matrix(0, 0));
    o.pose = {std::cos(th), std::sin(th), kPosScale * pr.position.x(), kPosScale * pr.position.y(),
              kZScale * pr.position.z()};
    o.privileged = {s.omega_z,
                    std::cos(s.theta),
                    std::sin(s.theta),
                    std::cos(3.0 * s.theta),
                    std::sin(3.0 * s.theta),
                    kPosScale * s.p.x(),
                    kPosScale * s.p.y(),
                    kPosScale * (s.p.x() - s.p_prev.x()) / params.dt_control,
                    kPosScale * (s.p.y() - s.p_prev.y()) / params.dt_control,
                    kZScale * s.z,
                    s.mu,
                    s.mass,
                    kPosScale * s.g_lat.x(),
                    kPosScale * s.g_lat.y(),
                    s.work,
                    static_cast<double>(s.contacts(params.delta_contact)) / K,
                    s.mu * std::accumulate(s.N.begin(), s.N.end(), 0.0) / s.mass,
                    static_cast<double>(s.low_contact_steps) / params.T_drop,
                    static_cast<double>(s.t) / params.max_steps,
                    kPosScale * (s.p.x() - s.p0.x()),
                    kPosScale * (s.p.y() - s.p0.y()),
                    static_cast<double>(s.dropped)};
    for (int i = 0; i < K; ++i) o.privileged.push_back(s.N[i]);
    for (int i = 0; i < K; ++i) o.privileged.push_back(s.f[i]);
    for (int i = 0; i < K; ++i) o.privileged.push_back(static_cast<double>(s.slip[i]));
    append(o.privileged, o.proprio);
  } else {
    for (double q : s.q) o.proprio.push_back(q + params.proprio_noise * gauss(s.rng));
    append(o.proprio, s.q_target);
    o.goal = rot6d_vec(s.goal);
    for (int k = 0; k < 3; ++k) o.pose.push_back(kPosScale * pr.position[k]);
    append(o.pose, rot6d_vec(pr.R));
    append(o.pose, rot6d_vec(s.goal * pr.R.inverse()));

    append(o.privileged, rot6d_vec(s.R));
    append(o.privileged, rot6d_vec(s.goal * s.R.inverse()));
    for (int k = 0; k < 3; ++k) o.privileged.push_back(s.omega[k]);
    for (int k = 0; k < 3; ++k) o.privileged.push_back(kPosScale * s.pos[k]);
    for (int k = 0; k < 3; ++k) o.privileged.push_back(kPosScale * (s.pos[k] - s.pos_prev[k]) / params.dt_control);
    o.privileged.push_back(rotmath::geodesic_distance(s.R, s.goal));
    o.privileged.push_back(s.mu);
    o.privileged.push_back(s.mass);
    o.privileged.push_back(static_cast<double>(s.streak) / params.N_max_success);
    o.privileged.push_back(static_cast<double>(s.t) / params.max_steps);
    for (int i = 0; i < K; ++i) o.privileged.push_back(s.N[i]);
    for (int i = 0; i < K; ++i) o.privileged.push_back(static_cast<double>(s.slip[i]));
    for (int i = 0; i < K; ++i) o.privileged.push_back(s.eta[i]);
    for (int i = 0; i < K; ++i) {
      const Vec3 tip = fingertip(params, s, i) - s.pos;
      for (int k = 0; k < 3; ++k) o.privileged.push_back(tip[k]);
    }
    append(o.privileged, o.proprio);
    append(o.privileged, o.goal);
  }
  if (params.deployment) {
    update_taxel_positions(params, s);
    o.tactile = tactile_observe(params, s, s.tactile_baseline);
    o.taxel_pos = s.taxel_pos;
  }
  return o;
}

RewardBreakdown reward_rotation(const PlantParams& params, const PlantState& s, std::span<const double> action) {
  RewardBreakdown rb;
  (void)action;
  double effort = 0.0;
  for (std::size_t i = 0; i < s.N.size(); ++i) effort += s.N[i] * s.N[i] + s.f[i] * s.f[i];
  const double drift_rate = (s.p - s.p_prev).norm() / params.dt_control;
  for (const auto& term : params.rotation_rewards) {
    double raw = 0.0;
    if (term.name == "rotation") {
      raw = std::clamp(s.omega_z, -params.omega_clip, params.omega_clip);
    } else if (term.name == "position") {
      raw = (s.p - s.p0).norm();
    } else if (term.name == "work") {
      raw = s.work;
    } else if (term.name == "torque") {
      raw = effort;
    } else if (term.name == "off_axis") {
      raw = drift_rate;
    } else {
      throw ConfigError("unknown rotation reward term " + term.name);
    }
    rb.add(term.name, raw, term.scale);
  }
  return rb;
}

RewardBreakdown reward_reorientation(const PlantParams& params, const PlantState& s,
                                     std::span<const double> action) {
  RewardBreakdown rb;
  const double d = rotmath::geodesic_distance(s.R, s.goal);
  for (const auto& term : params.reorientation_rewards) {
    double raw = 0.0;
    const std::string& n = term.name;
    if (n == "goal") {
      raw = 1.0 / (d + params.eps_goal);
    } else if (n == "success") {
      raw = d <= params.success_tol ? 1.0 : 0.0;
    } else if (n == "streak") {
      raw = static_cast<double>(std::min(s.streak, params.N_max_success)) / params.N_max_success;
    } else if (n == "contact") {
      raw = s.contacts(params.delta_contact);
    } else if (n == "position") {
      raw = (s.pos - s.pos0).norm();
    } else if (n == "finger_pose") {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.q.size(); ++j) acc += (s.q[j] - s.q0[j]) * (s.q[j] - s.q0[j]);
      raw = std::sqrt(acc);
    } else if (n == "fingertip_object") {
      for (int i = 0; i < params.K; ++i) raw += (fingertip(params, s, i) - s.pos).norm();
    } else if (n == "angular_velocity") {
      raw = rotmath::geodesic_distance(s.R, s.R_prev) / params.dt_control;
    } else if (n == "acceleration") {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.qdot.size(); ++j) acc += (s.qdot[j] - s.qdot_prev[j]) * (s.qdot[j] - s.qdot_prev[j]);
      raw = std::sqrt(acc);
    } else if (n == "action") {
      double acc = 0.0;
      for (double a : action) acc += a * a;
      raw = std::sqrt(acc);
    } else if (n == "action_rate") {
      double acc = 0.0;
      for (std::size_t j = 0; j < action.size(); ++j) {
        const double prev = j < s.prev_action.size() ? s.prev_action[j] : 0.0;
        acc += (action[j] - prev) * (action[j] - prev);
      }
      raw = std::sqrt(acc);
    } else if (n == "joint_limit") {
      for (double q : s.q) raw += std::max(params.q_lower - q, 0.0) + std::max(q - params.q_upper, 0.0);
    } else if (n == "object_velocity") {
      raw = (s.pos - s.pos_prev).norm() / params.dt_control;
    } else if (n == "torque") {
      double acc = 0.0;
      for (double t : s.tau) acc += t * t;
      raw = std::sqrt(acc);
    } else if (n == "work") {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.tau.size(); ++j) acc += s.tau[j] * s.dq[j];
      raw = std::abs(acc);
    } else if (n == "timeout") {
      raw = (s.timeout || s.dropped) ? 1.0 : 0.0;
    } else if (n == "alive") {
      raw = (s.t - s.t0) * params.dt_control;
    } else {
      throw ConfigError("unknown reorientation reward term " + n);
    }
    rb.add(n, raw, term.scale);
  }
  return rb;
}

GoalEvent goal_and_episode_reset(const PlantParams& params, PlantState& s) {
  GoalEvent ev;
  if (rotmath::geodesic_distance(s.R, s.goal) <= params.success_tol) {
    ev.reached = true;
    s.streak = std::min(s.streak + 1, params.N_max_success);
    ++s.goals_reached;
    s.goal = rotmath::sample_goal_in_cone(s.rng, params.goal_cone);
  }
  ev.done = s.dropped || s.t >= params.max_steps;
  s.timeout = s.t >= params.max_steps;
  return ev;
}

bool grasp_is_stable(const PlantParams& params, const GraspEntry& entry, int steps) {
  PlantParams p = params;
  p.deployment = false;
  p.omega_noise = 0.0;
  PlantState s = blank_state(p);
  s.rng.seed(0);
  load_entry(p, s, entry);
  s.mu = p.mu_min;
  s.mass = p.mass_max;
  p.eta_max = 0.0;
  const std::vector<double> zero(p.action_dim(), 0.0);
  for (int k = 0; k < steps; ++k) {
    const std::vector<double> a = take_action(p, s, zero);
    if (p.task == Task::Rotation) {
      rotation_physics(p, s, a);
    } else {
      reorientation_physics(p, s, a);
    }
    ++s.t;
    check_drop(p, s);
    if (s.dropped) return false;
  }
  return true;
}

GraspCache generate_grasp_cache(const PlantParams& params, std::mt19937_64& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("grasp cache size must be positive");
  GraspCache cache;
  cache.task = params.task;
  cache.seed = rng();
  std::mt19937_64 gen(cache.seed);
  const std::size_t budget = 1000 * n;
  for (std::size_t attempt = 0; attempt < budget && cache.entries.size() < n; ++attempt) {
    GraspEntry e;
    if (params.task == Task::Rotation) {
      e.theta = uniform(gen, 0.0, 2.0 * kPi);
      for (int i = 0; i < params.K; ++i) e.joints.push_back(uniform(gen, params.grasp_r_lo, params.grasp_r_hi));
    } else {
      e.R = rotmath::Rotation::identity();
      for (int i = 0; i < params.K; ++i) {
        e.joints.push_back(uniform(gen, params.q_ref, params.q_ref + 0.8));
        e.joints.push_back(uniform(gen, -0.3, 0.3));
      }
    }
    if (grasp_is_stable(params, e, 50)) cache.entries.push_back(std::move(e));
  }
  if (cache.entries.size() < n) {
    throw BudgetExceeded("grasp cache: accepted " + std::to_string(cache.entries.size()) + " of " +
                         std::to_string(n) + " grasps within " + std::to_string(budget) +
                         " attempts (acceptance rate below 0.1%)");
  }
  return cache;
}

std::vector<double> tactile_observe(const PlantParams& params, const PlantState& s, std::span<const double> baseline) {
  if (!params.deployment) throw NotDeploymentPlant("tactile frames exist only in deployment plants");
  const std::size_t frame = static_cast<std::size_t>(params.tactile_frame_dim());
  if (!baseline.empty() && baseline.size() != frame) throw std::invalid_argument("tactile baseline has wrong size");
  std::vector<double> out = s.tactile_raw;
  if (out.empty()) out.assign(frame * params.tactile_substeps, 0.0);
  if (!baseline.empty()) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] -= baseline[k % frame];
  }
  return out;
}

std::vector<double> estimate_tactile_baseline(const PlantParams& params, PlantState& s, int duration_steps) {
  if (!params.deployment) throw NotDeploymentPlant("tactile baseline needs a deployment plant");
  if (duration_steps <= 0) throw std::invalid_argument("baseline duration must be positive");
  for (double n : s.N) {
    if (n > 0.0) throw ContactDuringBaseline("fingers are in contact during baseline collection");
  }
  if (s.tactile_offset.empty()) init_sensors(params, s);
  const std::size_t frame = static_cast<std::size_t>(params.tactile_frame_dim());
  std::vector<double> sum(frame, 0.0);
  std::size_t frames = 0;
  for (int k = 0; k < duration_steps; ++k) {
    s.tactile_raw.clear();
    for (int sub = 0; sub < params.tactile_substeps; ++sub) {
      if (params.task == Task::Rotation) {
        sense_rotation(params, s);
      } else {
        sense_reorientation(params, s);
      }
    }
    for (std::size_t j = 0; j < s.tactile_raw.size(); ++j) sum[j % frame] += s.tactile_raw[j];
    frames += params.tactile_substeps;
  }
  s.tactile_raw.clear();
  for (auto& v : sum) v /= static_cast<double>(frames);
  return sum;
}

Env::Env(PlantParams params, const GraspCache* cache, std::uint64_t seed)
    : params_(std::move(params)), cache_(cache), rng_(seed) {
  params_.validate();
}

ObservationBundle Env::reset() {
  if (cache_ == nullptr) throw EmptyCache("environment has no grasp cache");
  std::vector<double> offset = state_.tactile_offset;
  std::vector<double> drift = state_.tactile_drift;
  state_ = plant::reset(params_, rng_, *cache_);
  if (params_.deployment) {
    if (!offset.empty()) {
      state_.tactile_offset = offset;
      state_.tactile_drift = drift;
    }
    if (baseline_.empty()) calibrate_tactile(200);
    state_.tactile_baseline = baseline_;
  }
  return observe(params_, state_);
}

StepResult Env::step(std::span<const double> action) { return plant::step(params_, state_, action); }

void Env::calibrate_tactile(int duration_steps) {
  PlantState open = state_;
  std::fill(open.N.begin(), open.N.end(), 0.0);
  std::fill(open.slip.begin(), open.slip.end(), 0);
  baseline_ = estimate_tactile_baseline(params_, open, duration_steps);
  state_.tactile_offset = open.tactile_offset;
  state_.tactile_drift = open.tactile_drift;
  state_.rng = open.rng;
  state_.tactile_baseline = baseline_;
}

}  // namespace ptld::plant
