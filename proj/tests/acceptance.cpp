// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any fails.
// Expensive runs (teachers, oracles, distillation) are shared between criteria.

#include "ptld/distill.hpp"
#include "ptld/eval.hpp"
#include "ptld/nn.hpp"
#include "ptld/pipeline.hpp"
#include "ptld/rl.hpp"
#include "ptld/rotmath.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace ptld;
namespace fs = std::filesystem;
using ad::Tensor;
using ad::Var;
using plant::PlantParams;
using plant::Task;
using policy::ObsView;

namespace {

constexpr double kPi = std::numbers::pi;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Verdict {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Verdict> verdicts;
const auto t_start = std::chrono::steady_clock::now();

double elapsed() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
}

void progress(const std::string& msg) { std::fprintf(stderr, "[%7.1fs] %s\n", elapsed(), msg.c_str()); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void record(int id, const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({id, name, pass, detail});
  progress(fmt("C%d %s: %s", id, pass ? "PASS" : "FAIL", detail.c_str()));
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

std::string list(const std::vector<double>& v, const char* f = "%.3f") {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(f, v[i]);
  return s + "]";
}

double final_return(const rl::Checkpoint& ck) { return ck.curve.back().mean_return; }

bool net_finite(const policy::PolicyNet& n) {
  return n.actor.params.all_finite() && n.critic.params.all_finite() && n.pi.all_finite() && n.value.all_finite();
}

// ---- experiment scale ---------------------------------------------------------------

policy::NetConfig net_config(Task task) {
  policy::NetConfig n;
  n.encoder_hidden = {64, 64};
  n.pi_hidden = {64};
  n.value_hidden = {64, 64};
  n.frames = 3;
  n.log_std_init = task == Task::Rotation ? -0.5 : -1.5;
  n.tc_window_steps = 4;
  n.tc_embed = 16;
  n.tc_channels = {16};
  n.tc_head_hidden = {64};
  n.ar_embed = 32;
  n.ar_layers = 1;
  n.ar_heads = 2;
  n.ar_context = 8;
  n.ar_modal_hidden = 32;
  return n;
}

rl::PPOConfig ppo_config(Task task) {
  rl::PPOConfig c;
  c.envs = 16;
  c.horizon = task == Task::Rotation ? 16 : 32;
  c.updates = 2000;
  c.epochs = 2;
  c.minibatch = 128;
  c.lr = task == Task::Rotation ? 3e-4 : 1e-4;
  c.reward_scale = 0.1;
  return c;
}

distill::DistillConfig distill_config() {
  distill::DistillConfig d;
  d.dagger_rounds = 4;  // round 0 offline, then three DAgger rounds
  d.episodes_per_round = 10;
  d.eval_episodes = 5;
  d.epochs = 10;
  d.minibatch = 64;
  d.lr = 1e-3;
  return d;
}

struct TaskSetup {
  Task task;
  PlantParams train, deploy;
  plant::GraspCache cache;
  explicit TaskSetup(Task t)
      : task(t), train(PlantParams::defaults(t)), deploy(PlantParams::defaults(t, true)) {
    std::mt19937_64 rng(1);
    cache = plant::generate_grasp_cache(train, rng, 64);
  }
  rl::TrainSetup setup(ObsView view) const {
    rl::TrainSetup s;
    s.plant = train;
    s.net = net_config(task);
    s.ppo = ppo_config(task);
    s.view = view;
    s.cache = &cache;
    return s;
  }
};

// Aborts training as soon as any parameter stops being finite.
std::function<void(int, const policy::PolicyNet&)> finite_guard(const std::string& what) {
  return [what](int u, const policy::PolicyNet& n) {
    if (!net_finite(n)) throw rl::NaNLoss(what + ": non-finite parameter after update " + std::to_string(u));
  };
}

// ---- C1 -------------------------------------------------------------------------------

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.data) v = n(rng);
  return t;
}

nn::LossFn weighted_loss(std::size_t n, std::mt19937_64& rng) {
  auto w = std::make_shared<Tensor>(std::vector<std::size_t>{1, n}, 0.0);
  std::normal_distribution<double> d(0.0, 1.0);
  for (double& v : w->data) v = d(rng);
  return [w](Var y) {
    Var flat = ad::reshape(y, {1, y.value().size()});
    return ad::add(ad::sum(ad::mul(flat, y.tape->constant(*w))), ad::scale(ad::sum(ad::square(flat)), 0.1));
  };
}

void criterion_1() {
  std::mt19937_64 rng(101);
  std::vector<double> errs;

  const auto mlp = nn::mlp("mlp", 6, {16, 12}, 4, nn::Activation::Elu, nn::Activation::Tanh);
  ad::ParamSet pm = nn::init_params(mlp, rng);
  errs.push_back(nn::grad_check(mlp, pm, random_tensor({5, 6}, rng), weighted_loss(20, rng), rng, 400).max_rel_error);

  nn::NetworkSpec tc;
  tc.name = "tc";
  tc.seq_len = 10;
  tc.layers.emplace_back(nn::Linear{6, 8, nn::Activation::Elu});
  tc.layers.emplace_back(nn::TemporalConv1D{8, 6, 3, 2, true});
  tc.layers.emplace_back(nn::TemporalConv1D{6, 6, 3, 2, true});
  tc.layers.emplace_back(nn::Flatten{});
  tc.layers.emplace_back(nn::Linear{18, 4, nn::Activation::Tanh});
  ad::ParamSet pt = nn::init_params(tc, rng);
  errs.push_back(nn::grad_check(tc, pt, random_tensor({30, 6}, rng), weighted_loss(12, rng), rng, 400).max_rel_error);

  nn::NetworkSpec tf;
  tf.name = "tf";
  tf.seq_len = 6;
  tf.layers.emplace_back(nn::Linear{5, 8, nn::Activation::None});
  tf.layers.emplace_back(nn::CausalAttentionBlock{8, 2, 16});
  tf.layers.emplace_back(nn::LayerNorm{8});
  tf.layers.emplace_back(nn::Linear{8, 3, nn::Activation::None});
  ad::ParamSet pf = nn::init_params(tf, rng);
  errs.push_back(nn::grad_check(tf, pf, random_tensor({18, 5}, rng), weighted_loss(54, rng), rng, 400).max_rel_error);

  const bool ok = std::all_of(errs.begin(), errs.end(), [](double e) { return e < 1e-4; });
  record(1, "gradient correctness", ok,
         fmt("max relative error mlp %.2e, temporal conv %.2e, transformer %.2e (< 1e-4)", errs[0], errs[1], errs[2]));
}

// ---- C2 -------------------------------------------------------------------------------

double quaternion_distance(const rotmath::Rotation& a, const rotmath::Rotation& b) {
  const Eigen::Quaterniond qa(a.matrix), qb(b.matrix);
  return 2.0 * std::acos(std::min(1.0, std::abs(qa.coeffs().dot(qb.coeffs()))));
}

void criterion_2() {
  std::mt19937_64 rng(202);
  double round_trip = 0.0, geo = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto r = rotmath::random_rotation(rng);
    const auto back = rotmath::matrix_from_rot6d(rotmath::rot6d_from_matrix(r));
    round_trip = std::max(round_trip, (back.matrix - r.matrix).cwiseAbs().maxCoeff());
    const auto s = rotmath::random_rotation(rng);
    geo = std::max(geo, std::abs(rotmath::geodesic_distance(r, s) - quaternion_distance(r, s)));
  }
  const double cap = rotmath::deg2rad(40.0);
  std::vector<double> tilt;
  for (int i = 0; i < 10000; ++i) tilt.push_back(rotmath::tilt_angle(rotmath::sample_goal_in_cone(rng, cap)));
  std::sort(tilt.begin(), tilt.end());
  double ks = 0.0;
  const double n = static_cast<double>(tilt.size());
  for (std::size_t i = 0; i < tilt.size(); ++i) {
    const double cdf = (1.0 - std::cos(tilt[i])) / (1.0 - std::cos(cap));
    ks = std::max({ks, std::abs(cdf - i / n), std::abs(cdf - (i + 1) / n)});
  }
  record(2, "rotation math", round_trip < 1e-9 && geo < 1e-9 && ks < 0.02,
         fmt("6-D round trip %.1e, geodesic vs quaternion %.1e over 1000 pairs, cone KS %.4f (< 0.02)", round_trip, geo,
             ks));
}

// ---- C3 -------------------------------------------------------------------------------

double abs_sum(const std::map<std::string, Tensor>& g) {
  double s = 0.0;
  for (const auto& [n, t] : g)
    for (double v : t.data) s += std::abs(v);
  return s;
}

void criterion_3() {
  const TaskSetup ts(Task::Rotation);
  policy::NetConfig n;
  n.encoder_hidden = {16};
  n.pi_hidden = {16};
  n.value_hidden = {16};
  n.frames = 2;
  auto net = policy::make_policy(ts.train, ObsView::ProprioPose, n, 7);
  rl::VecEnv ve(ts.train, &ts.cache, 4, 11, net.actor.layout);
  std::mt19937_64 rng(3);
  rl::RolloutBuffer b = rl::collect_rollouts(ve, net, 8, rng);
  rl::gae_advantages(b, 0.99, 0.95);
  std::vector<std::size_t> idx(b.size());
  std::iota(idx.begin(), idx.end(), 0);
  rl::PPOConfig cfg;
  cfg.c_latent = 1.0;
  ad::Tape tape;
  const rl::LossVars l = rl::ppo_loss(tape, net, b, idx, cfg);
  tape.backward(l.latent);
  const double priv = abs_sum(tape.gradients(net.critic.params));
  const double actor = abs_sum(tape.gradients(net.actor.params));
  record(3, "stop-gradient semantics", priv == 0.0 && actor > 0.0 && l.latent.item() > 0.0,
         fmt("L_latent %.4f: |grad| privileged encoder %.1e (exact zero required), actor encoder %.3e", l.latent.item(),
             priv, actor));
}

// ---- C4 -------------------------------------------------------------------------------

// Hand-built state and its spreadsheet recomputation from the term definitions.
struct RewardCase {
  plant::PlantState s;
  std::vector<double> action;
  double expected = 0.0;
};

RewardCase reward_case(int k) {
  const PlantParams p = PlantParams::defaults(Task::Reorientation);
  RewardCase c;
  plant::PlantState& s = c.s;
  s.task = Task::Reorientation;
  const double kf = static_cast<double>(k);
  s.q = {0.4 + 0.05 * kf, 0.1, 0.5, -0.2 * (k % 3), 0.6, 0.0, 0.45, 0.05 * kf};
  if (k == 7) s.q[1] = 1.9;   // beyond the upper joint limit
  if (k == 8) s.q[3] = -1.75;  // beyond the lower joint limit
  s.q0 = {0.4, 0.1, 0.5, 0.0, 0.6, 0.0, 0.45, 0.0};
  s.qdot = {0.1 * kf, 0.0, -0.2, 0.0, 0.0, 0.3, 0.0, 0.0};
  s.qdot_prev = {0.0, 0.1, -0.2, 0.0, 0.0, 0.0, 0.0, 0.1};
  s.tau = {0.2, -0.1, 0.0, 0.3 * (k % 2), 0.1, 0.0, -0.4, 0.0};
  s.dq = {0.01, 0.02, 0.0, -0.01, 0.0, 0.03, 0.01, 0.0};
  s.N = {0.2 * (k % 4), 0.04, 0.3, 0.06 * kf};
  s.R = rotmath::rot_x(0.08 * kf);
  s.R_prev = rotmath::rot_x(0.08 * kf - 0.01);
  s.goal = rotmath::rot_y(0.1 * (k % 5));
  s.streak = std::min(2 * k, 13);
  s.pos = rotmath::Vec3(0.01 * kf, -0.02, 0.0);
  s.pos0 = rotmath::Vec3(0.0, 0.0, 0.0);
  s.pos_prev = rotmath::Vec3(0.01 * kf - 0.003, -0.02, 0.001);
  s.prev_action.assign(8, 0.1);
  s.t = 10 + k;
  s.t0 = 0;
  s.timeout = k == 9;
  s.dropped = k == 6;
  for (int j = 0; j < 8; ++j) c.action.push_back(0.1 * ((j + k) % 5) - 0.2);

  // goal
  const Eigen::Quaterniond qa(s.R.matrix), qg(s.goal.matrix);
  const double d = 2.0 * std::acos(std::min(1.0, std::abs(qa.coeffs().dot(qg.coeffs()))));
  double total = 2.0 * (1.0 / (d + 0.1));
  total += 5.0 * (d <= 0.25 ? 1.0 : 0.0);
  total += 2.0 * (std::min(s.streak, 10) / 10.0);
  int contacts = 0;
  for (double n : s.N) contacts += n > 0.05 ? 1 : 0;
  total += 0.1 * contacts;
  total += 0.05 * s.pos.norm();
  double fp = 0.0;
  for (int j = 0; j < 8; ++j) fp += (s.q[j] - s.q0[j]) * (s.q[j] - s.q0[j]);
  total += -1.0 * std::sqrt(fp);
  double tip = 0.0;
  for (int i = 0; i < 4; ++i) {
    // fingertip: radial unit u_i at 45 + 90 i degrees, pulled in by 0.5 q_grip, shifted 0.25 q_abd along the tangent
    const double a = kPi / 4 + i * kPi / 2;
    const double radial = 1.0 - 0.5 * s.q[2 * i];
    const double along = 0.25 * s.q[2 * i + 1];
    const double x = radial * std::cos(a) - along * std::sin(a) - s.pos.x();
    const double y = radial * std::sin(a) + along * std::cos(a) - s.pos.y();
    tip += std::sqrt(x * x + y * y + s.pos.z() * s.pos.z());
  }
  total += -0.2 * tip;
  const Eigen::Quaterniond qp(s.R_prev.matrix);
  const double dr = 2.0 * std::acos(std::min(1.0, std::abs(qa.coeffs().dot(qp.coeffs()))));
  total += -0.05 * dr / 0.05;
  double acc = 0.0, act = 0.0, rate = 0.0, lim = 0.0, torque = 0.0, work = 0.0;
  for (int j = 0; j < 8; ++j) {
    acc += std::pow(s.qdot[j] - s.qdot_prev[j], 2);
    act += c.action[j] * c.action[j];
    rate += std::pow(c.action[j] - s.prev_action[j], 2);
    lim += std::max(-1.5 - s.q[j], 0.0) + std::max(s.q[j] - 1.5, 0.0);
    torque += s.tau[j] * s.tau[j];
    work += s.tau[j] * s.dq[j];
  }
  total += -0.005 * std::sqrt(acc) - 0.005 * std::sqrt(act) - 0.2 * std::sqrt(rate) - 0.1 * lim;
  total += -1.0 * (s.pos - s.pos_prev).norm() / 0.05;
  total += -0.5 * std::sqrt(torque) - 4.0 * std::abs(work);
  total += -1.0 * ((s.timeout || s.dropped) ? 1.0 : 0.0);
  total += -0.01 * (s.t - s.t0) * 0.05;
  c.expected = total;
  (void)p;
  return c;
}

void criterion_4() {
  const PlantParams p = PlantParams::defaults(Task::Reorientation);
  double worst = 0.0;
  int covered_success = 0;
  for (int k = 0; k < 10; ++k) {
    const RewardCase c = reward_case(k);
    const plant::RewardBreakdown rb = plant::reward_reorientation(p, c.s, c.action);
    worst = std::max(worst, std::abs(rb.total - c.expected));
    covered_success += rb.at("success").raw > 0.0;
  }
  record(4, "reward fidelity", worst < 1e-9 && covered_success > 0,
         fmt("10 hand-built states, max |total - hand total| %.1e (< 1e-9); %d states inside the success threshold",
             worst, covered_success));
}

// ---- shared training runs (Task I) -------------------------------------------------

struct TaskIRuns {
  std::vector<rl::Checkpoint> pose, proprio, oracle, rma2;
};

TaskIRuns train_task_i(const TaskSetup& ts) {
  TaskIRuns r;
  for (std::uint64_t seed : kSeeds) {
    auto s = ts.setup(ObsView::ProprioPose);
    s.on_update = finite_guard("aac pose");
    r.pose.push_back(rl::train_aac(s, seed));
    progress(fmt("task I aac proprio+pose seed %llu: final return %.1f", (unsigned long long)seed,
                 final_return(r.pose.back())));

    s = ts.setup(ObsView::Proprio);
    s.on_update = finite_guard("aac proprio");
    r.proprio.push_back(rl::train_aac(s, seed));
    progress(fmt("task I aac proprio seed %llu: final return %.1f", (unsigned long long)seed,
                 final_return(r.proprio.back())));

    // Oracle at the full budget; its half-budget snapshot seeds stage 2 so
    // that stage 1 + stage 2 consume the same environment steps as AAC.
    s = ts.setup(ObsView::Privileged);
    const int half = s.ppo.updates / 2;
    rl::Checkpoint snapshot;
    s.on_update = [&, guard = finite_guard("rma1")](int u, const policy::PolicyNet& n) {
      guard(u, n);
      if (u == half) {
        snapshot.stage = "rma1";
        snapshot.net = n;
        snapshot.seed = seed;
        snapshot.env_steps = static_cast<std::uint64_t>(u) * s.ppo.envs * s.ppo.horizon;
      }
    };
    r.oracle.push_back(rl::train_rma_stage1(s, seed));
    snapshot.curve.assign(r.oracle.back().curve.begin(), r.oracle.back().curve.begin() + half);

    auto s2 = ts.setup(ObsView::ProprioPose);
    s2.ppo.updates = half;
    s2.on_update = finite_guard("rma2");
    rl::Stage2Options o;
    o.student_view = ObsView::ProprioPose;
    r.rma2.push_back(rl::train_rma_stage2(snapshot, s2, o, seed));
    progress(fmt("task I rma oracle seed %llu: final %.1f; stage 2 final %.1f", (unsigned long long)seed,
                 final_return(r.oracle.back()), final_return(r.rma2.back())));
  }
  return r;
}

void criterion_5(const TaskIRuns& r) {
  std::vector<double> pose, prop;
  int wins = 0;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    pose.push_back(final_return(r.pose[i]));
    prop.push_back(final_return(r.proprio[i]));
    wins += pose.back() > prop.back();
  }
  record(5, "privileged-input benefit", wins == 3,
         fmt("final return proprio+pose %s vs proprio %s: higher in %d/3 seeds (3 required)", list(pose, "%.1f").c_str(),
             list(prop, "%.1f").c_str(), wins));
}

void criterion_6(const TaskIRuns& r) {
  std::vector<double> ratio, aac, rma;
  int decayed = 0, wins = 0;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    const auto& c = r.pose[i].curve;
    ratio.push_back(c.back().L_latent / c[4].L_latent);
    decayed += ratio.back() < 0.5;
    aac.push_back(final_return(r.pose[i]));
    rma.push_back(final_return(r.rma2[i]));
    wins += aac.back() >= rma.back();
  }
  const bool steps_match = r.pose[0].env_steps == r.rma2[0].env_steps;
  record(6, "online latent distillation", decayed == 3 && wins >= 2 && steps_match,
         fmt("L_latent final/update-5 %s (< 0.5 in %d/3); AAC %s vs RMA stage 2 %s at %llu vs %llu env steps: "
             "AAC >= RMA in %d/3 (2 required)",
             list(ratio).c_str(), decayed, list(aac, "%.1f").c_str(), list(rma, "%.1f").c_str(),
             (unsigned long long)r.pose[0].env_steps, (unsigned long long)r.rma2[0].env_steps, wins));
}

void criterion_7(const TaskIRuns& r) {
  auto mean_final = [](const std::vector<rl::Checkpoint>& v) {
    std::vector<double> x;
    for (const auto& c : v) x.push_back(final_return(c));
    return mean(x);
  };
  const double o = mean_final(r.oracle), a = mean_final(r.pose), p = mean_final(r.proprio), s = mean_final(r.rma2);
  record(7, "oracle dominance", o >= a && o >= p && o >= s,
         fmt("3-seed mean return oracle %.1f vs aac proprio+pose %.1f, aac proprio %.1f, rma stage 2 %.1f", o, a, p, s));
}

// ---- distillation -----------------------------------------------------------------------

struct Distilled {
  rl::Checkpoint teacher;
  distill::DaggerResult tactile, proprio;
  rl::Checkpoint tactile_ck, proprio_ck;
  eval::MetricReport tactile_eval, proprio_eval;
};

Distilled distill_seed(const TaskSetup& ts, const rl::Checkpoint& teacher) {
  Distilled d;
  d.teacher = teacher;
  distill::DistillConfig dc = distill_config();
  const std::uint64_t seed = teacher.seed * 7 + 1;
  d.tactile = distill::dagger_iterate(ts.deploy, &ts.cache, teacher.net, dc, seed);
  dc.mask_tactile = true;
  d.proprio = distill::dagger_iterate(ts.deploy, &ts.cache, teacher.net, dc, seed);
  d.tactile_ck = distill::swap_encoder(teacher, d.tactile.encoder, "tactile");
  d.proprio_ck = distill::swap_encoder(teacher, d.proprio.encoder, "masked");
  eval::EvalOptions eo;
  eo.trials = 10;
  eo.seed = 99 + teacher.seed;
  eo.relaxed_goal = ts.task == Task::Reorientation;
  eo.name = "tactile";
  d.tactile_eval = eval::eval_policy(d.tactile_ck.net, ts.deploy, &ts.cache, eo, false);
  eo.name = "proprio";
  d.proprio_eval = eval::eval_policy(d.proprio_ck.net, ts.deploy, &ts.cache, eo, true);
  return d;
}

void criterion_8(const std::vector<Distilled>& one, const std::vector<Distilled>& two) {
  int wins1 = 0, wins2 = 0;
  std::string s1, s2;
  for (const auto& d : one) {
    const double tt = d.tactile_eval.mean("TTF"), pt = d.proprio_eval.mean("TTF");
    const double tr = d.tactile_eval.mean("TotalRotation"), pr = d.proprio_eval.mean("TotalRotation");
    wins1 += tt > pt && tr > pr;
    s1 += fmt(" (TTF %.3f/%.3f, rot %.2f/%.2f)", tt, pt, tr, pr);
  }
  for (const auto& d : two) {
    const double tg = d.tactile_eval.mean("N_goals"), pg = d.proprio_eval.mean("N_goals");
    wins2 += tg > pg;
    s2 += fmt(" (%.1f/%.1f)", tg, pg);
  }
  record(8, "tactile benefit in distillation", wins1 >= 2 && wins2 >= 2,
         fmt("tactile/proprio-only on the deployment plant, 10 trials per seed. Task I TTF and Total Rotation "
             "both higher in %d/3%s; Task II N_goals higher in %d/3%s (2 per task required)",
             wins1, s1.c_str(), wins2, s2.c_str()));
}

void criterion_9(const std::vector<Distilled>& one, const std::vector<Distilled>& two) {
  auto means = [](const std::vector<Distilled>& v) {
    std::vector<double> r0, r3;
    for (const auto& d : v) {
      r0.push_back(d.tactile.rounds.front().closed_loop_mse);
      r3.push_back(d.tactile.rounds.back().closed_loop_mse);
    }
    return std::pair{mean(r0), mean(r3)};
  };
  const auto [a0, a3] = means(one);
  const auto [b0, b3] = means(two);
  record(9, "DAgger benefit", a3 < a0 && b3 < b0,
         fmt("3-seed mean closed-loop latent MSE of the tactile student, round 0 -> after 3 DAgger rounds: "
             "Task I %.4f -> %.4f, Task II %.4f -> %.4f",
             a0, a3, b0, b3));
}

struct ProbeResult {
  double rel = 0.0, abs = 0.0, slip = 0.0;
};

ProbeResult probe(const distill::DaggerResult& r, bool mask, std::uint64_t seed) {
  const auto lat = eval::latents_of(r.encoder, r.dataset, mask);
  eval::PoseProbeConfig pc;
  pc.epochs = 100;
  pc.horizon = 30;
  ProbeResult out;
  out.rel = eval::train_pose_decoder(lat, pc, seed).report.cumulative_error;
  pc.param = eval::PoseParam::Absolute;
  out.abs = eval::train_pose_decoder(lat, pc, seed).report.step_error;
  out.slip = eval::slip_probe(lat, seed).balanced_accuracy;
  return out;
}

void criteria_10_11(const std::vector<Distilled>& one) {
  std::vector<double> tr, pr, ta, pa, ts, ps;
  for (const auto& d : one) {
    const auto t = probe(d.tactile, false, d.teacher.seed);
    const auto p = probe(d.proprio, true, d.teacher.seed);
    tr.push_back(t.rel);
    pr.push_back(p.rel);
    ta.push_back(t.abs);
    pa.push_back(p.abs);
    ts.push_back(t.slip);
    ps.push_back(p.slip);
  }
  record(10, "pose-probe ordering", mean(tr) < mean(pr) && mean(ta) < mean(pa),
         fmt("Task I, horizon 30, 3-seed mean: relative cumulative error tactile %.3f vs proprio-only %.3f; "
             "absolute error tactile %.3f vs proprio-only %.3f",
             mean(tr), mean(pr), mean(ta), mean(pa)));
  record(11, "slip observability", mean(ts) >= 0.90 && mean(ts) - mean(ps) >= 0.10,
         fmt("Task I linear probe balanced accuracy tactile %s (mean %.3f, >= 0.90 required) vs proprio-only %s "
             "(mean %.3f), gap %.1f points (>= 10 required)",
             list(ts).c_str(), mean(ts), list(ps).c_str(), mean(ps), 100.0 * (mean(ts) - mean(ps))));
}

void criterion_12(const std::vector<Distilled>& all) {
  bool heads = true, evals = true, actor_changed = true;
  int swapped = 0;
  for (const auto& d : all) {
    for (const auto* ck : {&d.tactile_ck, &d.proprio_ck}) {
      ++swapped;
      heads = heads && policy::heads_hash(ck->net) == policy::heads_hash(d.teacher.net) &&
              ck->net.pi.value_hash() == d.teacher.net.pi.value_hash() &&
              ck->net.value.value_hash() == d.teacher.net.value.value_hash() &&
              ck->net.critic.params.value_hash() == d.teacher.net.critic.params.value_hash();
      actor_changed = actor_changed && ck->net.actor.params.value_hash() != d.teacher.net.actor.params.value_hash();
    }
    for (const auto* r : {&d.tactile_eval, &d.proprio_eval}) {
      evals = evals && r->trials() == 10;
      for (const auto& row : r->rows)
        for (double v : row) evals = evals && std::isfinite(v);
    }
  }
  record(12, "encoder-swap integrity", heads && evals && actor_changed,
         fmt("%d swapped policies: pi, V and critic hashes unchanged %s, actor replaced %s, full eval suite ran with "
             "finite metrics %s",
             swapped, heads ? "yes" : "no", actor_changed ? "yes" : "no", evals ? "yes" : "no"));
}

// ---- C13 ------------------------------------------------------------------------------

bool round_trips(const io::Container& c, const fs::path& path) {
  io::write_file(path, c);
  const io::Bytes on_disk = io::read_bytes(path);
  const io::Container back = io::read_file(path);
  io::Container later = back;
  later.header["created_at"] = "2099-01-01T00:00:00Z";
  return io::encode(back) == on_disk && io::canonical_bytes(back) == io::canonical_bytes(c) &&
         io::canonical_bytes(later) == io::canonical_bytes(c) && io::checksum(later) == io::checksum(c);
}

void criterion_13(const TaskIRuns& r, const Distilled& d, const TaskSetup& ts) {
  const fs::path dir = fs::temp_directory_path() / "ptld_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  int ok = 0, total = 0;
  auto check = [&](const io::Container& c, const std::string& name) {
    ++total;
    ok += round_trips(c, dir / (name + ".ptld"));
  };
  check(rl::to_container(r.pose[0]), "aac");
  check(rl::to_container(r.oracle[0]), "rma1");
  check(rl::to_container(r.rma2[0]), "rma2");
  check(rl::to_container(d.tactile_ck), "swap");
  check(distill::to_container(d.tactile.dataset), "demos");
  check(pipeline::to_container(ts.cache, 1, ts.train.hash()), "cache");

  // Decoded artifacts re-encode to the same bytes.
  const auto ck_back = rl::from_container(rl::to_container(d.tactile_ck));
  const bool ck_same = io::canonical_bytes(rl::to_container(ck_back)) == io::canonical_bytes(rl::to_container(d.tactile_ck));
  const auto ds_back = distill::from_container(distill::to_container(d.tactile.dataset));
  const bool ds_same =
      io::canonical_bytes(distill::to_container(ds_back)) == io::canonical_bytes(distill::to_container(d.tactile.dataset));

  // Cross-stage validation through the pipeline.
  Config cfg;
  cfg.set("run.out", (dir / "run").string());
  cfg.set("grasp.n", 8);
  const pipeline::RunConfig rc = pipeline::RunConfig::load(cfg);
  const fs::path cache_path = pipeline::cmd_grasp_cache(rc);
  bool accepted = true;
  try {
    pipeline::load_cache_checked(rc, cache_path);
  } catch (const std::exception&) {
    accepted = false;
  }
  io::Container tampered = io::read_file(cache_path);
  tampered.header["config_hash"] = io::hex64(rc.identity_hash() + 1);
  io::write_file(cache_path, tampered);
  bool rejected_hash = false, rejected_bytes = false;
  try {
    pipeline::load_cache_checked(rc, cache_path);
  } catch (const pipeline::ConfigMismatch&) {
    rejected_hash = true;
  }
  io::Bytes raw = io::encode(tampered);
  raw[14] ^= 0x01;
  {
    std::ofstream os(cache_path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  }
  try {
    pipeline::load_cache_checked(rc, cache_path);
  } catch (const io::CorruptContainer&) {
    rejected_bytes = true;
  }
  fs::remove_all(dir);
  record(13, "persistence", ok == total && ck_same && ds_same && accepted && rejected_hash && rejected_bytes,
         fmt("%d/%d container kinds round-trip byte-identically (timestamp excluded); decode/re-encode identical %s; "
             "untampered accepted %s; tampered header hash rejected %s; edited header bytes rejected %s",
             ok, total, ck_same && ds_same ? "yes" : "no", accepted ? "yes" : "no", rejected_hash ? "yes" : "no",
             rejected_bytes ? "yes" : "no"));
}

}  // namespace

int main() {
  try {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();

    const TaskSetup one(Task::Rotation);
    const TaskIRuns runs = train_task_i(one);
    criterion_5(runs);
    criterion_6(runs);
    criterion_7(runs);

    std::vector<Distilled> d1, d2;
    for (const auto& teacher : runs.pose) {
      d1.push_back(distill_seed(one, teacher));
      progress(fmt("task I distillation seed %llu done", (unsigned long long)teacher.seed));
    }
    const TaskSetup two(Task::Reorientation);
    for (std::uint64_t seed : kSeeds) {
      auto s = two.setup(ObsView::ProprioPose);
      s.on_update = finite_guard("task II aac");
      const rl::Checkpoint teacher = rl::train_aac(s, seed);
      progress(fmt("task II aac seed %llu: final return %.1f", (unsigned long long)seed, final_return(teacher)));
      d2.push_back(distill_seed(two, teacher));
      progress(fmt("task II distillation seed %llu done", (unsigned long long)seed));
    }
    criterion_8(d1, d2);
    criterion_9(d1, d2);
    criteria_10_11(d1);
    std::vector<Distilled> all = d1;
    all.insert(all.end(), d2.begin(), d2.end());
    criterion_12(all);
    criterion_13(runs, d1.front(), one);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  int passed = 0;
  for (int id = 1; id <= 13; ++id) {
    auto it = std::find_if(verdicts.begin(), verdicts.end(), [id](const Verdict& v) { return v.id == id; });
    if (it == verdicts.end()) {
      std::printf("FAIL C%-2d not run\n", id);
      continue;
    }
    passed += it->pass;
    std::printf("%s C%-2d %s: %s\n", it->pass ? "PASS" : "FAIL", id, it->name.c_str(), it->detail.c_str());
  }
  std::printf("%d/13 criteria passed in %.0f s\n", passed, elapsed());
  return passed == 13 ? 0 : 1;
}
