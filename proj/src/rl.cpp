#include "ptld/rl.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ptld::rl {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using policy::EncoderInput;
using policy::PolicyNet;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr std::size_t kReturnWindow = 32;

Tensor rows_of(const std::vector<std::vector<double>>& src, std::span<const std::size_t> idx) {
  const std::size_t d = src[idx[0]].size();
  Tensor t({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(src[idx[i]].begin(), src[idx[i]].end(), t.data.begin() + i * d);
  return t;
}

Tensor column_of(const std::vector<double>& src, std::span<const std::size_t> idx) {
  Tensor t({idx.size(), 1});
  for (std::size_t i = 0; i < idx.size(); ++i) t.data[i] = src[idx[i]];
  return t;
}

std::vector<const EncoderInput*> inputs_of(const RolloutBuffer& b, std::span<const std::size_t> idx) {
  std::vector<const EncoderInput*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&b.obs[i]);
  return out;
}

Var critic_value(Tape& tape, const PolicyNet& net, Var priv) {
  Var zhat = nn::forward(net.critic.body, net.critic.params, priv, tape, "b.");
  return nn::forward(net.v_spec, net.value, zhat, tape);
}

// log N(a; mu, exp(ls)) per row, [B, 1].
Var log_prob(Var mu, Var ls, Var actions) {
  const std::size_t B = mu.rows(), A = mu.cols();
  Var inv_sigma = ad::exp(ad::neg(ls));
  Var zs = ad::mul_row(ad::sub(actions, mu), inv_sigma);
  Var quad = ad::scale(ad::sum_cols(ad::square(zs)), -0.5);
  Var norm = ad::add_scalar(ad::sum(ls), 0.5 * kLog2Pi * static_cast<double>(A));
  return ad::sub(quad, ad::broadcast_rows(norm, B));
}

void apply_gradients(std::vector<std::pair<ad::ParamSet*, ad::Gradients>>& sets, double lr, double max_norm) {
  std::vector<const ad::Gradients*> ptrs;
  for (auto& s : sets) ptrs.push_back(&s.second);
  const double norm = ad::global_grad_norm(ptrs);
  if (!std::isfinite(norm)) throw NaNLoss("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    for (auto& s : sets) ad::scale_gradients(s.second, max_norm / norm);
  }
  ad::AdamWConfig opt;
  opt.lr = lr;
  for (auto& s : sets) ad::adamw_step(*s.first, s.second, opt);
}

double window_mean(const std::deque<double>& w) {
  return w.empty() ? 0.0 : std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
}

void push_returns(std::deque<double>& w, const std::vector<double>& completed) {
  for (double r : completed) {
    w.push_back(r);
    if (w.size() > kReturnWindow) w.pop_front();
  }
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

// ---- configuration -----------------------------------------------------------

PPOConfig PPOConfig::from_config(Config& cfg, const std::string& s) {
  PPOConfig c;
  c.clip_eps = cfg.get(s + ".clip_eps", c.clip_eps);
  c.c_V = cfg.get(s + ".c_V", c.c_V);
  c.c_entropy = cfg.get(s + ".c_entropy", c.c_entropy);
  c.c_latent = cfg.get(s + ".c_latent", c.c_latent);
  c.gamma = cfg.get(s + ".gamma", c.gamma);
  c.gae_lambda = cfg.get(s + ".gae_lambda", c.gae_lambda);
  c.epochs = cfg.get(s + ".epochs", c.epochs);
  c.minibatch = cfg.get(s + ".minibatch", c.minibatch);
  c.horizon = cfg.get(s + ".horizon", c.horizon);
  c.envs = cfg.get(s + ".envs", c.envs);
  c.updates = cfg.get(s + ".updates", c.updates);
  c.lr = cfg.get(s + ".lr", c.lr);
  c.max_grad_norm = cfg.get(s + ".max_grad_norm", c.max_grad_norm);
  c.reward_scale = cfg.get(s + ".reward_scale", c.reward_scale);
  c.validate();
  return c;
}

void PPOConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("ppo.clip_eps must lie in (0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ppo.gamma must lie in (0, 1]");
  if (!(gae_lambda > 0.0 && gae_lambda <= 1.0)) throw ConfigError("ppo.gae_lambda must lie in (0, 1]");
  if (c_latent < 0.0) throw ConfigError("ppo.c_latent must be non-negative");
  if (c_V < 0.0 || c_entropy < 0.0) throw ConfigError("ppo loss coefficients must be non-negative");
  if (epochs < 1 || minibatch < 1 || horizon < 1 || envs < 1 || updates < 0) {
    throw ConfigError("ppo sizes must be positive");
  }
  if (!(lr > 0.0) || !(reward_scale > 0.0)) throw ConfigError("ppo.lr and ppo.reward_scale must be positive");
}

void RolloutBuffer::validate() const {
  const std::size_t n = rewards.size();
  if (obs.size() != n || priv.size() != n || actions.size() != n || z.size() != n || zhat.size() != n ||
      log_probs.size() != n || values.size() != n || dones.size() != n || n != horizon * envs ||
      last_values.size() != envs) {
    throw ad::ShapeMismatch("rollout buffer fields have unequal lengths");
  }
}

// ---- collection ----------------------------------------------------------------

VecEnv::VecEnv(const plant::PlantParams& params, const plant::GraspCache* cache, std::size_t n, std::uint64_t seed,
               const policy::EncoderLayout& layout, bool mask_tactile) {
  std::mt19937_64 seeder(seed);
  for (std::size_t i = 0; i < n; ++i) {
    envs_.emplace_back(params, cache, seeder());
    assemblers_.emplace_back(layout, mask_tactile);
    obs_.push_back(envs_.back().reset());
    assemblers_.back().reset(obs_.back(), static_cast<std::size_t>(params.action_dim()));
  }
  running_return_.assign(n, 0.0);
}

RolloutBuffer collect_rollouts(VecEnv& ve, const PolicyNet& net, int horizon, std::mt19937_64& rng,
                               double reward_scale) {
  const std::size_t B = ve.size(), A = net.action_dim, L = net.latent_dim();
  RolloutBuffer buf;
  buf.horizon = static_cast<std::size_t>(horizon);
  buf.envs = B;
  const std::size_t n = buf.horizon * B;
  buf.obs.reserve(n);
  const std::vector<double> ls = policy::clamped_log_std(net);
  std::normal_distribution<double> gauss(0.0, 1.0);

  auto priv_tensor = [&]() {
    Tensor t({B, ve.obs_[0].privileged.size()});
    for (std::size_t e = 0; e < B; ++e) {
      std::copy(ve.obs_[e].privileged.begin(), ve.obs_[e].privileged.end(), t.data.begin() + e * t.cols());
    }
    return t;
  };

  for (int t = 0; t < horizon; ++t) {
    std::vector<EncoderInput> inputs;
    inputs.reserve(B);
    for (auto& a : ve.assemblers_) inputs.push_back(a.input());
    std::vector<const EncoderInput*> ptrs;
    for (const auto& in : inputs) ptrs.push_back(&in);

    Tape tape;
    Var z = net.actor.forward(tape, ptrs);
    Var mu = policy::policy_mean(tape, net, z);
    Var priv = tape.constant(priv_tensor());
    Var zhat = nn::forward(net.critic.body, net.critic.params, priv, tape, "b.");
    Var v = nn::forward(net.v_spec, net.value, zhat, tape);

    for (std::size_t e = 0; e < B; ++e) {
      std::vector<double> mean(mu.value().data.begin() + e * A, mu.value().data.begin() + (e + 1) * A);
      std::vector<double> action = mean;
      for (std::size_t i = 0; i < A; ++i) action[i] += std::exp(ls[i]) * gauss(rng);
      buf.log_probs.push_back(policy::gaussian_log_prob(mean, ls, action));
      buf.obs.push_back(std::move(inputs[e]));
      buf.priv.push_back(ve.obs_[e].privileged);
      buf.z.emplace_back(z.value().data.begin() + e * L, z.value().data.begin() + (e + 1) * L);
      buf.zhat.emplace_back(zhat.value().data.begin() + e * L, zhat.value().data.begin() + (e + 1) * L);
      buf.values.push_back(v.value().data[e]);

      std::vector<double> applied = action;
      for (double& a : applied) a = std::clamp(a, -1.0, 1.0);
      plant::StepResult sr = ve.envs_[e].step(applied);
      buf.actions.push_back(std::move(action));
      buf.rewards.push_back(reward_scale * sr.reward.total);
      buf.dones.push_back(sr.done ? 1 : 0);
      ve.running_return_[e] += sr.reward.total;
      if (sr.done) {
        buf.completed_returns.push_back(ve.running_return_[e]);
        ve.running_return_[e] = 0.0;
        ve.obs_[e] = ve.envs_[e].reset();
        ve.assemblers_[e].reset(ve.obs_[e], A);
      } else {
        ve.obs_[e] = std::move(sr.obs);
        ve.assemblers_[e].push(ve.obs_[e], applied);
      }
    }
  }
  Tape tape;
  Var v = critic_value(tape, net, tape.constant(priv_tensor()));
  buf.last_values = v.value().vec();
  return buf;
}

void gae_advantages(RolloutBuffer& b, double gamma, double lambda, bool normalize) {
  const std::size_t B = b.envs, H = b.horizon;
  b.advantages.assign(b.size(), 0.0);
  b.returns.assign(b.size(), 0.0);
  for (std::size_t e = 0; e < B; ++e) {
    double next_adv = 0.0;
    double next_value = b.last_values[e];
    for (std::size_t t = H; t-- > 0;) {
      const std::size_t i = t * B + e;
      const double live = b.dones[i] ? 0.0 : 1.0;
      const double delta = b.rewards[i] + gamma * next_value * live - b.values[i];
      next_adv = delta + gamma * lambda * live * next_adv;
      b.advantages[i] = next_adv;
      b.returns[i] = next_adv + b.values[i];
      next_value = b.values[i];
    }
  }
  if (!normalize || b.size() < 2) return;
  const double n = static_cast<double>(b.size());
  const double mean = std::accumulate(b.advantages.begin(), b.advantages.end(), 0.0) / n;
  double var = 0.0;
  for (double a : b.advantages) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : b.advantages) a = sd > 1e-12 ? (a - mean) / sd : a - mean;
}

// ---- update --------------------------------------------------------------------

LossVars ppo_loss(Tape& tape, const PolicyNet& net, const RolloutBuffer& b, std::span<const std::size_t> idx,
                  const PPOConfig& cfg) {
  const auto ptrs = inputs_of(b, idx);
  Var z = net.actor.forward(tape, ptrs);
  Var mu = policy::policy_mean(tape, net, z);
  Var ls = ad::clamp(tape.param(net.pi, "log_std"), policy::kLogStdMin, policy::kLogStdMax);
  Var lp = log_prob(mu, ls, tape.constant(rows_of(b.actions, idx)));
  Var ratio = ad::exp(ad::sub(lp, tape.constant(column_of(b.log_probs, idx))));
  Var adv = tape.constant(column_of(b.advantages, idx));
  Var surr = ad::minimum(ad::mul(ratio, adv), ad::mul(ad::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv));

  LossVars l;
  l.clip = ad::neg(ad::mean(surr));
  Var zhat = nn::forward(net.critic.body, net.critic.params, tape.constant(rows_of(b.priv, idx)), tape, "b.");
  Var v = nn::forward(net.v_spec, net.value, zhat, tape);
  l.value = ad::mean(ad::square(ad::sub(v, tape.constant(column_of(b.returns, idx)))));
  const double per_dim = 0.5 * (1.0 + kLog2Pi);
  Var entropy = ad::add_scalar(ad::sum(ls), per_dim * static_cast<double>(net.action_dim));
  l.entropy = ad::scale(entropy, -cfg.c_entropy);
  l.latent = ad::scale(ad::sum(ad::square(ad::sub(z, ad::stop_gradient(zhat)))), 1.0 / static_cast<double>(idx.size()));
  l.total = ad::add(ad::add(ad::add(l.clip, ad::scale(l.value, cfg.c_V)), l.entropy), ad::scale(l.latent, cfg.c_latent));
  return l;
}

LossReport ppo_update(PolicyNet& net, const RolloutBuffer& b, const PPOConfig& cfg, std::mt19937_64& rng) {
  b.validate();
  if (b.advantages.size() != b.size()) throw ad::ShapeMismatch("ppo_update needs advantages; call gae_advantages");
  LossReport rep;
  int batches = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(b.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.minibatch) {
      const std::size_t end = std::min(order.size(), start + cfg.minibatch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tape tape;
      LossVars l = ppo_loss(tape, net, b, idx, cfg);
      const double total = l.total.item();
      if (!std::isfinite(total)) {
        std::ostringstream os;
        os << "non-finite PPO loss: L_clip=" << l.clip.item() << " L_V=" << l.value.item()
           << " L_entropy=" << l.entropy.item() << " L_latent=" << l.latent.item();
        throw NaNLoss(os.str());
      }
      tape.backward(l.total);
      std::vector<std::pair<ad::ParamSet*, ad::Gradients>> sets;
      sets.emplace_back(&net.actor.params, tape.gradients(net.actor.params));
      sets.emplace_back(&net.critic.params, tape.gradients(net.critic.params));
      sets.emplace_back(&net.pi, tape.gradients(net.pi));
      sets.emplace_back(&net.value, tape.gradients(net.value));
      apply_gradients(sets, cfg.lr, cfg.max_grad_norm);
      rep.L_clip += l.clip.item();
      rep.L_V += l.value.item();
      rep.L_entropy += l.entropy.item();
      rep.L_latent += l.latent.item();
      rep.total += total;
      ++batches;
    }
  }
  const double n = static_cast<double>(std::max(batches, 1));
  rep.L_clip /= n;
  rep.L_V /= n;
  rep.L_entropy /= n;
  rep.L_latent /= n;
  rep.total /= n;
  return rep;
}

// ---- checkpoints ---------------------------------------------------------------

io::Container to_container(const Checkpoint& ck) {
  io::Container c;
  c.header["kind"] = "checkpoint";
  c.header["stage"] = ck.stage;
  c.header["config_hash"] = io::hex64(ck.config_hash);
  c.header["config"] = ck.config_text;
  c.header["env_steps"] = ck.env_steps;
  c.header["seed"] = ck.seed;
  c.header["lineage"] = ck.lineage;
  c.header["curve_rows"] = ck.curve.size();
  policy::write_policy(c, ck.net);
  io::RecordWriter w;
  w.str("curve").u64(ck.curve.size());
  for (const auto& r : ck.curve) {
    w.u64(static_cast<std::uint64_t>(r.update));
    const double v[5] = {r.mean_return, r.L_clip, r.L_V, r.L_entropy, r.L_latent};
    w.f64s(v);
  }
  c.records.push_back(w.take());
  io::stamp_created(c.header);
  return c;
}

Checkpoint from_container(const io::Container& c) {
  if (c.header.value("kind", "") != "checkpoint") throw policy::IncompatibleCheckpoint("container is not a checkpoint");
  Checkpoint ck;
  ck.stage = c.header.at("stage");
  ck.config_hash = std::stoull(c.header.at("config_hash").get<std::string>(), nullptr, 16);
  ck.config_text = c.header.at("config");
  ck.env_steps = c.header.at("env_steps");
  ck.seed = c.header.at("seed");
  ck.lineage = c.header.at("lineage");
  ck.net = policy::read_policy(c);
  for (const auto& r : c.records) {
    io::RecordReader rr(r);
    if (rr.str() != "curve") continue;
    const std::uint64_t n = rr.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      CurveRow row;
      row.update = static_cast<int>(rr.u64());
      const auto v = rr.f64s(5);
      row.mean_return = v[0];
      row.L_clip = v[1];
      row.L_V = v[2];
      row.L_entropy = v[3];
      row.L_latent = v[4];
      ck.curve.push_back(row);
    }
  }
  if (ck.curve.size() != c.header.at("curve_rows").get<std::size_t>()) {
    throw io::CorruptContainer("training curve length does not match the header");
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { io::write_file(path, to_container(ck)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return from_container(io::read_file(path)); }

void write_curve_csv(const std::filesystem::path& path, const std::vector<CurveRow>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "update,mean_return,L_clip,L_V,L_entropy,L_latent\n";
  for (const auto& r : curve) {
    out << r.update << ',' << r.mean_return << ',' << r.L_clip << ',' << r.L_V << ',' << r.L_entropy << ','
        << r.L_latent << '\n';
  }
}

// ---- training loops ------------------------------------------------------------

Checkpoint train_aac(const TrainSetup& s, std::uint64_t seed) {
  s.ppo.validate();
  if (s.cache == nullptr) throw plant::EmptyCache("training needs a grasp cache");
  if (s.cache->task != s.plant.task) throw TaskMismatch("grasp cache was generated for another task");
  std::mt19937_64 rng(seed);
  Checkpoint ck;
  ck.stage = s.view == policy::ObsView::Privileged ? "rma1" : "aac";
  ck.seed = seed;
  ck.config_text = s.config_text;
  ck.config_hash = s.config_hash;
  ck.net = policy::make_policy(s.plant, s.view, s.net, rng());
  ck.lineage = {{"actor_view", policy::view_name(s.view)}, {"c_latent", s.ppo.c_latent}};
  VecEnv ve(s.plant, s.cache, static_cast<std::size_t>(s.ppo.envs), rng(), ck.net.actor.layout);
  std::deque<double> recent;
  for (int u = 1; u <= s.ppo.updates; ++u) {
    RolloutBuffer buf = collect_rollouts(ve, ck.net, s.ppo.horizon, rng, s.ppo.reward_scale);
    ck.env_steps += buf.size();
    gae_advantages(buf, s.ppo.gamma, s.ppo.gae_lambda);
    PolicyNet before = ck.net;
    LossReport rep;
    try {
      rep = ppo_update(ck.net, buf, s.ppo, rng);
    } catch (const NaNLoss& e) {
      ck.net = std::move(before);
      if (!s.nan_dump.empty()) save_checkpoint(s.nan_dump, ck);
      throw NaNLoss(std::string(e.what()) + " at update " + std::to_string(u));
    }
    push_returns(recent, buf.completed_returns);
    ck.curve.push_back({u, window_mean(recent), rep.L_clip, rep.L_V, rep.L_entropy, rep.L_latent});
    if (s.on_update) s.on_update(u, ck.net);
  }
  return ck;
}

Checkpoint train_rma_stage1(TrainSetup setup, std::uint64_t seed) {
  setup.view = policy::ObsView::Privileged;
  setup.ppo.c_latent = 0.0;
  return train_aac(setup, seed);
}

ad::Var imitation_loss(Tape& tape, const PolicyNet& student, const PolicyNet& oracle, const RolloutBuffer& b,
                       std::span<const std::size_t> idx, ImitationLoss kind) {
  Var z = student.actor.forward(tape, inputs_of(b, idx));
  Var priv = tape.constant(rows_of(b.priv, idx));
  Var target = ad::stop_gradient(nn::forward(oracle.actor.body, oracle.actor.params, priv, tape, "b."));
  if (kind == ImitationLoss::Action) {
    z = policy::policy_mean(tape, student, z);
    target = ad::stop_gradient(policy::policy_mean(tape, oracle, target));
  }
  return ad::scale(ad::sum(ad::square(ad::sub(z, target))), 1.0 / static_cast<double>(idx.size()));
}

Checkpoint train_rma_stage2(const Checkpoint& oracle, TrainSetup s, const Stage2Options& opts, std::uint64_t seed) {
  s.ppo.validate();
  if (oracle.net.task != s.plant.task) {
    throw TaskMismatch("oracle was trained on " + plant::task_name(oracle.net.task) + ", student plant is " +
                       plant::task_name(s.plant.task));
  }
  if (oracle.net.actor.layout.view != policy::ObsView::Privileged) {
    throw TaskMismatch("stage 2 needs an oracle whose actor reads the privileged observation");
  }
  if (s.cache == nullptr) throw plant::EmptyCache("training needs a grasp cache");
  std::mt19937_64 rng(seed);
  Checkpoint ck;
  ck.stage = "rma2";
  ck.seed = seed;
  ck.config_text = s.config_text;
  ck.config_hash = s.config_hash;
  ck.env_steps = oracle.env_steps;
  ck.net = policy::make_policy(s.plant, opts.student_view, oracle.net.net, rng());
  ck.net.critic = oracle.net.critic;
  ck.net.pi = oracle.net.pi;
  ck.net.value = oracle.net.value;
  ck.lineage = {{"actor_view", policy::view_name(opts.student_view)},
                {"oracle_heads_hash", io::hex64(policy::heads_hash(oracle.net))},
                {"oracle_env_steps", oracle.env_steps},
                {"imitation", opts.loss == ImitationLoss::Latent ? "latent" : "action"}};
  VecEnv ve(s.plant, s.cache, static_cast<std::size_t>(s.ppo.envs), rng(), ck.net.actor.layout);
  std::deque<double> recent;
  for (int u = 1; u <= s.ppo.updates; ++u) {
    RolloutBuffer buf = collect_rollouts(ve, ck.net, s.ppo.horizon, rng);
    ck.env_steps += buf.size();
    double loss_sum = 0.0;
    int batches = 0;
    for (int epoch = 0; epoch < s.ppo.epochs; ++epoch) {
      const auto order = shuffled(buf.size(), rng);
      for (std::size_t start = 0; start < order.size(); start += s.ppo.minibatch) {
        const std::size_t end = std::min(order.size(), start + s.ppo.minibatch);
        Tape tape;
        Var loss = imitation_loss(tape, ck.net, oracle.net, buf,
                                  std::span<const std::size_t>(order.data() + start, end - start), opts.loss);
        if (!std::isfinite(loss.item())) throw NaNLoss("non-finite imitation loss at update " + std::to_string(u));
        tape.backward(loss);
        std::vector<std::pair<ad::ParamSet*, ad::Gradients>> sets;
        sets.emplace_back(&ck.net.actor.params, tape.gradients(ck.net.actor.params));
        apply_gradients(sets, s.ppo.lr, s.ppo.max_grad_norm);
        loss_sum += loss.item();
        ++batches;
      }
    }
    push_returns(recent, buf.completed_returns);
    CurveRow row{u, window_mean(recent), 0.0, 0.0, 0.0, loss_sum / std::max(batches, 1)};
    ck.curve.push_back(row);
    if (s.on_update) s.on_update(u, ck.net);
  }
  return ck;
}

}  // namespace ptld::rl
