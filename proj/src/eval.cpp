#include "ptld/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace ptld::eval {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;
using rotmath::Rotation;

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// Episodes split into (train, held-out), at least one of each when possible.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_episodes(std::size_t n, double val_fraction,
                                                                               std::mt19937_64& rng) {
  std::vector<std::size_t> order = shuffled(n, rng);
  std::size_t n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
  if (n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  else n_val = 0;
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

Rotation from6(std::span<const double> v) {
  rotmath::Rot6D r;
  std::copy(v.begin(), v.begin() + 6, r.begin());
  return rotmath::matrix_from_rot6d(r);
}

}  // namespace

// ---- reports --------------------------------------------------------------------

std::size_t MetricReport::index(const std::string& metric) const {
  auto it = std::find(metrics.begin(), metrics.end(), metric);
  if (it == metrics.end()) throw std::out_of_range("report has no metric " + metric);
  return static_cast<std::size_t>(it - metrics.begin());
}

double MetricReport::mean(const std::string& metric) const {
  if (rows.empty()) return 0.0;
  const std::size_t i = index(metric);
  double s = 0.0;
  for (const auto& r : rows) s += r[i];
  return s / static_cast<double>(rows.size());
}

double MetricReport::std(const std::string& metric) const {
  if (rows.empty()) return 0.0;
  const std::size_t i = index(metric);
  const double m = mean(metric);
  double s = 0.0;
  for (const auto& r : rows) s += (r[i] - m) * (r[i] - m);
  return std::sqrt(s / static_cast<double>(rows.size()));
}

json MetricReport::to_json() const {
  json agg = json::object();
  for (const auto& m : metrics) agg[m] = {{"mean", mean(m)}, {"std", std(m)}};
  return {{"name", name},
          {"task", plant::task_name(task)},
          {"trials", trials()},
          {"lineage_hash", io::hex64(lineage_hash)},
          {"plant_hash", io::hex64(plant_hash)},
          {"aggregate", agg}};
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os = open_out(path);
  os << "trial";
  for (const auto& m : metrics) os << ',' << m;
  os << '\n';
  for (std::size_t t = 0; t < rows.size(); ++t) {
    os << t;
    for (double v : rows[t]) os << ',' << format_double(v);
    os << '\n';
  }
}

void MetricReport::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream os = open_out(path);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    json j = {{"run", name}, {"trial", t}};
    for (std::size_t i = 0; i < metrics.size(); ++i) j[metrics[i]] = rows[t][i];
    os << j.dump() << '\n';
  }
  json summary = to_json();
  summary["summary"] = true;
  os << summary.dump() << '\n';
}

void MetricReport::write_long_csv(const std::filesystem::path& path) const {
  std::ofstream os = open_out(path);
  os << "run,trial,metric,value\n";
  for (std::size_t t = 0; t < rows.size(); ++t) {
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      os << name << ',' << t << ',' << metrics[i] << ',' << format_double(rows[t][i]) << '\n';
    }
  }
}

// ---- rollouts -------------------------------------------------------------------

void RotationTally::step(double omega_z, double planar_displacement, double dt, bool dropped) {
  ++steps;
  rot_r += omega_z * dt;
  rot_p += planar_displacement;
  if (dropped && drop_step < 0) drop_step = steps;
}

double RotationTally::ttf(int max_steps) const {
  const int k = drop_step < 0 ? max_steps : drop_step;
  return std::clamp(static_cast<double>(k) / static_cast<double>(max_steps), 0.0, 1.0);
}

MetricReport eval_rotation(Controller& ctrl, const plant::PlantParams& params, const plant::GraspCache* cache,
                           const EvalOptions& opts) {
  if (params.task != plant::Task::Rotation) throw TaskMismatch("rotation metrics need the rotation plant");
  plant::PlantParams p = params;
  if (opts.max_steps > 0) p.max_steps = opts.max_steps;
  MetricReport rep;
  rep.name = opts.name;
  rep.task = p.task;
  rep.metrics = {"RotR", "TTF", "RotP", "TotalRotation", "VerticalDrift"};
  rep.plant_hash = params.hash();
  rep.lineage_hash = opts.lineage_hash;
  std::mt19937_64 rng(opts.seed);
  for (int trial = 0; trial < opts.trials; ++trial) {
    plant::Env env(p, cache, rng());
    plant::ObservationBundle obs = env.reset();
    ctrl.reset(obs);
    const double theta0 = env.state().theta;
    const double z0 = env.state().z;
    RotationTally tally;
    for (int t = 0; t < p.max_steps; ++t) {
      const std::vector<double> a = ctrl.act(obs, t);
      plant::StepResult res = env.step(a);
      const auto& s = env.state();
      tally.step(s.omega_z, (s.p - s.p_prev).norm(), p.dt_control, res.dropped);
      obs = std::move(res.obs);
      if (res.done) break;
    }
    const auto& s = env.state();
    rep.rows.push_back(
        {tally.rot_r, tally.ttf(p.max_steps), tally.rot_p, std::abs(s.theta - theta0), std::abs(s.z - z0)});
  }
  return rep;
}

MetricReport eval_reorientation(Controller& ctrl, const plant::PlantParams& params, const plant::GraspCache* cache,
                                const EvalOptions& opts) {
  if (params.task != plant::Task::Reorientation) throw TaskMismatch("reorientation metrics need the reorientation plant");
  plant::PlantParams p = params;
  if (opts.max_steps > 0) p.max_steps = opts.max_steps;
  if (opts.relaxed_goal) p.success_tol = kRelaxedGoalTolerance;
  MetricReport rep;
  rep.name = opts.name;
  rep.task = p.task;
  rep.metrics = {"N_goals", "TTF"};
  rep.plant_hash = params.hash();
  rep.lineage_hash = opts.lineage_hash;
  std::mt19937_64 rng(opts.seed);
  for (int trial = 0; trial < opts.trials; ++trial) {
    plant::Env env(p, cache, rng());
    plant::ObservationBundle obs = env.reset();
    ctrl.reset(obs);
    int steps = 0;
    for (int t = 0; t < p.max_steps; ++t) {
      const std::vector<double> a = ctrl.act(obs, t);
      plant::StepResult res = env.step(a);
      ++steps;
      obs = std::move(res.obs);
      if (res.done) break;
    }
    rep.rows.push_back({static_cast<double>(env.state().goals_reached), steps * p.dt_control});
  }
  return rep;
}

MetricReport eval_policy(const policy::PolicyNet& net, const plant::PlantParams& params, const plant::GraspCache* cache,
                         const EvalOptions& opts, bool mask_tactile) {
  if (net.task != params.task) {
    throw TaskMismatch("policy was trained for " + plant::task_name(net.task) + ", plant runs " +
                       plant::task_name(params.task));
  }
  AgentController ctrl(net, mask_tactile);
  EvalOptions o = opts;
  if (o.lineage_hash == 0) o.lineage_hash = policy::heads_hash(net) ^ net.actor.params.value_hash();
  return params.task == plant::Task::Rotation ? eval_rotation(ctrl, params, cache, o)
                                              : eval_reorientation(ctrl, params, cache, o);
}

// ---- comparison -----------------------------------------------------------------

bool lower_is_better(const std::string& metric) { return metric == "RotP" || metric == "VerticalDrift"; }

std::vector<RankRow> compare_runs(const std::vector<MetricReport>& reports) {
  if (reports.empty()) return {};
  for (const auto& r : reports) {
    if (r.plant_hash != reports.front().plant_hash) {
      throw ConfigMismatch("run '" + r.name + "' used plant config " + io::hex64(r.plant_hash) + ", run '" +
                           reports.front().name + "' used " + io::hex64(reports.front().plant_hash));
    }
    if (r.metrics != reports.front().metrics) throw ConfigMismatch("runs report different metrics");
  }
  std::vector<RankRow> out;
  for (const auto& m : reports.front().metrics) {
    std::vector<RankRow> rows;
    for (const auto& r : reports) rows.push_back({m, 0, r.name, r.mean(m), r.std(m)});
    const bool low = lower_is_better(m);
    std::stable_sort(rows.begin(), rows.end(),
                     [low](const RankRow& a, const RankRow& b) { return low ? a.mean < b.mean : a.mean > b.mean; });
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].rank = static_cast<int>(i + 1);
    out.insert(out.end(), rows.begin(), rows.end());
  }
  return out;
}

void write_rank_csv(const std::filesystem::path& path, const std::vector<RankRow>& rows) {
  std::ofstream os = open_out(path);
  os << "metric,rank,run,mean,std\n";
  for (const auto& r : rows) {
    os << r.metric << ',' << r.rank << ',' << r.run << ',' << format_double(r.mean) << ',' << format_double(r.std)
       << '\n';
  }
}

std::string format_rank_table(const std::vector<RankRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "metric" << std::setw(6) << "rank" << std::setw(24) << "run"
     << "mean +- std\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(16) << r.metric << std::setw(6) << r.rank << std::setw(24) << r.run << std::fixed
       << std::setprecision(4) << r.mean << " +- " << r.std << '\n';
  }
  return os.str();
}

// ---- probes ---------------------------------------------------------------------

LatentDataset latents_of(const policy::Encoder& enc, const distill::DemoDataset& d, bool mask_tactile) {
  LatentDataset out;
  out.episodes = d.episodes();
  for (const auto& ep : out.episodes) {
    for (std::size_t t = 0; t < ep.length; ++t) {
      const auto& r = d.records[ep.begin + t];
      out.latents.push_back(enc.encode(distill::student_input(enc.layout, d, ep, t, mask_tactile)));
      if (r.true_rot6d.size() != 6) throw MissingGroundTruth("demo record carries no plant rotation");
      rotmath::Rot6D r6;
      std::copy(r.true_rot6d.begin(), r.true_rot6d.end(), r6.begin());
      out.truth.push_back(r6);
      out.slip.push_back(std::any_of(r.slip.begin(), r.slip.end(), [](double s) { return s > 0.5; }) ? 1.0 : 0.0);
    }
  }
  return out;
}

Rotation PoseDecoder::predict(std::span<const double> latent) const {
  const Tensor y = nn::infer(spec, params, Tensor::row(latent));
  return from6(y.data);
}

std::optional<Rotation> pose_target(const LatentDataset& d, const distill::Episode& ep, std::size_t t,
                                    const PoseProbeConfig& cfg) {
  const Rotation now = rotmath::matrix_from_rot6d(d.truth[ep.begin + t]);
  if (cfg.param == PoseParam::Absolute) return now;
  const std::size_t H = static_cast<std::size_t>(cfg.H);
  if (t < H) return std::nullopt;
  return now * rotmath::matrix_from_rot6d(d.truth[ep.begin + t - H]).inverse();
}

double composed_error(const std::vector<Rotation>& predicted, const std::vector<Rotation>& truth) {
  if (predicted.size() != truth.size()) throw ad::ShapeMismatch("composed_error: sequences differ in length");
  Rotation p = Rotation::identity();
  Rotation q = Rotation::identity();
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    p = predicted[i] * p;
    q = truth[i] * q;
  }
  return rotmath::geodesic_distance(p, q);
}

PoseProbeResult train_pose_decoder(const LatentDataset& d, const PoseProbeConfig& cfg, std::uint64_t seed) {
  if (cfg.H < 1) throw ConfigError("pose probe window H must be >= 1");
  if (cfg.horizon < cfg.H || cfg.horizon % cfg.H != 0) throw ConfigError("pose probe horizon must be a multiple of H");
  if (d.truth.size() != d.latents.size() || d.truth.empty()) {
    throw MissingGroundTruth("pose probe needs a plant rotation for every latent");
  }
  std::mt19937_64 rng(seed);
  auto [train_eps, val_eps] = split_episodes(d.episodes.size(), cfg.val_fraction, rng);
  if (val_eps.empty()) val_eps = train_eps;

  struct Sample {
    std::size_t index;
    Rotation target;
  };
  auto samples_of = [&](const std::vector<std::size_t>& eps) {
    std::vector<Sample> out;
    for (std::size_t e : eps) {
      const auto& ep = d.episodes[e];
      for (std::size_t t = 0; t < ep.length; ++t) {
        if (auto tgt = pose_target(d, ep, t, cfg)) out.push_back({ep.begin + t, *tgt});
      }
    }
    return out;
  };
  const std::vector<Sample> train = samples_of(train_eps);
  if (train.empty()) throw MissingGroundTruth("no probe targets; episodes shorter than H");
  const std::size_t L = d.latents.front().size();

  PoseProbeResult res;
  res.decoder.spec = nn::mlp("pose", L, cfg.hidden, 6, nn::Activation::Elu, nn::Activation::None);
  res.decoder.params = nn::init_params(res.decoder.spec, rng);
  ad::AdamWConfig opt;
  opt.lr = cfg.lr;
  double last = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(train.size(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.minibatch) {
      const std::size_t end = std::min(order.size(), start + cfg.minibatch);
      Tensor x({end - start, L});
      Tensor y({end - start, 6});
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train[order[i]];
        std::copy(d.latents[s.index].begin(), d.latents[s.index].end(), x.data.begin() + (i - start) * L);
        const auto t6 = rotmath::rot6d_from_matrix(s.target);
        std::copy(t6.begin(), t6.end(), y.data.begin() + (i - start) * 6);
      }
      Tape tape;
      Var pred = nn::forward(res.decoder.spec, res.decoder.params, tape.constant(std::move(x)), tape);
      Var loss = ad::mean(ad::square(ad::sub(pred, tape.constant(std::move(y)))));
      tape.backward(loss);
      ad::adamw_step(res.decoder.params, tape.gradients(res.decoder.params), opt);
      total += loss.item() * static_cast<double>(end - start);
    }
    last = total / static_cast<double>(train.size());
  }
  res.report.train_mse = last;

  double step_sum = 0.0;
  std::size_t step_n = 0;
  double cum_sum = 0.0;
  std::size_t cum_n = 0;
  const std::size_t H = static_cast<std::size_t>(cfg.H);
  const std::size_t K = static_cast<std::size_t>(cfg.horizon);
  for (std::size_t e : val_eps) {
    const auto& ep = d.episodes[e];
    std::vector<std::optional<Rotation>> pred(ep.length);
    for (std::size_t t = 0; t < ep.length; ++t) {
      auto tgt = pose_target(d, ep, t, cfg);
      if (!tgt) continue;
      pred[t] = res.decoder.predict(d.latents[ep.begin + t]);
      step_sum += rotmath::geodesic_distance(*pred[t], *tgt);
      ++step_n;
    }
    for (std::size_t t0 = 0; t0 + K < ep.length; t0 += K) {
      if (cfg.param == PoseParam::Absolute) {
        cum_sum += rotmath::geodesic_distance(*pred[t0 + K], *pose_target(d, ep, t0 + K, cfg));
      } else {
        std::vector<Rotation> p, q;
        for (std::size_t t = t0 + H; t <= t0 + K; t += H) {
          p.push_back(*pred[t]);
          q.push_back(*pose_target(d, ep, t, cfg));
        }
        cum_sum += composed_error(p, q);
      }
      ++cum_n;
    }
  }
  res.report.step_error = step_n ? step_sum / static_cast<double>(step_n) : 0.0;
  res.report.cumulative_error = cum_n ? cum_sum / static_cast<double>(cum_n) : res.report.step_error;
  res.report.windows = cum_n;
  return res;
}

double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  double tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i]) (predicted[i] ? tp : fn) += 1;
    else (predicted[i] ? fp : tn) += 1;
  }
  const double tpr = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  const double tnr = tn + fp > 0 ? tn / (tn + fp) : 0.0;
  if (tp + fn == 0) return tnr;
  if (tn + fp == 0) return tpr;
  return 0.5 * (tpr + tnr);
}

LinearProbeResult slip_probe(const LatentDataset& d, std::uint64_t seed, double val_fraction, int epochs) {
  if (d.slip.size() != d.latents.size() || d.latents.empty()) throw MissingGroundTruth("slip probe needs slip labels");
  std::mt19937_64 rng(seed);
  auto [train_eps, val_eps] = split_episodes(d.episodes.size(), val_fraction, rng);
  if (val_eps.empty()) val_eps = train_eps;
  auto indices = [&](const std::vector<std::size_t>& eps) {
    std::vector<std::size_t> out;
    for (std::size_t e : eps) {
      for (std::size_t t = 0; t < d.episodes[e].length; ++t) out.push_back(d.episodes[e].begin + t);
    }
    return out;
  };
  const auto tr = indices(train_eps);
  const auto va = indices(val_eps);
  const std::size_t L = d.latents.front().size();

  std::vector<double> mu(L, 0.0), sd(L, 0.0);
  for (std::size_t i : tr) {
    for (std::size_t k = 0; k < L; ++k) mu[k] += d.latents[i][k];
  }
  for (auto& m : mu) m /= static_cast<double>(tr.size());
  for (std::size_t i : tr) {
    for (std::size_t k = 0; k < L; ++k) sd[k] += (d.latents[i][k] - mu[k]) * (d.latents[i][k] - mu[k]);
  }
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(tr.size())) + 1e-8;
  auto feat = [&](std::size_t i, std::size_t k) { return (d.latents[i][k] - mu[k]) / sd[k]; };

  LinearProbeResult res;
  for (std::size_t i : tr) (d.slip[i] > 0.5 ? res.positives : res.negatives) += 1;
  const double n = static_cast<double>(tr.size());
  const double w_pos = res.positives ? n / (2.0 * static_cast<double>(res.positives)) : 0.0;
  const double w_neg = res.negatives ? n / (2.0 * static_cast<double>(res.negatives)) : 0.0;

  // Full-batch gradient descent on the weighted logistic loss.
  std::vector<double> w(L + 1, 0.0);
  const double lr = 0.5;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<double> g(L + 1, 0.0);
    for (std::size_t i : tr) {
      double s = w[L];
      for (std::size_t k = 0; k < L; ++k) s += w[k] * feat(i, k);
      const double p = 1.0 / (1.0 + std::exp(-s));
      const double y = d.slip[i] > 0.5 ? 1.0 : 0.0;
      const double c = (y > 0.5 ? w_pos : w_neg) * (p - y) / n;
      for (std::size_t k = 0; k < L; ++k) g[k] += c * feat(i, k);
      g[L] += c;
    }
    for (std::size_t k = 0; k <= L; ++k) w[k] -= lr * g[k];
  }
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    std::vector<int> pred, truth;
    for (std::size_t i : idx) {
      double s = w[L];
      for (std::size_t k = 0; k < L; ++k) s += w[k] * feat(i, k);
      pred.push_back(s > 0.0 ? 1 : 0);
      truth.push_back(d.slip[i] > 0.5 ? 1 : 0);
    }
    return balanced_accuracy(pred, truth);
  };
  res.train_balanced_accuracy = accuracy(tr);
  res.balanced_accuracy = accuracy(va);
  return res;
}

}  // namespace ptld::eval
