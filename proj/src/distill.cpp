#include "ptld/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>

namespace ptld::distill {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;
using policy::EncoderInput;
using policy::EncoderKind;
using policy::EncoderLayout;

namespace {

void append(std::vector<double>& out, std::span<const double> v) { out.insert(out.end(), v.begin(), v.end()); }

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

std::vector<double> clipped(std::vector<double> a) {
  for (double& x : a) x = std::clamp(x, -1.0, 1.0);
  return a;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

// ---- records and datasets -------------------------------------------------------

plant::ObservationBundle DemoRecord::observation() const {
  plant::ObservationBundle o;
  o.proprio = proprio;
  o.goal = goal;
  o.pose = pose;
  o.tactile = tactile;
  o.taxel_pos = taxel_pos;
  return o;
}

DatasetDims DatasetDims::of(const plant::PlantParams& p, std::size_t latent_dim) {
  DatasetDims d;
  d.tactile = static_cast<std::size_t>(p.tactile_substeps * p.tactile_frame_dim());
  d.taxel_pos = static_cast<std::size_t>(p.taxels() * 3);
  d.proprio = static_cast<std::size_t>(p.proprio_dim());
  d.goal = static_cast<std::size_t>(p.goal_dim());
  d.pose = static_cast<std::size_t>(p.pose_dim());
  d.action = static_cast<std::size_t>(p.action_dim());
  d.latent = latent_dim;
  d.fingers = static_cast<std::size_t>(p.K);
  return d;
}

json DatasetDims::to_json() const {
  return {{"tactile", tactile}, {"taxel_pos", taxel_pos}, {"proprio", proprio}, {"goal", goal},
          {"pose", pose},       {"action", action},       {"latent", latent},   {"fingers", fingers}};
}

DatasetDims DatasetDims::from_json(const json& j) {
  DatasetDims d;
  d.tactile = j.at("tactile");
  d.taxel_pos = j.at("taxel_pos");
  d.proprio = j.at("proprio");
  d.goal = j.at("goal");
  d.pose = j.at("pose");
  d.action = j.at("action");
  d.latent = j.at("latent");
  d.fingers = j.at("fingers");
  return d;
}

void DemoDataset::check_record(const DemoRecord& r) const {
  auto need = [](const std::vector<double>& v, std::size_t n, const char* what) {
    if (v.size() != n) {
      throw ad::ShapeMismatch(std::string("demo record field ") + what + " has " + std::to_string(v.size()) +
                              " values, header says " + std::to_string(n));
    }
  };
  need(r.tactile, dims.tactile, "tactile");
  need(r.taxel_pos, dims.taxel_pos, "taxel_pos");
  need(r.proprio, dims.proprio, "proprio");
  need(r.goal, dims.goal, "goal");
  need(r.pose, dims.pose, "pose");
  need(r.prev_action, dims.action, "prev_action");
  need(r.action, dims.action, "action");
  need(r.z_hat, dims.latent, "z_hat");
  need(r.z_student, dims.latent, "z_student");
  need(r.true_rot6d, 6, "true_rot6d");
  need(r.slip, dims.fingers, "slip");
}

void DemoDataset::append_round(const DemoDataset& other) {
  if (other.empty()) return;
  if (records.empty() && rounds.empty()) {
    const std::size_t r = rounds.size();
    *this = other;
    rounds = {RoundInfo{r, 0, other.size()}};
    return;
  }
  if (other.task != task || !(other.dims == dims)) throw ad::ShapeMismatch("appended round does not match the dataset schema");
  if (other.plant_hash != plant_hash) throw ad::ShapeMismatch("appended round comes from a different plant");
  std::uint64_t next = 0;
  for (const auto& r : records) next = std::max(next, r.episode + 1);
  std::map<std::uint64_t, std::uint64_t> remap;
  RoundInfo info{rounds.size(), records.size(), other.size()};
  for (DemoRecord r : other.records) {
    auto it = remap.find(r.episode);
    if (it == remap.end()) it = remap.emplace(r.episode, next + remap.size()).first;
    r.episode = it->second;
    records.push_back(std::move(r));
  }
  rounds.push_back(info);
}

std::vector<Episode> DemoDataset::episodes() const {
  std::vector<Episode> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (i == 0 || records[i].episode != records[i - 1].episode) out.push_back({i, 0});
    ++out.back().length;
  }
  return out;
}

std::size_t DemoDataset::episode_count() const { return episodes().size(); }

io::Container to_container(const DemoDataset& d) {
  io::Container c;
  json rounds = json::array();
  for (const auto& r : d.rounds) rounds.push_back({{"round", r.round}, {"begin", r.begin}, {"count", r.count}});
  c.header = {{"schema", "ptld.demos"},
              {"task", plant::task_name(d.task)},
              {"dims", d.dims.to_json()},
              {"plant_hash", io::hex64(d.plant_hash)},
              {"policy_hash", io::hex64(d.policy_hash)},
              {"config_hash", io::hex64(d.config_hash)},
              {"rounds", rounds}};
  for (const auto& r : d.records) {
    d.check_record(r);
    io::RecordWriter w;
    w.u64(r.episode).u64(r.step).u64(r.generation);
    w.u64((r.has_student ? 1u : 0u) | (r.dropped ? 2u : 0u));
    for (const auto* v : {&r.tactile, &r.taxel_pos, &r.proprio, &r.goal, &r.pose, &r.prev_action, &r.action, &r.z_hat,
                          &r.z_student, &r.true_rot6d, &r.slip}) {
      w.f64s(*v);
    }
    c.records.push_back(w.take());
  }
  return c;
}

DemoDataset from_container(const io::Container& c) {
  if (c.header.value("schema", "") != "ptld.demos") throw io::CorruptContainer("container holds no demo dataset");
  DemoDataset d;
  try {
    d.task = plant::parse_task(c.header.at("task"));
    d.dims = DatasetDims::from_json(c.header.at("dims"));
    d.plant_hash = std::stoull(c.header.at("plant_hash").get<std::string>(), nullptr, 16);
    d.policy_hash = std::stoull(c.header.at("policy_hash").get<std::string>(), nullptr, 16);
    d.config_hash = std::stoull(c.header.at("config_hash").get<std::string>(), nullptr, 16);
    for (const auto& r : c.header.at("rounds")) d.rounds.push_back({r.at("round"), r.at("begin"), r.at("count")});
  } catch (const json::exception& e) {
    throw io::CorruptContainer(std::string("malformed demo header: ") + e.what());
  }
  const DatasetDims& m = d.dims;
  for (const auto& bytes : c.records) {
    io::RecordReader rd(bytes);
    DemoRecord r;
    r.episode = rd.u64();
    r.step = rd.u64();
    r.generation = rd.u64();
    const std::uint64_t flags = rd.u64();
    r.has_student = flags & 1u;
    r.dropped = flags & 2u;
    r.tactile = rd.f64s(m.tactile);
    r.taxel_pos = rd.f64s(m.taxel_pos);
    r.proprio = rd.f64s(m.proprio);
    r.goal = rd.f64s(m.goal);
    r.pose = rd.f64s(m.pose);
    r.prev_action = rd.f64s(m.action);
    r.action = rd.f64s(m.action);
    r.z_hat = rd.f64s(m.latent);
    r.z_student = rd.f64s(m.latent);
    r.true_rot6d = rd.f64s(6);
    r.slip = rd.f64s(m.fingers);
    if (!rd.done()) throw io::CorruptContainer("demo record longer than the header's dims");
    d.records.push_back(std::move(r));
  }
  std::size_t covered = 0;
  for (const auto& r : d.rounds) {
    if (r.begin != covered) throw io::CorruptContainer("demo rounds are not contiguous");
    covered += r.count;
  }
  if (covered != d.records.size()) throw io::CorruptContainer("demo rounds do not cover the record stream");
  return d;
}

void save_dataset(const std::filesystem::path& path, const DemoDataset& d) {
  io::Container c = to_container(d);
  io::stamp_created(c.header);
  io::write_file(path, c);
}

DemoDataset load_dataset(const std::filesystem::path& path) { return from_container(io::read_file(path)); }

// ---- config ---------------------------------------------------------------------

DistillConfig DistillConfig::from_config(Config& cfg, const std::string& section) {
  DistillConfig c;
  const std::string s = section + ".";
  c.dagger_rounds = cfg.get(s + "dagger_rounds", c.dagger_rounds);
  c.episodes_per_round = cfg.get(s + "episodes_per_round", c.episodes_per_round);
  c.eval_episodes = cfg.get(s + "eval_episodes", c.eval_episodes);
  c.epochs = cfg.get(s + "epochs", c.epochs);
  c.minibatch = cfg.get(s + "minibatch", c.minibatch);
  c.lr = cfg.get(s + "lr", c.lr);
  c.encoder = cfg.get(s + "encoder", c.encoder);
  c.mask_tactile = cfg.get(s + "mask_tactile", c.mask_tactile);
  c.max_steps = cfg.get(s + "max_steps", c.max_steps);
  c.validate();
  return c;
}

void DistillConfig::validate() const {
  if (dagger_rounds < 1) throw ConfigError("distill.dagger_rounds must be >= 1");
  if (episodes_per_round < 1 || eval_episodes < 1) throw ConfigError("distill episode counts must be >= 1");
  if (epochs < 1 || minibatch < 1) throw ConfigError("distill.epochs and distill.minibatch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("distill.lr must be > 0");
  if (!encoder.empty() && encoder != "tc" && encoder != "ar") throw ConfigError("distill.encoder must be tc or ar");
  if (max_steps < 0) throw ConfigError("distill.max_steps must be >= 0");
}

EncoderLayout student_layout(const plant::PlantParams& deploy, const policy::PolicyNet& teacher,
                             const DistillConfig& cfg) {
  EncoderKind kind = deploy.task == plant::Task::Rotation ? EncoderKind::TemporalConv : EncoderKind::Transformer;
  if (!cfg.encoder.empty()) kind = policy::parse_kind(cfg.encoder);
  return policy::layout_for(deploy, policy::ObsView::Tactile, kind, teacher.net);
}

// ---- collection -----------------------------------------------------------------

DemoDataset deploy_and_collect(const plant::PlantParams& deploy, const plant::GraspCache* cache,
                               const policy::PolicyNet& teacher, const CollectOptions& opts) {
  if (!deploy.deployment) throw plant::NotDeploymentPlant("collection runs on a deployment plant");
  if (teacher.task != deploy.task) {
    throw policy::IncompatibleCheckpoint("policy was trained for " + plant::task_name(teacher.task) +
                                         ", deployment plant runs " + plant::task_name(deploy.task));
  }
  if (teacher.actor.layout.view != policy::ObsView::ProprioPose) {
    throw policy::IncompatibleCheckpoint("collection needs a policy whose actor reads noisy pose and proprioception");
  }
  if (!(teacher.actor.layout ==
        policy::layout_for(deploy, policy::ObsView::ProprioPose, EncoderKind::Mlp, teacher.net))) {
    throw policy::IncompatibleCheckpoint("policy observation layout does not fit the deployment plant");
  }
  if (opts.acting == Acting::Student && opts.student == nullptr) {
    throw std::invalid_argument("student acting requested without a student encoder");
  }
  if (opts.student != nullptr && opts.student->layout.latent_dim != teacher.latent_dim()) {
    throw LatentDimMismatch("student latent dim " + std::to_string(opts.student->layout.latent_dim) +
                            " != policy latent dim " + std::to_string(teacher.latent_dim()));
  }
  DemoDataset d;
  d.task = deploy.task;
  d.dims = DatasetDims::of(deploy, teacher.latent_dim());
  d.plant_hash = deploy.hash();
  d.policy_hash = policy::heads_hash(teacher) ^ teacher.actor.params.value_hash();
  const std::size_t A = teacher.action_dim;
  const int limit = opts.max_steps > 0 ? std::min(opts.max_steps, deploy.max_steps) : deploy.max_steps;
  std::mt19937_64 rng(opts.seed);
  for (int ep = 0; ep < opts.episodes; ++ep) {
    plant::Env env(deploy, cache, rng());
    plant::ObservationBundle obs = env.reset();
    policy::ObsAssembler tA(teacher.actor.layout);
    tA.reset(obs, A);
    std::optional<policy::ObsAssembler> sA;
    if (opts.student != nullptr) {
      sA.emplace(opts.student->layout, opts.mask_tactile);
      sA->reset(obs, A);
    }
    std::vector<double> prev(A, 0.0);
    for (int t = 0; t < limit; ++t) {
      if (t > 0) {
        tA.push(obs, prev);
        if (sA) sA->push(obs, prev);
      }
      DemoRecord r;
      r.episode = static_cast<std::uint64_t>(ep);
      r.step = static_cast<std::uint64_t>(t);
      r.generation = opts.generation;
      r.z_hat = teacher.actor.encode(tA.input());
      r.z_student.assign(teacher.latent_dim(), 0.0);
      if (sA) {
        r.z_student = opts.student->encode(sA->input());
        r.has_student = true;
        sA->set_latent(r.z_student);
      }
      const auto& z_act = opts.acting == Acting::Student ? r.z_student : r.z_hat;
      r.action = clipped(policy::action_from_latent(teacher, z_act));
      r.prev_action = prev;
      r.tactile = obs.tactile;
      r.taxel_pos = obs.taxel_pos;
      r.proprio = obs.proprio;
      r.goal = obs.goal;
      r.pose = obs.pose;
      const plant::PlantState& st = env.state();
      const rotmath::Rotation R = deploy.task == plant::Task::Rotation ? rotmath::rot_z(st.theta) : st.R;
      const auto r6 = rotmath::rot6d_from_matrix(R);
      r.true_rot6d.assign(r6.begin(), r6.end());
      r.slip.assign(st.slip.begin(), st.slip.end());
      plant::StepResult res = env.step(r.action);
      r.dropped = res.dropped;
      prev = r.action;
      obs = std::move(res.obs);
      d.check_record(r);
      d.records.push_back(std::move(r));
      if (res.done) break;
    }
  }
  d.rounds = {RoundInfo{0, 0, d.records.size()}};
  return d;
}

EncoderInput student_input(const EncoderLayout& layout, const DemoDataset& d, const Episode& ep, std::size_t t,
                           bool mask_tactile) {
  if (t >= ep.length) throw std::out_of_range("step outside the episode");
  auto rec = [&](std::size_t i) -> const DemoRecord& { return d.records[ep.begin + i]; };
  EncoderInput in;
  if (layout.kind == EncoderKind::Transformer) {
    const std::size_t first = t + 1 > layout.context ? t + 1 - layout.context : 0;
    for (std::size_t s = first; s <= t; ++s) {
      const DemoRecord& r = rec(s);
      policy::ArToken tok;
      tok.tactile = mask_tactile ? std::vector<double>(r.tactile.size(), 0.0) : r.tactile;
      tok.proprio = r.proprio;
      append(tok.proprio, r.prev_action);
      tok.goal = r.goal;
      tok.z_prev = s == 0 ? std::vector<double>(layout.latent_dim, 0.0) : rec(s - 1).conditioning_latent();
      append(in.flat, policy::flatten_token(layout, tok));
    }
    return in;
  }
  if (layout.frame_dim > 0) {
    for (std::size_t k = 0; k < layout.frames; ++k) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(layout.frames - 1 - k);
      const DemoRecord& r = rec(static_cast<std::size_t>(std::max<std::ptrdiff_t>(s, 0)));
      append(in.flat, policy::frame_of(layout.view, r.observation(), r.prev_action));
    }
  }
  if (layout.kind == EncoderKind::TemporalConv) {
    const std::size_t S = layout.substeps, X = layout.taxels, C = layout.tactile_channels();
    const std::ptrdiff_t end = static_cast<std::ptrdiff_t>(t * S + S - 1);
    in.tactile.assign(layout.window_frames * C, 0.0);
    if (!mask_tactile) {
      for (std::size_t k = 0; k < layout.window_frames; ++k) {
        const std::ptrdiff_t g = std::max<std::ptrdiff_t>(end - static_cast<std::ptrdiff_t>(layout.window_frames - 1 - k), 0);
        const DemoRecord& r = rec(static_cast<std::size_t>(g) / S);
        const std::size_t sub = static_cast<std::size_t>(g) % S;
        double* f = in.tactile.data() + k * C;
        for (std::size_t x = 0; x < X; ++x) {
          for (int c = 0; c < 3; ++c) {
            f[x * 6 + c] = r.tactile[sub * X * 3 + x * 3 + c];
            f[x * 6 + 3 + c] = r.taxel_pos[x * 3 + c];
          }
        }
      }
    }
  }
  return in;
}

// ---- fitting --------------------------------------------------------------------

namespace {

// A training unit: one step (mlp/tc) or one token segment (ar).
struct Unit {
  std::size_t episode = 0;
  std::size_t begin = 0;  // first step
  std::size_t length = 1;
};

struct FitData {
  const DemoDataset* d = nullptr;
  const EncoderLayout* layout = nullptr;
  std::vector<Episode> episodes;
  bool mask = false;
};

std::vector<Unit> units_of(const FitData& f, std::span<const std::size_t> episode_ids) {
  std::vector<Unit> out;
  const bool ar = f.layout->kind == EncoderKind::Transformer;
  for (std::size_t e : episode_ids) {
    const std::size_t len = f.episodes[e].length;
    if (!ar) {
      for (std::size_t t = 0; t < len; ++t) out.push_back({e, t, 1});
      continue;
    }
    const std::size_t C = f.layout->context;
    if (len <= C) {
      out.push_back({e, 0, len});
      continue;
    }
    for (std::size_t b = 0; b + C <= len; b += C) out.push_back({e, b, C});
    if (len % C != 0) out.push_back({e, len - C, C});
  }
  return out;
}

// Mean over targets of ||z - z_hat||^2 for a batch of units with equal length.
Var batch_loss(Tape& tape, const policy::Encoder& enc, const FitData& f, std::span<const Unit> units) {
  const DemoDataset& d = *f.d;
  const std::size_t L = enc.layout.latent_dim;
  if (enc.layout.kind != EncoderKind::Transformer) {
    std::vector<EncoderInput> ins;
    ins.reserve(units.size());
    Tensor target({units.size(), L});
    for (std::size_t i = 0; i < units.size(); ++i) {
      const Episode& ep = f.episodes[units[i].episode];
      ins.push_back(student_input(enc.layout, d, ep, units[i].begin, f.mask));
      const auto& z = d.records[ep.begin + units[i].begin].z_hat;
      std::copy(z.begin(), z.end(), target.data.begin() + i * L);
    }
    std::vector<const EncoderInput*> ptrs;
    for (const auto& in : ins) ptrs.push_back(&in);
    Var z = enc.forward(tape, ptrs);
    return ad::scale(ad::sum(ad::square(ad::sub(z, tape.constant(std::move(target))))),
                     1.0 / static_cast<double>(units.size()));
  }
  const std::size_t T = units[0].length, td = enc.layout.token_dim();
  Tensor tok({units.size() * T, td});
  Tensor target({units.size() * T, L});
  for (std::size_t i = 0; i < units.size(); ++i) {
    const Episode& ep = f.episodes[units[i].episode];
    // A segment is one history window; tokens before the segment are not visible.
    Episode seg{ep.begin + units[i].begin, units[i].length};
    EncoderInput in = student_input(enc.layout, d, seg, T - 1, f.mask);
    if (units[i].begin > 0) {
      // Restore the fed-back latent of the step before the segment.
      const auto& zp = d.records[seg.begin - 1].conditioning_latent();
      std::copy(zp.begin(), zp.end(), in.flat.begin() + (td - L));
    }
    std::copy(in.flat.begin(), in.flat.end(), tok.data.begin() + i * T * td);
    for (std::size_t s = 0; s < T; ++s) {
      const auto& z = d.records[seg.begin + s].z_hat;
      std::copy(z.begin(), z.end(), target.data.begin() + (i * T + s) * L);
    }
  }
  Var z = enc.forward_all(tape, tape.constant(std::move(tok)), T);
  return ad::scale(ad::sum(ad::square(ad::sub(z, tape.constant(std::move(target))))),
                   1.0 / static_cast<double>(units.size() * T));
}

// Groups unit indices into minibatches of equal segment length.
std::vector<std::vector<std::size_t>> minibatches(const std::vector<Unit>& units, std::span<const std::size_t> order,
                                                  std::size_t size) {
  std::map<std::size_t, std::vector<std::size_t>> open;
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i : order) {
    auto& b = open[units[i].length];
    b.push_back(i);
    if (b.size() == size) out.push_back(std::move(b)), b.clear();
  }
  for (auto& [len, b] : open) {
    if (!b.empty()) out.push_back(std::move(b));
  }
  return out;
}

double evaluate(const policy::Encoder& enc, const FitData& f, const std::vector<Unit>& units, std::size_t size) {
  if (units.empty()) return 0.0;
  std::vector<std::size_t> order(units.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  double weight = 0.0;
  for (const auto& b : minibatches(units, order, size)) {
    std::vector<Unit> batch;
    for (std::size_t i : b) batch.push_back(units[i]);
    Tape tape;
    const double w = static_cast<double>(batch.size() * batch[0].length);
    total += batch_loss(tape, enc, f, batch).item() * w;
    weight += w;
  }
  return total / weight;
}

}  // namespace

FitResult fit_tactile_encoder(const DemoDataset& d, const EncoderLayout& layout, const policy::NetConfig& net,
                              const DistillConfig& cfg, std::uint64_t seed, const policy::Encoder* warm_start) {
  if (d.empty()) throw EmptyDataset("no demonstrations to fit");
  if (layout.latent_dim != d.dims.latent) {
    throw LatentDimMismatch("encoder latent dim " + std::to_string(layout.latent_dim) + " != dataset latent dim " +
                            std::to_string(d.dims.latent));
  }
  cfg.validate();
  std::mt19937_64 rng(seed);
  FitData f{&d, &layout, d.episodes(), cfg.mask_tactile};
  std::vector<std::size_t> eps = shuffled(f.episodes.size(), rng);
  const std::size_t n_val = eps.size() >= 2 ? std::max<std::size_t>(1, (eps.size() + 5) / 10) : 0;
  std::vector<std::size_t> val_eps(eps.begin(), eps.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_eps(eps.begin() + static_cast<std::ptrdiff_t>(n_val), eps.end());
  std::sort(val_eps.begin(), val_eps.end());
  std::sort(train_eps.begin(), train_eps.end());
  const std::vector<Unit> train = units_of(f, train_eps);
  const std::vector<Unit> val = units_of(f, val_eps);

  FitResult out;
  out.encoder = warm_start != nullptr ? *warm_start : policy::Encoder::build(layout, net, rng);
  if (!(out.encoder.layout == layout)) throw ad::ShapeMismatch("warm-start encoder has a different layout");
  ad::AdamWConfig opt;
  opt.lr = cfg.lr;
  const std::size_t mb =
      layout.kind == EncoderKind::Transformer ? std::max<std::size_t>(1, cfg.minibatch / layout.context) : cfg.minibatch;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = shuffled(train.size(), rng);
    double total = 0.0;
    double weight = 0.0;
    for (const auto& b : minibatches(train, order, mb)) {
      std::vector<Unit> batch;
      for (std::size_t i : b) batch.push_back(train[i]);
      Tape tape;
      Var loss = batch_loss(tape, out.encoder, f, batch);
      if (!std::isfinite(loss.item())) throw rl::NaNLoss("non-finite distillation loss in epoch " + std::to_string(epoch));
      tape.backward(loss);
      ad::Gradients g = tape.gradients(out.encoder.params);
      const double norm = ad::global_grad_norm({&g});
      if (norm > 1.0) ad::scale_gradients(g, 1.0 / norm);
      ad::adamw_step(out.encoder.params, g, opt);
      const double w = static_cast<double>(batch.size() * batch[0].length);
      total += loss.item() * w;
      weight += w;
    }
    FitCurveRow row{epoch, total / weight, 0.0};
    row.val_mse = val.empty() ? row.train_mse : evaluate(out.encoder, f, val, mb);
    out.curve.push_back(row);
  }
  return out;
}

double closed_loop_mse(const DemoDataset& d) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : d.records) {
    if (!r.has_student) continue;
    s += sq_dist(r.z_student, r.z_hat);
    ++n;
  }
  if (n == 0) throw EmptyDataset("no records carry a student latent");
  return s / static_cast<double>(n);
}

DaggerResult dagger_iterate(const plant::PlantParams& deploy, const plant::GraspCache* cache,
                            const policy::PolicyNet& teacher, const DistillConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const EncoderLayout layout = student_layout(deploy, teacher, cfg);
  std::mt19937_64 rng(seed);
  const std::uint64_t eval_seed = rng();
  DaggerResult out;
  for (int round = 0; round < cfg.dagger_rounds; ++round) {
    CollectOptions co;
    co.episodes = cfg.episodes_per_round;
    co.seed = rng();
    co.mask_tactile = cfg.mask_tactile;
    co.generation = static_cast<std::uint64_t>(round);
    co.max_steps = cfg.max_steps;
    if (round > 0) {
      co.acting = Acting::Student;
      co.student = &out.encoder;
    }
    DemoDataset fresh = deploy_and_collect(deploy, cache, teacher, co);
    const std::size_t fresh_size = fresh.size();
    out.dataset.append_round(fresh);
    FitResult fit = fit_tactile_encoder(out.dataset, layout, teacher.net, cfg, rng());
    out.encoder = std::move(fit.encoder);

    CollectOptions ev;
    ev.episodes = cfg.eval_episodes;
    ev.seed = eval_seed;
    ev.acting = Acting::Student;
    ev.student = &out.encoder;
    ev.mask_tactile = cfg.mask_tactile;
    ev.max_steps = cfg.max_steps;
    const DemoDataset probe = deploy_and_collect(deploy, cache, teacher, ev);
    RoundReport rep;
    rep.round = round;
    rep.records = fresh_size;
    rep.aggregate = out.dataset.size();
    rep.val_mse = fit.curve.back().val_mse;
    rep.closed_loop_mse = closed_loop_mse(probe);
    rep.mean_episode_length = static_cast<double>(probe.size()) / static_cast<double>(probe.episode_count());
    out.rounds.push_back(rep);
  }
  return out;
}

void write_round_csv(const std::filesystem::path& path, const std::vector<RoundReport>& rounds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "round,records,aggregate,val_mse,closed_loop_mse,mean_episode_length\n";
  for (const auto& r : rounds) {
    os << r.round << ',' << r.records << ',' << r.aggregate << ',' << format_double(r.val_mse) << ','
       << format_double(r.closed_loop_mse) << ',' << format_double(r.mean_episode_length) << '\n';
  }
}

// ---- swap -----------------------------------------------------------------------

rl::Checkpoint swap_encoder(const rl::Checkpoint& ck, const policy::Encoder& encoder, const std::string& tag) {
  const std::size_t out_dim = encoder.layout.kind == EncoderKind::TemporalConv ? encoder.head.output_dim()
                                                                              : encoder.body.output_dim();
  if (encoder.layout.latent_dim != ck.net.latent_dim() || out_dim != ck.net.latent_dim()) {
    throw LatentDimMismatch("encoder latent dim " + std::to_string(encoder.layout.latent_dim) +
                            " does not match the policy head input " + std::to_string(ck.net.latent_dim()));
  }
  const std::string enc_hash = io::hex64(encoder.params.value_hash());
  const std::string enc_spec = io::hex64(encoder.spec_hash());
  rl::Checkpoint out = ck;
  out.net.actor = encoder;
  if (ck.stage == "swap" && ck.lineage.value("replaced_actor_hash", "") == enc_hash &&
      ck.lineage.value("replaced_actor_spec_hash", "") == enc_spec) {
    out.stage = ck.lineage.at("base_stage");
    out.lineage = ck.lineage.at("base_lineage");
    return out;
  }
  out.stage = "swap";
  out.lineage = {{"base_stage", ck.stage},
                 {"base_lineage", ck.lineage},
                 {"replaced_actor_hash", io::hex64(ck.net.actor.params.value_hash())},
                 {"replaced_actor_spec_hash", io::hex64(ck.net.actor.spec_hash())},
                 {"encoder_hash", enc_hash},
                 {"encoder_kind", policy::kind_name(encoder.layout.kind)},
                 {"encoder_view", policy::view_name(encoder.layout.view)},
                 {"heads_hash", io::hex64(policy::heads_hash(ck.net))},
                 {"tag", tag}};
  return out;
}

}  // namespace ptld::distill
