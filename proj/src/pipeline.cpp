#include "ptld/pipeline.hpp"

#include "ptld/container.hpp"

#include <cstdlib>
#include <fstream>
#include <random>

namespace ptld::pipeline {

using json = nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) { return ad::fnv1a(&v, sizeof v, h); }

std::uint64_t parse_hex(const json& j) { return std::stoull(j.get<std::string>(), nullptr, 16); }

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create " + p.string() + ": " + ec.message());
}

std::string seed_tag(std::uint64_t s) { return "s" + std::to_string(s); }

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void check_identity(const RunConfig& rc, std::uint64_t found, const fs::path& path) {
  if (found != rc.identity_hash()) {
    throw ConfigMismatch(path.string() + " was produced under run identity " + io::hex64(found) +
                         ", this run is " + io::hex64(rc.identity_hash()));
  }
}

json report_json(const eval::MetricReport& r) {
  json j = r.to_json();
  j["metrics"] = r.metrics;
  j["rows"] = r.rows;
  return j;
}

void write_report(const fs::path& dir, const eval::MetricReport& r) {
  write_json(dir / (r.name + ".json"), report_json(r));
  r.write_csv(dir / (r.name + ".csv"));
  r.write_jsonl(dir / (r.name + ".jsonl"));
}

}  // namespace

// ---- run config -----------------------------------------------------------------

std::uint64_t RunConfig::identity_hash() const {
  std::uint64_t h = mix(1469598103934665603ULL, static_cast<std::uint64_t>(task));
  h = mix(h, train.hash());
  h = mix(h, deploy.hash());
  const std::string n = net.to_json().dump();
  h = ad::fnv1a(n.data(), n.size(), h);
  h = mix(h, grasp_n);
  return mix(h, grasp_seed);
}

RunConfig RunConfig::load(const Config& base, const Config& overrides) {
  RunConfig rc;
  rc.cfg = base;
  rc.cfg.merge(overrides);
  Config& c = rc.cfg;
  rc.task = plant::parse_task(c.get("run.task", std::string("rotation")));
  std::vector<double> seeds = c.get("run.seeds", std::vector<double>{1.0});
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  rc.seeds.clear();
  for (double s : seeds) {
    if (s < 0.0 || s != static_cast<double>(static_cast<std::uint64_t>(s))) {
      throw ConfigError("run.seeds must be non-negative integers");
    }
    rc.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  const char* env = std::getenv(kOutRootEnv);
  rc.out = c.get("run.out", std::string(env != nullptr && *env != '\0' ? env : "runs"));
  const long long gn = c.get("grasp.n", 64LL);
  if (gn <= 0) throw ConfigError("grasp.n must be positive");
  rc.grasp_n = static_cast<std::size_t>(gn);
  rc.grasp_seed = static_cast<std::uint64_t>(c.get("grasp.seed", 1LL));
  rc.train = plant::PlantParams::from_config(c, rc.task, false);
  rc.deploy = plant::PlantParams::from_config(c, rc.task, true);
  rc.net = policy::NetConfig::from_config(c);
  rc.ppo = rl::PPOConfig::from_config(c);
  rc.distill = distill::DistillConfig::from_config(c);

  eval::PoseProbeConfig& p = rc.probe;
  p.param = c.get("probe.param", std::string("relative")) == "absolute" ? eval::PoseParam::Absolute
                                                                         : eval::PoseParam::Relative;
  p.H = c.get("probe.H", p.H);
  p.horizon = c.get("probe.horizon", p.horizon);
  p.epochs = c.get("probe.epochs", p.epochs);
  p.minibatch = c.get("probe.minibatch", p.minibatch);
  p.lr = c.get("probe.lr", p.lr);
  p.val_fraction = c.get("probe.val_fraction", p.val_fraction);
  std::vector<double> hidden(p.hidden.begin(), p.hidden.end());
  hidden = c.get("probe.hidden", hidden);
  p.hidden.assign(hidden.begin(), hidden.end());
  if (p.H < 1 || p.horizon < 1 || p.epochs < 1 || p.minibatch == 0 || !(p.lr > 0.0) ||
      !(p.val_fraction > 0.0 && p.val_fraction < 1.0)) {
    throw ConfigError("probe settings out of range");
  }

  rc.eval.trials = c.get("eval.trials", rc.eval.trials);
  rc.eval.seed = static_cast<std::uint64_t>(c.get("eval.seed", 99LL));
  rc.eval.relaxed_goal = c.get("eval.relaxed_goal", rc.eval.relaxed_goal);
  rc.eval.max_steps = c.get("eval.max_steps", rc.eval.max_steps);
  if (rc.eval.trials < 1 || rc.eval.max_steps < 0) throw ConfigError("eval settings out of range");
  return rc;
}

void RunConfig::write_effective(const fs::path& path) const {
  ensure_dir(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "# identity " << io::hex64(identity_hash()) << '\n' << cfg.dump();
}

// ---- grasp caches ---------------------------------------------------------------

io::Container to_container(const plant::GraspCache& cache, std::uint64_t identity, std::uint64_t plant_hash) {
  io::Container c;
  c.header["kind"] = "grasp_cache";
  c.header["task"] = plant::task_name(cache.task);
  c.header["seed"] = cache.seed;
  c.header["entries"] = cache.entries.size();
  c.header["config_hash"] = io::hex64(identity);
  c.header["plant_hash"] = io::hex64(plant_hash);
  for (const auto& e : cache.entries) {
    io::RecordWriter w;
    w.u64(e.joints.size()).f64s(e.joints).f64(e.theta);
    const auto& m = e.R.matrix;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) w.f64(m(i, j));
    c.records.push_back(w.take());
  }
  io::stamp_created(c.header);
  return c;
}

plant::GraspCache grasp_cache_from_container(const io::Container& c) {
  if (c.header.value("kind", "") != "grasp_cache") throw io::CorruptContainer("container is not a grasp cache");
  plant::GraspCache cache;
  cache.task = plant::parse_task(c.header.at("task"));
  cache.seed = c.header.at("seed");
  for (const auto& r : c.records) {
    io::RecordReader rd(r);
    plant::GraspEntry e;
    e.joints = rd.f64s(rd.u64());
    e.theta = rd.f64();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) e.R.matrix(i, j) = rd.f64();
    if (!rd.done()) throw io::CorruptContainer("grasp record has trailing bytes");
    cache.entries.push_back(std::move(e));
  }
  if (cache.entries.size() != c.header.at("entries").get<std::size_t>()) {
    throw io::CorruptContainer("grasp cache entry count does not match the header");
  }
  return cache;
}

std::uint64_t identity_of(const io::Container& c) { return parse_hex(c.header.at("config_hash")); }

// ---- names ----------------------------------------------------------------------

Algo parse_algo(const std::string& s) {
  if (s == "aac") return Algo::Aac;
  if (s == "rma1") return Algo::Rma1;
  if (s == "rma2") return Algo::Rma2;
  throw ConfigError("unknown training algorithm '" + s + "' (aac | rma1 | rma2)");
}

std::string algo_name(Algo a) {
  switch (a) {
    case Algo::Aac: return "aac";
    case Algo::Rma1: return "rma1";
    case Algo::Rma2: return "rma2";
  }
  return "?";
}

policy::ObsView parse_obs(const std::string& s) {
  if (s == "proprio") return policy::ObsView::Proprio;
  if (s == "proprio+pose") return policy::ObsView::ProprioPose;
  if (s == "oracle") return policy::ObsView::Privileged;
  throw ConfigError("unknown observation set '" + s + "' (proprio | proprio+pose | oracle)");
}

std::string obs_name(policy::ObsView v) {
  switch (v) {
    case policy::ObsView::Proprio: return "proprio";
    case policy::ObsView::ProprioPose: return "proprio+pose";
    case policy::ObsView::Privileged: return "oracle";
    case policy::ObsView::Tactile: return "tactile";
  }
  return "?";
}

// ---- loading --------------------------------------------------------------------

rl::Checkpoint load_checked(const RunConfig& rc, const fs::path& path) {
  rl::Checkpoint ck = rl::load_checkpoint(path);
  check_identity(rc, ck.config_hash, path);
  if (ck.net.task != rc.task) {
    throw rl::TaskMismatch(path.string() + " holds a " + plant::task_name(ck.net.task) + " policy, run is " +
                           plant::task_name(rc.task));
  }
  return ck;
}

plant::GraspCache load_cache_checked(const RunConfig& rc, const fs::path& path) {
  const io::Container c = io::read_file(path);
  plant::GraspCache cache = grasp_cache_from_container(c);
  check_identity(rc, identity_of(c), path);
  return cache;
}

bool masked(const rl::Checkpoint& ck) { return ck.lineage.value("tag", "") == "masked"; }

// ---- stages ---------------------------------------------------------------------

fs::path cmd_grasp_cache(const RunConfig& rc) {
  ensure_dir(rc.out);
  std::mt19937_64 rng(rc.grasp_seed);
  const plant::GraspCache cache = plant::generate_grasp_cache(rc.train, rng, rc.grasp_n);
  const fs::path path = rc.out / "grasp_cache.ptld";
  io::write_file(path, to_container(cache, rc.identity_hash(), rc.train.hash()));
  rc.write_effective(rc.out / "grasp_cache.config");
  return path;
}

std::vector<fs::path> cmd_train(const RunConfig& rc, const TrainRequest& req) {
  const plant::GraspCache cache = load_cache_checked(rc, req.cache);
  const fs::path dir = rc.out / "train";
  ensure_dir(dir);
  policy::ObsView view = req.obs;
  if (req.algo == Algo::Rma1) view = policy::ObsView::Privileged;
  if (req.algo == Algo::Aac && view == policy::ObsView::Privileged) {
    throw ConfigError("aac trains a deployable actor; use rma1 for the oracle");
  }
  if (req.algo == Algo::Rma2 && view == policy::ObsView::Privileged) {
    throw ConfigError("rma2 distills into a deployable actor; choose proprio or proprio+pose");
  }
  if (req.algo == Algo::Rma2 && req.stage1.empty()) {
    throw policy::IncompatibleCheckpoint("rma2 needs the stage-1 oracle checkpoints (--stage1)");
  }
  const std::string obs_tag = view == policy::ObsView::ProprioPose ? "pose" : obs_name(view);
  const std::string stem = algo_name(req.algo) + "_" + obs_tag;
  rl::TrainSetup setup;
  setup.plant = rc.train;
  setup.net = rc.net;
  setup.ppo = rc.ppo;
  setup.view = view;
  setup.cache = &cache;
  setup.config_text = rc.cfg.dump();
  setup.config_hash = rc.identity_hash();
  std::vector<fs::path> out;
  for (std::uint64_t seed : rc.seeds) {
    setup.nan_dump = dir / (stem + "_" + seed_tag(seed) + ".nan.ptld");
    rl::Checkpoint ck;
    if (req.algo == Algo::Rma2) {
      fs::path p = req.stage1;
      if (fs::is_directory(p)) p = p / ("rma1_oracle_" + seed_tag(seed) + ".ptld");
      if (!fs::exists(p)) throw policy::IncompatibleCheckpoint("stage-1 checkpoint not found: " + p.string());
      const rl::Checkpoint oracle = load_checked(rc, p);
      if (oracle.stage != "rma1") {
        throw policy::IncompatibleCheckpoint(p.string() + " is a '" + oracle.stage + "' checkpoint, rma2 needs rma1");
      }
      rl::Stage2Options opts;
      opts.student_view = view;
      ck = rl::train_rma_stage2(oracle, setup, opts, seed);
    } else {
      ck = rl::train_aac(setup, seed);
    }
    const fs::path path = dir / (stem + "_" + seed_tag(seed) + ".ptld");
    rl::save_checkpoint(path, ck);
    rl::write_curve_csv(dir / (stem + "_" + seed_tag(seed) + ".csv"), ck.curve);
    out.push_back(path);
  }
  rc.write_effective(dir / (stem + ".config"));
  return out;
}

fs::path cmd_collect(const RunConfig& rc, const fs::path& cache_path, const fs::path& teacher_path, int episodes) {
  if (episodes < 1) throw ConfigError("episodes must be positive");
  const plant::GraspCache cache = load_cache_checked(rc, cache_path);
  const rl::Checkpoint teacher = load_checked(rc, teacher_path);
  const fs::path dir = rc.out / "collect";
  ensure_dir(dir);
  distill::CollectOptions co;
  co.episodes = episodes;
  co.seed = teacher.seed * 7919 + 1;
  co.max_steps = rc.distill.max_steps;
  distill::DemoDataset d = distill::deploy_and_collect(rc.deploy, &cache, teacher.net, co);
  d.config_hash = rc.identity_hash();
  const fs::path path = dir / (teacher_path.stem().string() + "_demos.ptld");
  distill::save_dataset(path, d);
  rc.write_effective(dir / (teacher_path.stem().string() + ".config"));
  return path;
}

DistillOutputs cmd_distill(const RunConfig& rc, const fs::path& cache_path, const fs::path& teacher_path,
                           bool mask_tactile) {
  const plant::GraspCache cache = load_cache_checked(rc, cache_path);
  const rl::Checkpoint teacher = load_checked(rc, teacher_path);
  const fs::path dir = rc.out / "distill";
  ensure_dir(dir);
  distill::DistillConfig dc = rc.distill;
  dc.mask_tactile = dc.mask_tactile || mask_tactile;
  distill::DaggerResult r = distill::dagger_iterate(rc.deploy, &cache, teacher.net, dc, teacher.seed * 7 + 1);
  r.dataset.config_hash = rc.identity_hash();
  const std::string stem = teacher_path.stem().string() + (dc.mask_tactile ? "_proprio" : "_tactile");
  DistillOutputs out;
  out.checkpoint = dir / (stem + ".ptld");
  out.dataset = dir / (stem + "_demos.ptld");
  out.rounds_csv = dir / (stem + "_rounds.csv");
  rl::save_checkpoint(out.checkpoint, distill::swap_encoder(teacher, r.encoder, dc.mask_tactile ? "masked" : "tactile"));
  distill::save_dataset(out.dataset, r.dataset);
  distill::write_round_csv(out.rounds_csv, r.rounds);
  Config effective = rc.cfg;
  effective.set("distill.mask_tactile", dc.mask_tactile);
  RunConfig copy = rc;
  copy.cfg = effective;
  copy.write_effective(dir / (stem + ".config"));
  return out;
}

std::vector<eval::MetricReport> cmd_eval(const RunConfig& rc, const fs::path& cache_path,
                                         const std::vector<fs::path>& checkpoints, const std::string& plant_choice) {
  if (checkpoints.empty()) throw ConfigError("eval needs at least one checkpoint");
  if (plant_choice != "auto" && plant_choice != "train" && plant_choice != "deploy") {
    throw ConfigError("unknown plant '" + plant_choice + "' (auto | train | deploy)");
  }
  const plant::GraspCache cache = load_cache_checked(rc, cache_path);
  const fs::path dir = rc.out / "eval";
  ensure_dir(dir);
  std::vector<eval::MetricReport> reports;
  for (const auto& path : checkpoints) {
    const rl::Checkpoint ck = load_checked(rc, path);
    bool deploy = plant_choice == "deploy" || (plant_choice == "auto" && ck.stage == "swap");
    if (ck.stage == "swap" && !deploy) {
      throw policy::IncompatibleCheckpoint(path.string() + " reads tactile input, which only the deployment plant has");
    }
    eval::EvalOptions o = rc.eval;
    o.name = path.stem().string();
    o.lineage_hash = policy::heads_hash(ck.net) ^ ck.net.actor.params.value_hash();
    reports.push_back(eval::eval_policy(ck.net, deploy ? rc.deploy : rc.train, &cache, o, masked(ck)));
    write_report(dir, reports.back());
  }
  bool same_plant = true;
  for (const auto& r : reports) same_plant = same_plant && r.plant_hash == reports.front().plant_hash;
  if (reports.size() > 1 && same_plant) {
    const auto rows = eval::compare_runs(reports);
    eval::write_rank_csv(dir / "compare.csv", rows);
  }
  rc.write_effective(dir / "eval.config");
  return reports;
}

ProbeOutputs cmd_probe(const RunConfig& rc, const fs::path& checkpoint, const fs::path& dataset) {
  const rl::Checkpoint ck = load_checked(rc, checkpoint);
  const distill::DemoDataset d = distill::load_dataset(dataset);
  check_identity(rc, d.config_hash, dataset);
  if (d.plant_hash != rc.deploy.hash()) {
    throw ConfigMismatch(dataset.string() + " was collected on another deployment plant");
  }
  const fs::path dir = rc.out / "probe";
  ensure_dir(dir);
  const eval::LatentDataset lat = eval::latents_of(ck.net.actor, d, masked(ck));
  ProbeOutputs out;
  eval::PoseProbeConfig pc = rc.probe;
  pc.param = eval::PoseParam::Relative;
  out.relative = eval::train_pose_decoder(lat, pc, ck.seed).report;
  pc.param = eval::PoseParam::Absolute;
  out.absolute = eval::train_pose_decoder(lat, pc, ck.seed).report;
  out.slip = eval::slip_probe(lat, ck.seed);
  auto pose_json = [](const eval::PoseProbeReport& r) {
    return json{{"step_error", r.step_error},
                {"cumulative_error", r.cumulative_error},
                {"train_mse", r.train_mse},
                {"windows", r.windows}};
  };
  out.report = dir / (checkpoint.stem().string() + "_probe.json");
  write_json(out.report, {{"checkpoint", checkpoint.string()},
                          {"dataset", dataset.string()},
                          {"horizon", rc.probe.horizon},
                          {"relative", pose_json(out.relative)},
                          {"absolute", pose_json(out.absolute)},
                          {"slip",
                           {{"balanced_accuracy", out.slip.balanced_accuracy},
                            {"train_balanced_accuracy", out.slip.train_balanced_accuracy},
                            {"positives", out.slip.positives},
                            {"negatives", out.slip.negatives}}}});
  rc.write_effective(dir / (checkpoint.stem().string() + ".config"));
  return out;
}

eval::MetricReport read_report(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  eval::MetricReport r;
  r.name = j.at("name");
  r.task = plant::parse_task(j.at("task"));
  r.metrics = j.at("metrics").get<std::vector<std::string>>();
  r.rows = j.at("rows").get<std::vector<std::vector<double>>>();
  r.lineage_hash = parse_hex(j.at("lineage_hash"));
  r.plant_hash = parse_hex(j.at("plant_hash"));
  return r;
}

std::vector<eval::RankRow> cmd_compare(const RunConfig& rc, const std::vector<fs::path>& reports) {
  if (reports.size() < 2) throw ConfigError("compare needs at least two reports");
  std::vector<eval::MetricReport> rs;
  for (const auto& p : reports) rs.push_back(read_report(p));
  const auto rows = eval::compare_runs(rs);
  ensure_dir(rc.out / "eval");
  eval::write_rank_csv(rc.out / "eval" / "compare.csv", rows);
  return rows;
}

}  // namespace ptld::pipeline
