#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ptld/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace ptld;
using namespace ptld::pipeline;

namespace {

const char* kTiny = R"([run]
task = rotation
seeds = 1
[grasp]
n = 8
[policy]
encoder_hidden = 16
pi_hidden = 16
value_hidden = 16
frames = 2
tc_window_steps = 2
tc_embed = 8
tc_channels = 8
tc_head_hidden = 16
ar_embed = 8
ar_layers = 1
ar_heads = 2
ar_context = 4
ar_modal_hidden = 8
[ppo]
updates = 2
envs = 2
horizon = 8
minibatch = 8
[distill]
dagger_rounds = 2
episodes_per_round = 1
eval_episodes = 1
epochs = 1
max_steps = 12
[eval]
trials = 2
max_steps = 12
[probe]
epochs = 1
horizon = 4
)";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny(const fs::path& out, const std::string& task = "rotation") {
  Config over;
  over.set("run.out", out.string());
  over.set("run.task", task);
  return RunConfig::load(Config::parse_string(kTiny), over);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PTLD_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("run config: overrides, output root and identity") {
  TempDir t("ptld_rc");
  Config over;
  over.set("ppo.lr", 0.002);
  setenv(kOutRootEnv, t.path.c_str(), 1);
  RunConfig rc = RunConfig::load(Config::parse_string(kTiny), over);
  unsetenv(kOutRootEnv);
  CHECK(rc.out == t.path);
  CHECK(rc.ppo.lr == 0.002);
  CHECK(rc.ppo.updates == 2);
  CHECK(rc.cfg.has("ppo.gamma"));
  CHECK(rc.cfg.has("plant.k_n"));

  RunConfig other = tiny(t.path);
  CHECK(other.identity_hash() == rc.identity_hash());  // training settings are not part of the identity
  Config plant;
  plant.set("plant.k_n", 11.0);
  CHECK(RunConfig::load(Config::parse_string(kTiny), plant).identity_hash() != rc.identity_hash());
  Config shape;
  shape.set("policy.frames", 3);
  CHECK(RunConfig::load(Config::parse_string(kTiny), shape).identity_hash() != rc.identity_hash());
  CHECK(tiny(t.path, "reorientation").identity_hash() != rc.identity_hash());

  Config bad;
  bad.set("run.seeds", std::vector<double>{1.5});
  CHECK_THROWS_AS(RunConfig::load(Config::parse_string(kTiny), bad), ConfigError);
  Config bad_task;
  bad_task.set("run.task", "juggling");
  CHECK_THROWS_AS(RunConfig::load(Config::parse_string(kTiny), bad_task), ConfigError);
}

TEST_CASE("grasp cache files are reproducible and validated") {
  TempDir t("ptld_cache");
  const RunConfig rc = tiny(t.path);
  const fs::path p = cmd_grasp_cache(rc);
  const io::Container c1 = io::read_file(p);
  const plant::GraspCache cache = load_cache_checked(rc, p);
  CHECK(cache.entries.size() == 8u);
  CHECK(io::canonical_bytes(to_container(cache, rc.identity_hash(), rc.train.hash())) == io::canonical_bytes(c1));
  cmd_grasp_cache(rc);
  CHECK(io::canonical_bytes(io::read_file(p)) == io::canonical_bytes(c1));
  for (const auto& e : cache.entries) CHECK(plant::grasp_is_stable(rc.train, e, 50));

  io::Container tampered = c1;
  tampered.header["config_hash"] = io::hex64(rc.identity_hash() ^ 1u);
  io::write_file(p, tampered);
  CHECK_THROWS_AS(load_cache_checked(rc, p), ConfigMismatch);

  io::Bytes raw = io::encode(c1);
  raw[12] ^= 0x20;  // inside the header JSON, checksum left stale
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(raw.data()), raw.size());
  CHECK_THROWS_AS(load_cache_checked(rc, p), io::CorruptContainer);
}

TEST_CASE("full recipe from one config, with cross-stage checks") {
  TempDir t("ptld_recipe");
  const RunConfig rc = tiny(t.path);
  const fs::path cache = cmd_grasp_cache(rc);

  TrainRequest req;
  req.cache = cache;
  const auto teacher = cmd_train(rc, req);
  REQUIRE(teacher.size() == 1u);
  {
    std::ifstream csv(t.path / "train" / "aac_pose_s1.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "update,mean_return,L_clip,L_V,L_entropy,L_latent");
  }
  const rl::Checkpoint ck = rl::load_checkpoint(teacher[0]);
  CHECK(ck.stage == "aac");
  CHECK(ck.config_hash == rc.identity_hash());
  CHECK(ck.lineage.contains("actor_view"));
  CHECK(fs::exists(t.path / "train" / "aac_pose.config"));

  // Same config and seed: identical artifact apart from the timestamp.
  const io::Bytes first = io::canonical_bytes(io::read_file(teacher[0]));
  cmd_train(rc, req);
  CHECK(io::canonical_bytes(io::read_file(teacher[0])) == first);

  TrainRequest rma2 = req;
  rma2.algo = Algo::Rma2;
  rma2.obs = policy::ObsView::Proprio;
  CHECK_THROWS_AS(cmd_train(rc, rma2), policy::IncompatibleCheckpoint);
  rma2.stage1 = teacher[0];  // not an oracle
  CHECK_THROWS_AS(cmd_train(rc, rma2), policy::IncompatibleCheckpoint);
  TrainRequest rma1 = req;
  rma1.algo = Algo::Rma1;
  const auto oracle = cmd_train(rc, rma1);
  rma2.stage1 = t.path / "train";
  const auto student = cmd_train(rc, rma2);
  CHECK(rl::load_checkpoint(student[0]).stage == "rma2");

  const fs::path demos = cmd_collect(rc, cache, teacher[0], 2);
  CHECK(distill::load_dataset(demos).episode_count() == 2u);

  const auto tactile = cmd_distill(rc, cache, teacher[0], false);
  const auto proprio = cmd_distill(rc, cache, teacher[0], true);
  const rl::Checkpoint sw = rl::load_checkpoint(tactile.checkpoint);
  CHECK(sw.stage == "swap");
  CHECK_FALSE(masked(sw));
  CHECK(masked(rl::load_checkpoint(proprio.checkpoint)));
  CHECK(policy::heads_hash(sw.net) == policy::heads_hash(ck.net));

  const auto reports = cmd_eval(rc, cache, {tactile.checkpoint, proprio.checkpoint}, "auto");
  CHECK(reports.size() == 2u);
  CHECK(reports[0].trials() == 2u);
  CHECK(fs::exists(t.path / "eval" / "compare.csv"));
  CHECK_THROWS_AS(cmd_eval(rc, cache, {tactile.checkpoint}, "train"), policy::IncompatibleCheckpoint);

  const auto again = read_report(t.path / "eval" / (tactile.checkpoint.stem().string() + ".json"));
  CHECK(again.rows == reports[0].rows);
  CHECK(again.plant_hash == reports[0].plant_hash);
  const auto ranks = cmd_compare(rc, {t.path / "eval" / (tactile.checkpoint.stem().string() + ".json"),
                                      t.path / "eval" / (proprio.checkpoint.stem().string() + ".json")});
  CHECK(ranks.size() == 2 * reports[0].metrics.size());

  const auto probe = cmd_probe(rc, tactile.checkpoint, tactile.dataset);
  CHECK(fs::exists(probe.report));
  CHECK(probe.slip.balanced_accuracy >= 0.0);
  CHECK(probe.slip.balanced_accuracy <= 1.0);

  // A run with another plant refuses every artifact of this one.
  Config other;
  other.set("run.out", t.path.string());
  other.set("plant.k_n", 12.0);
  const RunConfig foreign = RunConfig::load(Config::parse_string(kTiny), other);
  CHECK_THROWS_AS(load_checked(foreign, teacher[0]), ConfigMismatch);
  CHECK_THROWS_AS(cmd_train(foreign, req), ConfigMismatch);
  CHECK_THROWS_AS(cmd_probe(foreign, tactile.checkpoint, tactile.dataset), ConfigMismatch);
  CHECK_THROWS_AS(load_checked(tiny(t.path, "reorientation"), teacher[0]), ConfigMismatch);
}

TEST_CASE("command line exit codes") {
  TempDir t("ptld_cli");
  const fs::path cfg = t.path / "exp.ini";
  std::ofstream(cfg) << kTiny;
  const std::string base = "-c " + cfg.string() + " -o " + (t.path / "out").string();
  const std::string cache = (t.path / "out" / "grasp_cache.ptld").string();

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("grasp-cache " + base) == 0);
  CHECK(fs::exists(cache));
  CHECK(fs::exists(t.path / "out" / "grasp_cache.config"));
  CHECK(run_cli("grasp-cache " + base + " --set ppo.lr=-1") == 2);
  CHECK(run_cli("grasp-cache " + base + " --set broken") == 2);
  CHECK(run_cli("grasp-cache -c " + cfg.string() + " -o " + (t.path / "hostile").string() +
                " --set plant.mu_min=0 --set plant.mu_max=0") == 1);
  CHECK(run_cli("train aac --obs proprio+pose --cache " + cache + " " + base) == 0);
  CHECK(run_cli("train rma2 --obs proprio --cache " + cache + " " + base) == 3);
  CHECK(run_cli("train aac --cache " + cache + " " + base + " --set ppo.lr=1e200 --set ppo.max_grad_norm=1e300") == 4);
  CHECK(fs::exists(t.path / "out" / "train" / "aac_pose_s1.nan.ptld"));
  CHECK(run_cli("train aac --obs sonar --cache " + cache + " " + base) == 2);
  CHECK(run_cli("train aac --cache " + cache + " " + base + " --set policy.frames=3") == 3);
  const std::string teacher = (t.path / "out" / "train" / "aac_pose_s1.ptld").string();
  CHECK(run_cli("distill --mask-tactile --cache " + cache + " --teacher " + teacher + " " + base) == 0);
  CHECK(fs::exists(t.path / "out" / "distill" / "aac_pose_s1_proprio.ptld"));
  CHECK(run_cli("eval --cache " + cache + " " + teacher + " " + base) == 0);
}
