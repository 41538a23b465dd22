#pragma once

// Stage drivers behind the command-line tool. Each stage reads the artifacts of
// the previous one by path and refuses inputs produced under another run identity.

#include "ptld/config.hpp"
#include "ptld/distill.hpp"
#include "ptld/eval.hpp"
#include "ptld/plant.hpp"
#include "ptld/policy.hpp"
#include "ptld/rl.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ptld::pipeline {

namespace fs = std::filesystem;

using eval::ConfigMismatch;

inline constexpr const char* kOutRootEnv = "PTLD_OUT_ROOT";

struct RunConfig {
  Config cfg;  // effective: every key read, defaults included
  plant::Task task = plant::Task::Rotation;
  std::vector<std::uint64_t> seeds{1};
  fs::path out;
  std::size_t grasp_n = 64;
  std::uint64_t grasp_seed = 1;
  plant::PlantParams train;
  plant::PlantParams deploy;
  policy::NetConfig net;
  rl::PPOConfig ppo;
  distill::DistillConfig distill;
  eval::PoseProbeConfig probe;
  eval::EvalOptions eval;
  int eval_seed = 0;

  // Hash over task, both plants, the network shape and the grasp cache recipe.
  // Training, distillation and evaluation settings are left out so that they
  // can change between stages of one run.
  std::uint64_t identity_hash() const;

  // `overrides` win over `base`. The output directory falls back to
  // $PTLD_OUT_ROOT, then ./runs.
  static RunConfig load(const Config& base, const Config& overrides = {});
  void write_effective(const fs::path& path) const;
};

// ---- grasp caches ---------------------------------------------------------------

io::Container to_container(const plant::GraspCache& cache, std::uint64_t identity, std::uint64_t plant_hash);
plant::GraspCache grasp_cache_from_container(const io::Container& c);
std::uint64_t identity_of(const io::Container& c);

// ---- stages ---------------------------------------------------------------------

enum class Algo { Aac, Rma1, Rma2 };
Algo parse_algo(const std::string& s);
std::string algo_name(Algo a);
// proprio | proprio+pose | oracle
policy::ObsView parse_obs(const std::string& s);
std::string obs_name(policy::ObsView v);

fs::path cmd_grasp_cache(const RunConfig& rc);

struct TrainRequest {
  Algo algo = Algo::Aac;
  policy::ObsView obs = policy::ObsView::ProprioPose;
  fs::path cache;
  fs::path stage1;  // rma2 only: directory or file with stage-1 checkpoints
};

// One checkpoint and one curve CSV per seed; returns the checkpoint paths.
std::vector<fs::path> cmd_train(const RunConfig& rc, const TrainRequest& req);

// Teacher-acting deployment demonstrations.
fs::path cmd_collect(const RunConfig& rc, const fs::path& cache, const fs::path& teacher, int episodes);

struct DistillOutputs {
  fs::path checkpoint;  // swapped policy
  fs::path dataset;
  fs::path rounds_csv;
};

DistillOutputs cmd_distill(const RunConfig& rc, const fs::path& cache, const fs::path& teacher, bool mask_tactile);

// Evaluates every checkpoint; writes per-run reports and the comparison table.
std::vector<eval::MetricReport> cmd_eval(const RunConfig& rc, const fs::path& cache,
                                         const std::vector<fs::path>& checkpoints, const std::string& plant_choice);

struct ProbeOutputs {
  eval::PoseProbeReport relative;
  eval::PoseProbeReport absolute;
  eval::LinearProbeResult slip;
  fs::path report;
};

ProbeOutputs cmd_probe(const RunConfig& rc, const fs::path& checkpoint, const fs::path& dataset);

// Ranks previously written report JSON files.
std::vector<eval::RankRow> cmd_compare(const RunConfig& rc, const std::vector<fs::path>& reports);

eval::MetricReport read_report(const fs::path& path);

// Loads a checkpoint and checks it was produced under `rc`'s identity.
rl::Checkpoint load_checked(const RunConfig& rc, const fs::path& path);
plant::GraspCache load_cache_checked(const RunConfig& rc, const fs::path& path);

// Whether a swapped checkpoint's encoder reads masked tactile input.
bool masked(const rl::Checkpoint& ck);

}  // namespace ptld::pipeline
