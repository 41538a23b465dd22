#pragma once

// Deployment-side distillation: run a pose-reading policy on the deployment
// plant, record paired (tactile, proprio, goal, latent) demonstrations, fit a
// tactile encoder offline with MSE, refine it with DAgger and swap it into the
// policy.

#include "ptld/config.hpp"
#include "ptld/container.hpp"
#include "ptld/plant.hpp"
#include "ptld/policy.hpp"
#include "ptld/rl.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::distill {

class EmptyDataset : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class LatentDimMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Acting { Privileged, Student };

struct DemoRecord {
  std::uint64_t episode = 0;
  std::uint64_t step = 0;
  std::uint64_t generation = 0;  // 0: pose-reading encoder acted; r: student fitted after round r-1
  std::vector<double> tactile;    // substeps x taxels x 3
  std::vector<double> taxel_pos;  // taxels x 3
  std::vector<double> proprio;
  std::vector<double> goal;
  std::vector<double> pose;  // noisy pose as delivered to the policy
  std::vector<double> prev_action;
  std::vector<double> action;
  std::vector<double> z_hat;      // supervision latent
  std::vector<double> z_student;  // acting student's latent, zeros when absent
  bool has_student = false;
  // Plant truth, never shown to any encoder.
  std::vector<double> true_rot6d;
  std::vector<double> slip;  // per finger
  bool dropped = false;

  plant::ObservationBundle observation() const;
  // Latent fed back to an autoregressive student on the next step.
  const std::vector<double>& conditioning_latent() const { return has_student ? z_student : z_hat; }
};

struct DatasetDims {
  std::size_t tactile = 0;
  std::size_t taxel_pos = 0;
  std::size_t proprio = 0;
  std::size_t goal = 0;
  std::size_t pose = 0;
  std::size_t action = 0;
  std::size_t latent = 0;
  std::size_t fingers = 0;

  static DatasetDims of(const plant::PlantParams& params, std::size_t latent_dim);
  nlohmann::json to_json() const;
  static DatasetDims from_json(const nlohmann::json& j);
  bool operator==(const DatasetDims&) const = default;
};

struct RoundInfo {
  std::size_t round = 0;
  std::size_t begin = 0;
  std::size_t count = 0;
};

struct Episode {
  std::size_t begin = 0;
  std::size_t length = 0;
};

class DemoDataset {
 public:
  plant::Task task = plant::Task::Rotation;
  DatasetDims dims;
  std::uint64_t plant_hash = 0;
  std::uint64_t policy_hash = 0;
  std::uint64_t config_hash = 0;
  std::vector<RoundInfo> rounds;
  std::vector<DemoRecord> records;

  // Appends another dataset as a new round; episode ids are renumbered to stay unique.
  void append_round(const DemoDataset& other);
  void check_record(const DemoRecord& r) const;
  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::size_t episode_count() const;
  // Contiguous runs of records sharing an episode id, in order.
  std::vector<Episode> episodes() const;
};

io::Container to_container(const DemoDataset& d);
DemoDataset from_container(const io::Container& c);
void save_dataset(const std::filesystem::path& path, const DemoDataset& d);
DemoDataset load_dataset(const std::filesystem::path& path);

struct DistillConfig {
  int dagger_rounds = 3;
  int episodes_per_round = 20;
  int eval_episodes = 5;  // closed-loop evaluation after each round
  int epochs = 20;
  std::size_t minibatch = 64;
  double lr = 1e-4;
  std::string encoder = "";  // tc | ar, empty picks the task default
  bool mask_tactile = false;
  int max_steps = 0;  // per collected episode; 0 keeps the plant's limit

  static DistillConfig from_config(Config& cfg, const std::string& section = "distill");
  void validate() const;
};

// Student encoder layout on the deployment plant, latent dims from `teacher`.
policy::EncoderLayout student_layout(const plant::PlantParams& deploy, const policy::PolicyNet& teacher,
                                     const DistillConfig& cfg);

struct CollectOptions {
  int episodes = 1;
  std::uint64_t seed = 0;
  Acting acting = Acting::Privileged;
  const policy::Encoder* student = nullptr;  // required when acting = Student
  bool mask_tactile = false;
  std::uint64_t generation = 0;
  int max_steps = 0;
};

// Every control step of every episode yields one record. z_hat always comes
// from the teacher's actor encoder on the noisy-pose stream.
DemoDataset deploy_and_collect(const plant::PlantParams& deploy, const plant::GraspCache* cache,
                               const policy::PolicyNet& teacher, const CollectOptions& opts);

// Encoder input of record `t` inside episode `ep`, built from the recorded
// streams exactly as an ObsAssembler would during deployment. Transformer
// histories are teacher-forced with the recorded z_hat.
policy::EncoderInput student_input(const policy::EncoderLayout& layout, const DemoDataset& d, const Episode& ep,
                                   std::size_t t, bool mask_tactile);

struct FitCurveRow {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct FitResult {
  policy::Encoder encoder;
  std::vector<FitCurveRow> curve;
};

FitResult fit_tactile_encoder(const DemoDataset& d, const policy::EncoderLayout& layout, const policy::NetConfig& net,
                              const DistillConfig& cfg, std::uint64_t seed,
                              const policy::Encoder* warm_start = nullptr);

// Mean ||z_student - z_hat||^2 over records collected with a student acting.
double closed_loop_mse(const DemoDataset& d);

struct RoundReport {
  int round = 0;
  std::size_t records = 0;
  std::size_t aggregate = 0;
  double val_mse = 0.0;
  double closed_loop_mse = 0.0;
  double mean_episode_length = 0.0;
};

struct DaggerResult {
  policy::Encoder encoder;
  DemoDataset dataset;
  std::vector<RoundReport> rounds;
};

// Round 0 collects with the teacher acting; later rounds with the current
// student. The encoder is refit on the aggregate after every round and
// evaluated closed-loop on a fixed set of episodes.
DaggerResult dagger_iterate(const plant::PlantParams& deploy, const plant::GraspCache* cache,
                            const policy::PolicyNet& teacher, const DistillConfig& cfg, std::uint64_t seed);

void write_round_csv(const std::filesystem::path& path, const std::vector<RoundReport>& rounds);

// Replaces the actor encoder; pi and V stay byte-identical.
rl::Checkpoint swap_encoder(const rl::Checkpoint& policy, const policy::Encoder& encoder, const std::string& tag = "");

}  // namespace ptld::distill
