#pragma once

// Task metrics, run comparison and latent probes (pose decoder, linear slip probe).

#include "ptld/distill.hpp"
#include "ptld/plant.hpp"
#include "ptld/policy.hpp"
#include "ptld/rotmath.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::eval {

using rl::TaskMismatch;

class MissingGroundTruth : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Anything that maps observations to actions step by step.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual void reset(const plant::ObservationBundle& first) = 0;
  virtual std::vector<double> act(const plant::ObservationBundle& obs, int step) = 0;
};

class AgentController : public Controller {
 public:
  AgentController(const policy::PolicyNet& net, bool mask_tactile = false)
      : agent_(net, policy::Mode::Deterministic, 0, mask_tactile) {}
  void reset(const plant::ObservationBundle& first) override { agent_.reset(first); }
  std::vector<double> act(const plant::ObservationBundle& obs, int) override { return agent_.step(obs).action; }

 private:
  policy::Agent agent_;
};

struct MetricReport {
  std::string name;
  plant::Task task = plant::Task::Rotation;
  std::vector<std::string> metrics;
  std::vector<std::vector<double>> rows;  // per trial, aligned with `metrics`
  std::uint64_t lineage_hash = 0;
  std::uint64_t plant_hash = 0;

  std::size_t trials() const { return rows.size(); }
  std::size_t index(const std::string& metric) const;
  double mean(const std::string& metric) const;
  double std(const std::string& metric) const;  // population standard deviation
  double value(std::size_t trial, const std::string& metric) const { return rows.at(trial).at(index(metric)); }

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
  void write_jsonl(const std::filesystem::path& path) const;
  // Long format: run,trial,metric,value
  void write_long_csv(const std::filesystem::path& path) const;
};

// Per-step accumulation of the rotation metrics.
struct RotationTally {
  double rot_r = 0.0;
  double rot_p = 0.0;
  int steps = 0;
  int drop_step = -1;

  void step(double omega_z, double planar_displacement, double dt, bool dropped);
  // Fraction of the episode completed before a drop.
  double ttf(int max_steps) const;
};

struct EvalOptions {
  int trials = 10;
  std::uint64_t seed = 0;
  bool relaxed_goal = false;  // success threshold of 30 degrees
  int max_steps = 0;          // 0 keeps the plant's limit
  std::string name;
  std::uint64_t lineage_hash = 0;
};

inline constexpr double kRelaxedGoalTolerance = rotmath::deg2rad(30.0);

// Metrics: RotR, TTF, RotP, TotalRotation, VerticalDrift
MetricReport eval_rotation(Controller& ctrl, const plant::PlantParams& params, const plant::GraspCache* cache,
                           const EvalOptions& opts);
// Metrics: N_goals, TTF (seconds)
MetricReport eval_reorientation(Controller& ctrl, const plant::PlantParams& params, const plant::GraspCache* cache,
                                const EvalOptions& opts);
// Dispatches on the plant's task; checks the policy's task.
MetricReport eval_policy(const policy::PolicyNet& net, const plant::PlantParams& params,
                         const plant::GraspCache* cache, const EvalOptions& opts, bool mask_tactile = false);

bool lower_is_better(const std::string& metric);

struct RankRow {
  std::string metric;
  int rank = 0;
  std::string run;
  double mean = 0.0;
  double std = 0.0;
};

std::vector<RankRow> compare_runs(const std::vector<MetricReport>& reports);
void write_rank_csv(const std::filesystem::path& path, const std::vector<RankRow>& rows);
std::string format_rank_table(const std::vector<RankRow>& rows);

// ---- probes ---------------------------------------------------------------------

struct LatentDataset {
  std::vector<std::vector<double>> latents;
  std::vector<rotmath::Rot6D> truth;  // plant rotation per step
  std::vector<double> slip;           // 1 when any finger slips
  std::vector<distill::Episode> episodes;
};

// Frozen encoder applied to every recorded step.
LatentDataset latents_of(const policy::Encoder& enc, const distill::DemoDataset& d, bool mask_tactile);

enum class PoseParam { Absolute, Relative };

struct PoseProbeConfig {
  PoseParam param = PoseParam::Relative;
  int H = 1;
  std::vector<std::size_t> hidden{64, 64};
  int horizon = 30;
  int epochs = 200;
  std::size_t minibatch = 128;
  double lr = 1e-3;
  double val_fraction = 0.2;
};

struct PoseProbeReport {
  double step_error = 0.0;        // mean geodesic error per prediction, held out
  double cumulative_error = 0.0;  // mean geodesic error over the horizon, held out
  double train_mse = 0.0;
  std::size_t windows = 0;
};

struct PoseDecoder {
  nn::NetworkSpec spec;
  ad::ParamSet params;
  rotmath::Rotation predict(std::span<const double> latent) const;
};

// Target of step t, or nothing when t < H in the relative parameterization.
std::optional<rotmath::Rotation> pose_target(const LatentDataset& d, const distill::Episode& ep, std::size_t t,
                                             const PoseProbeConfig& cfg);

// Geodesic distance between the composed predicted and true increments over
// non-overlapping windows of `horizon` steps; increments are spaced H apart.
double composed_error(const std::vector<rotmath::Rotation>& predicted, const std::vector<rotmath::Rotation>& truth);

struct PoseProbeResult {
  PoseDecoder decoder;
  PoseProbeReport report;
};

PoseProbeResult train_pose_decoder(const LatentDataset& d, const PoseProbeConfig& cfg, std::uint64_t seed);

struct LinearProbeResult {
  double balanced_accuracy = 0.0;  // held-out episodes
  double train_balanced_accuracy = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Class-balanced logistic regression on standardized latents, split by episode.
LinearProbeResult slip_probe(const LatentDataset& d, std::uint64_t seed, double val_fraction = 0.3, int epochs = 300);

double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace ptld::eval
