#pragma once

// PPO (clipped surrogate) with an asymmetric actor-critic and the online latent
// distillation term, plus the two-stage RMA baseline.
//
//   total = L_clip + c_V * L_V + L_entropy + c_latent * L_latent
//   L_latent = mean_b || E(x_sensor) - sg(Ê(x_priv)) ||^2

#include "ptld/config.hpp"
#include "ptld/container.hpp"
#include "ptld/plant.hpp"
#include "ptld/policy.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::rl {

class NaNLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TaskMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PPOConfig {
  double clip_eps = 0.2;
  double c_V = 0.5;
  double c_entropy = 0.005;
  double c_latent = 1.0;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int epochs = 4;
  std::size_t minibatch = 256;
  int horizon = 32;
  int envs = 16;
  int updates = 2000;
  double lr = 3e-4;
  double max_grad_norm = 1.0;
  double reward_scale = 1.0;  // applied to rewards before GAE

  static PPOConfig from_config(Config& cfg, const std::string& section = "ppo");
  void validate() const;
};

struct RolloutBuffer {
  std::size_t horizon = 0;
  std::size_t envs = 0;
  // Step-major: index = t * envs + e.
  std::vector<policy::EncoderInput> obs;
  std::vector<std::vector<double>> priv;
  std::vector<std::vector<double>> actions;
  std::vector<std::vector<double>> z;
  std::vector<std::vector<double>> zhat;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> dones;
  std::vector<double> last_values;  // bootstrap value per env after the last step
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> completed_returns;  // unscaled episodic returns finished during collection

  std::size_t size() const { return rewards.size(); }
  void validate() const;
};

// B plants sharing params, each with its own observation assembler.
class VecEnv {
 public:
  VecEnv(const plant::PlantParams& params, const plant::GraspCache* cache, std::size_t n, std::uint64_t seed,
         const policy::EncoderLayout& actor_layout, bool mask_tactile = false);
  std::size_t size() const { return envs_.size(); }
  const plant::PlantParams& params() const { return envs_.front().params(); }

  std::vector<plant::Env> envs_;
  std::vector<plant::ObservationBundle> obs_;
  std::vector<policy::ObsAssembler> assemblers_;
  std::vector<double> running_return_;
};

RolloutBuffer collect_rollouts(VecEnv& envs, const policy::PolicyNet& net, int horizon, std::mt19937_64& rng,
                               double reward_scale = 1.0);

// Fills buffer.advantages (normalized) and buffer.returns (unnormalized targets).
void gae_advantages(RolloutBuffer& buffer, double gamma, double lambda, bool normalize = true);

struct LossReport {
  double L_clip = 0.0;
  double L_V = 0.0;
  double L_entropy = 0.0;
  double L_latent = 0.0;
  double total = 0.0;
};

struct LossVars {
  ad::Var clip, value, entropy, latent, total;
};

// Loss graph over the buffer entries `idx`; all four terms share one tape.
LossVars ppo_loss(ad::Tape& tape, const policy::PolicyNet& net, const RolloutBuffer& buffer,
                  std::span<const std::size_t> idx, const PPOConfig& cfg);

LossReport ppo_update(policy::PolicyNet& net, const RolloutBuffer& buffer, const PPOConfig& cfg,
                      std::mt19937_64& rng);

struct CurveRow {
  int update = 0;
  double mean_return = 0.0;
  double L_clip = 0.0;
  double L_V = 0.0;
  double L_entropy = 0.0;
  double L_latent = 0.0;
};

struct Checkpoint {
  std::string stage;  // aac | rma1 | rma2 | swap
  policy::PolicyNet net;
  std::vector<CurveRow> curve;
  std::string config_text;  // effective config dump
  std::uint64_t config_hash = 0;
  std::uint64_t env_steps = 0;
  std::uint64_t seed = 0;
  nlohmann::json lineage = nlohmann::json::object();
};

io::Container to_container(const Checkpoint& ck);
Checkpoint from_container(const io::Container& c);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);
void write_curve_csv(const std::filesystem::path& path, const std::vector<CurveRow>& curve);

struct TrainSetup {
  plant::PlantParams plant;
  policy::NetConfig net;
  PPOConfig ppo;
  policy::ObsView view = policy::ObsView::ProprioPose;
  const plant::GraspCache* cache = nullptr;
  std::string config_text;
  std::uint64_t config_hash = 0;
  // Called after every update with the 1-based update index.
  std::function<void(int, const policy::PolicyNet&)> on_update;
  // Where to leave the last finite checkpoint when a loss goes non-finite.
  std::filesystem::path nan_dump;
};

Checkpoint train_aac(const TrainSetup& setup, std::uint64_t seed);
// Actor encoder reads the privileged observation directly.
Checkpoint train_rma_stage1(TrainSetup setup, std::uint64_t seed);

enum class ImitationLoss { Latent, Action };

struct Stage2Options {
  policy::ObsView student_view = policy::ObsView::Proprio;
  ImitationLoss loss = ImitationLoss::Latent;
};

// Student encoder trained on its own rollouts against the frozen oracle
// encoder; π, V and Ê are copied from the oracle untouched.
Checkpoint train_rma_stage2(const Checkpoint& oracle, TrainSetup setup, const Stage2Options& opts,
                            std::uint64_t seed);

// Imitation loss of a student encoder on buffer entries (oracle inputs are the
// privileged observations).
ad::Var imitation_loss(ad::Tape& tape, const policy::PolicyNet& student, const policy::PolicyNet& oracle,
                       const RolloutBuffer& buffer, std::span<const std::size_t> idx, ImitationLoss kind);

}  // namespace ptld::rl
