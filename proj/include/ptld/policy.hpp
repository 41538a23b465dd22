#pragma once

// Network assemblies: actor encoder E, privileged encoder Ê, Gaussian policy
// head π and value head V. Also the per-plant observation assembly that turns
// a stream of ObservationBundles into encoder inputs (frame stack, tactile
// window, autoregressive history).

#include "ptld/autodiff.hpp"
#include "ptld/config.hpp"
#include "ptld/container.hpp"
#include "ptld/nn.hpp"
#include "ptld/plant.hpp"

#include <json.hpp>

#include <deque>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::policy {

using ad::ShapeMismatch;

class WindowTooShort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ContextOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IncompatibleCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// What the actor encoder reads.
enum class ObsView { Proprio, ProprioPose, Privileged, Tactile };
enum class EncoderKind { Mlp, TemporalConv, Transformer };

std::string view_name(ObsView v);
ObsView parse_view(const std::string& s);
std::string kind_name(EncoderKind k);
EncoderKind parse_kind(const std::string& s);

struct NetConfig {
  std::size_t latent_dim = 8;
  std::vector<std::size_t> encoder_hidden{256, 128};
  std::vector<std::size_t> pi_hidden{128, 64};
  std::vector<std::size_t> value_hidden{256, 128};
  std::size_t frames = 30;
  double log_std_init = -0.5;

  std::size_t tc_window_steps = 10;  // control steps of tactile frames
  std::size_t tc_embed = 32;
  std::vector<std::size_t> tc_channels{32, 32};
  std::size_t tc_kernel = 3;
  std::size_t tc_stride = 2;
  std::vector<std::size_t> tc_head_hidden{128};

  std::size_t ar_embed = 64;
  std::size_t ar_layers = 2;
  std::size_t ar_heads = 4;
  std::size_t ar_context = 32;
  std::size_t ar_modal_hidden = 64;

  static NetConfig from_config(Config& cfg, const std::string& section = "policy");
  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
};

struct EncoderLayout {
  EncoderKind kind = EncoderKind::Mlp;
  ObsView view = ObsView::Proprio;
  std::size_t frame_dim = 0;  // per-step vector fed through the frame stack
  std::size_t frames = 1;
  std::size_t taxels = 0;
  std::size_t window_frames = 0;  // tactile frames per window (tc)
  std::size_t substeps = 0;       // tactile frames per control step
  std::size_t proprio_dim = 0;    // ar token parts
  std::size_t goal_dim = 0;
  std::size_t context = 0;
  std::size_t latent_dim = 8;

  std::size_t tactile_channels() const { return taxels * 6; }
  std::size_t tactile_step_dim() const { return substeps * taxels * 3; }
  std::size_t token_dim() const { return tactile_step_dim() + proprio_dim + goal_dim + latent_dim; }
  nlohmann::json to_json() const;
  static EncoderLayout from_json(const nlohmann::json& j);
  bool operator==(const EncoderLayout&) const = default;
};

// One sample for an Mlp or TemporalConv encoder; for a Transformer encoder
// `flat` holds T tokens of token_dim each.
struct EncoderInput {
  std::vector<double> flat;
  std::vector<double> tactile;  // window_frames x tactile_channels
};

class Encoder {
 public:
  EncoderLayout layout;
  NetConfig net;
  nn::NetworkSpec body;
  nn::NetworkSpec head;
  std::vector<nn::NetworkSpec> embedders;  // tactile, proprio, goal, latent
  ad::ParamSet params;

  static Encoder build(const EncoderLayout& layout, const NetConfig& net, std::mt19937_64& rng);
  // Specs only; parameters are attached by the caller.
  static Encoder skeleton(const EncoderLayout& layout, const NetConfig& net);

  // Mlp / TemporalConv: [B, latent]. Transformer: latent read at each
  // sequence's last token, [B, latent].
  ad::Var forward(ad::Tape& tape, std::span<const EncoderInput* const> batch) const;
  // Transformer only: tokens [B*T, token_dim] -> predictions at every position [B*T, latent].
  ad::Var forward_all(ad::Tape& tape, ad::Var tokens, std::size_t seq_len) const;
  std::vector<double> encode(const EncoderInput& in) const;
  std::uint64_t spec_hash() const;
  nlohmann::json describe() const;
};

// Single-call helpers mirroring the encoder contracts.
std::vector<double> encode_tactile_tc(const Encoder& enc, std::span<const double> tactile_window,
                                      std::span<const double> taxel_positions,
                                      std::span<const double> proprio_stack);

struct ArToken {
  std::vector<double> tactile;  // substeps x taxels x 3
  std::vector<double> proprio;
  std::vector<double> goal;
  std::vector<double> z_prev;
};

class ArHistory {
 public:
  explicit ArHistory(std::size_t context) : context_(context) {}
  void append(ArToken token);
  // Drops the oldest token when full.
  void push_sliding(ArToken token);
  std::size_t size() const { return tokens_.size(); }
  std::size_t context() const { return context_; }
  const std::deque<ArToken>& tokens() const { return tokens_; }
  void clear() { tokens_.clear(); }

 private:
  std::size_t context_;
  std::deque<ArToken> tokens_;
};

std::vector<double> flatten_token(const EncoderLayout& layout, const ArToken& t);
std::vector<double> encode_tactile_ar(const Encoder& enc, const ArHistory& history);

struct PolicyNet {
  plant::Task task = plant::Task::Rotation;
  NetConfig net;
  std::size_t action_dim = 0;
  Encoder actor;
  Encoder critic;
  nn::NetworkSpec pi_spec;
  nn::NetworkSpec v_spec;
  ad::ParamSet pi;  // includes "log_std" [1, action_dim]
  ad::ParamSet value;

  std::size_t latent_dim() const { return net.latent_dim; }
};

EncoderLayout layout_for(const plant::PlantParams& params, ObsView view, EncoderKind kind,
                         const NetConfig& net);
PolicyNet make_policy(const plant::PlantParams& params, ObsView actor_view, const NetConfig& net,
                      std::uint64_t seed);

enum class Mode { Stochastic, Deterministic };

struct ActResult {
  std::vector<double> action;
  std::vector<double> mean;
  std::vector<double> latent;
  double log_prob = 0.0;
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

std::vector<double> clamped_log_std(const PolicyNet& net);
double gaussian_log_prob(std::span<const double> mean, std::span<const double> log_std,
                         std::span<const double> action);

ActResult act(const PolicyNet& net, const EncoderInput& in, Mode mode, std::mt19937_64& rng);
std::vector<ActResult> act_batch(const PolicyNet& net, std::span<const EncoderInput* const> batch,
                                 Mode mode, std::mt19937_64& rng);
// Policy head on given latents, deterministic mean actions [B, A].
ad::Var policy_mean(ad::Tape& tape, const PolicyNet& net, ad::Var latent);
std::vector<double> action_from_latent(const PolicyNet& net, std::span<const double> latent);
std::vector<double> encode_privileged(const PolicyNet& net, std::span<const double> priv);

// Fixed-length stack of the k most recent frames, oldest first.
class FrameStack {
 public:
  FrameStack(std::size_t frames, std::size_t frame_dim) : k_(frames), dim_(frame_dim) {}
  // The first push after construction or reset fills the whole stack.
  void push(std::span<const double> frame);
  void reset() { buf_.clear(); }
  std::vector<double> window() const;
  std::size_t frames() const { return k_; }
  bool empty() const { return buf_.empty(); }

 private:
  std::size_t k_;
  std::size_t dim_;
  std::deque<std::vector<double>> buf_;
};

std::vector<double> frame_of(ObsView view, const plant::ObservationBundle& obs,
                             std::span<const double> prev_action);

// Per-plant input builder for one encoder layout.
class ObsAssembler {
 public:
  ObsAssembler(const EncoderLayout& layout, bool mask_tactile = false);
  void reset(const plant::ObservationBundle& first, std::size_t action_dim);
  void push(const plant::ObservationBundle& obs, std::span<const double> prev_action);
  // Transformer encoders: latent produced for the current step.
  void set_latent(std::span<const double> z);
  EncoderInput input() const;
  const EncoderLayout& layout() const { return layout_; }

 private:
  void push_tactile(const plant::ObservationBundle& obs);
  EncoderLayout layout_;
  bool mask_;
  FrameStack stack_;
  std::deque<std::vector<double>> tactile_;
  ArHistory history_;
  std::vector<double> z_prev_;
};

// Runs a PolicyNet step by step on one plant.
class Agent {
 public:
  Agent(const PolicyNet& net, Mode mode, std::uint64_t seed, bool mask_tactile = false);
  void reset(const plant::ObservationBundle& first);
  // Consumes the observation of the current step and returns the action.
  ActResult step(const plant::ObservationBundle& obs);
  const PolicyNet& net() const { return *net_; }

 private:
  const PolicyNet* net_;
  Mode mode_;
  std::mt19937_64 rng_;
  ObsAssembler assembler_;
  std::vector<double> prev_action_;
  bool fresh_ = true;
};

// Checkpoint plumbing: header keys "policy" and param groups actor/critic/pi/value.
void write_policy(io::Container& c, const PolicyNet& net);
PolicyNet read_policy(const io::Container& c);
std::uint64_t heads_hash(const PolicyNet& net);

}  // namespace ptld::policy
