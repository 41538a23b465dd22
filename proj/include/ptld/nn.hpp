#pragma once

// Layer specifications, parameter initialization and forward passes built on
// the tape in autodiff.hpp.

#include "ptld/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace ptld::nn {

enum class Activation { None, Elu, Gelu, Tanh, Relu };

struct Linear {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::Elu;
  double init_scale = 1.0;  // multiplies the uniform init bound
};

// Operates on rows laid out as [B*T, channels]; see ad::conv1d.
struct TemporalConv1D {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool causal = true;
  Activation act = Activation::Elu;
};

// Pre-norm transformer block: x + MHA(LN(x)); x + FF(LN(x)).
struct CausalAttentionBlock {
  std::size_t embed_dim = 0;
  std::size_t heads = 1;
  std::size_t feedforward_dim = 0;
};

struct LayerNorm {
  std::size_t dim = 0;
};

// [B*T, C] -> [B, T*C]
struct Flatten {};

using Layer = std::variant<Linear, TemporalConv1D, CausalAttentionBlock, LayerNorm, Flatten>;

struct NetworkSpec {
  std::string name;
  std::vector<Layer> layers;
  std::size_t seq_len = 1;  // time steps per sample for sequence layers

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  // Throws ad::ShapeMismatch when adjacent layers disagree.
  void validate() const;
  std::string describe() const;
  std::uint64_t hash() const;
};

NetworkSpec mlp(std::string name, std::size_t in, const std::vector<std::size_t>& hidden,
                std::size_t out, Activation hidden_act, Activation out_act,
                double out_init_scale = 1.0);

// Parameters are named "<prefix><layer index>.<field>".
void init_params(const NetworkSpec& spec, ad::ParamSet& params, std::mt19937_64& rng,
                 const std::string& prefix = "");
ad::ParamSet init_params(const NetworkSpec& spec, std::mt19937_64& rng, const std::string& prefix = "");

ad::Var apply_activation(ad::Var x, Activation act);

// Input shape: [B*seq_len, input_dim] for sequence specs, [B, input_dim] otherwise.
ad::Var forward(const NetworkSpec& spec, const ad::ParamSet& params, ad::Var input, ad::Tape& tape,
                const std::string& prefix = "");

// Convenience inference pass on a fresh tape.
ad::Tensor infer(const NetworkSpec& spec, const ad::ParamSet& params, const ad::Tensor& input,
                 const std::string& prefix = "");

ad::Var linear(ad::Tape& tape, const ad::ParamSet& params, const std::string& name, ad::Var x);

using LossFn = std::function<ad::Var(ad::Var output)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares tape gradients with central differences (step h) on up to
// `max_checks` randomly chosen parameter entries.
GradCheckResult grad_check(const NetworkSpec& spec, ad::ParamSet& params, const ad::Tensor& input,
                           const LossFn& loss_fn, std::mt19937_64& rng, std::size_t max_checks = 200,
                           double h = 1e-5);

// Same harness for an arbitrary closure over one ParamSet.
GradCheckResult grad_check_fn(ad::ParamSet& params,
                              const std::function<ad::Var(ad::Tape&, ad::ParamSet&)>& loss,
                              std::mt19937_64& rng, std::size_t max_checks = 200, double h = 1e-5);

}  // namespace ptld::nn
