#include "ptld/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ptld::nn {

namespace {

using ad::ShapeMismatch;
using ad::Tensor;
using ad::Var;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

const char* act_name(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::Elu: return "elu";
    case Activation::Gelu: return "gelu";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
  }
  return "?";
}

Tensor uniform(std::vector<std::size_t> shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape), 0.0);
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.data) v = u(rng);
  return t;
}

std::string key(const std::string& prefix, std::size_t idx, const char* field) {
  return prefix + std::to_string(idx) + "." + field;
}

// Tracks feature width and per-sample sequence length through the stack.
struct Flow {
  std::size_t width = 0;
  std::size_t seq = 1;
};

}  // namespace

std::size_t NetworkSpec::input_dim() const {
  if (layers.empty()) return 0;
  return std::visit(Overloaded{[](const Linear& l) { return l.in; },
                               [](const TemporalConv1D& c) { return c.in_ch; },
                               [](const CausalAttentionBlock& b) { return b.embed_dim; },
                               [](const LayerNorm& n) { return n.dim; },
                               [](const Flatten&) { return std::size_t{0}; }},
                    layers.front());
}

std::size_t NetworkSpec::output_dim() const {
  validate();
  Flow f{input_dim(), seq_len};
  for (const auto& layer : layers) {
    std::visit(Overloaded{[&](const Linear& l) { f.width = l.out; },
                          [&](const TemporalConv1D& c) {
                            f.width = c.out_ch;
                            f.seq = ad::conv1d_out_len(f.seq, c.stride);
                          },
                          [&](const CausalAttentionBlock&) {},
                          [&](const LayerNorm&) {},
                          [&](const Flatten&) {
                            f.width *= f.seq;
                            f.seq = 1;
                          }},
               layer);
  }
  return f.width;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw ShapeMismatch(name + ": empty network");
  Flow f{input_dim(), seq_len};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto fail = [&](std::size_t expected) {
      throw ShapeMismatch(name + ": layer " + std::to_string(i) + " expects width " +
                          std::to_string(expected) + " but receives " + std::to_string(f.width));
    };
    std::visit(Overloaded{[&](const Linear& l) {
                            if (l.in != f.width) fail(l.in);
                            f.width = l.out;
                          },
                          [&](const TemporalConv1D& c) {
                            if (c.in_ch != f.width) fail(c.in_ch);
                            f.width = c.out_ch;
                            f.seq = ad::conv1d_out_len(f.seq, c.stride);
                          },
                          [&](const CausalAttentionBlock& b) {
                            if (b.embed_dim != f.width) fail(b.embed_dim);
                            if (b.heads == 0 || b.embed_dim % b.heads != 0) {
                              throw ShapeMismatch(name + ": heads must divide embed_dim");
                            }
                          },
                          [&](const LayerNorm& n) {
                            if (n.dim != f.width) fail(n.dim);
                          },
                          [&](const Flatten&) {
                            f.width *= f.seq;
                            f.seq = 1;
                          }},
               layers[i]);
  }
}

std::string NetworkSpec::describe() const {
  std::ostringstream os;
  os << name << "|seq=" << seq_len;
  for (const auto& layer : layers) {
    std::visit(Overloaded{[&](const Linear& l) {
                            os << "|linear(" << l.in << "," << l.out << "," << act_name(l.act) << ","
                               << l.init_scale << ")";
                          },
                          [&](const TemporalConv1D& c) {
                            os << "|tconv(" << c.in_ch << "," << c.out_ch << "," << c.kernel << ","
                               << c.stride << "," << (c.causal ? "causal" : "centered") << ","
                               << act_name(c.act) << ")";
                          },
                          [&](const CausalAttentionBlock& b) {
                            os << "|attn(" << b.embed_dim << "," << b.heads << "," << b.feedforward_dim
                               << ")";
                          },
                          [&](const LayerNorm& n) { os << "|ln(" << n.dim << ")"; },
                          [&](const Flatten&) { os << "|flatten"; }},
               layer);
  }
  return os.str();
}

std::uint64_t NetworkSpec::hash() const {
  const std::string d = describe();
  return ad::fnv1a(d.data(), d.size());
}

NetworkSpec mlp(std::string name, std::size_t in, const std::vector<std::size_t>& hidden,
                std::size_t out, Activation hidden_act, Activation out_act, double out_init_scale) {
  NetworkSpec spec;
  spec.name = std::move(name);
  std::size_t width = in;
  for (std::size_t h : hidden) {
    spec.layers.emplace_back(Linear{width, h, hidden_act, 1.0});
    width = h;
  }
  spec.layers.emplace_back(Linear{width, out, out_act, out_init_scale});
  return spec;
}

void init_params(const NetworkSpec& spec, ad::ParamSet& params, std::mt19937_64& rng,
                 const std::string& prefix) {
  spec.validate();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    std::visit(
        Overloaded{[&](const Linear& l) {
                     const double bound = std::sqrt(1.0 / static_cast<double>(l.in)) * l.init_scale;
                     params.add(key(prefix, i, "W"), uniform({l.in, l.out}, bound, rng));
                     params.add(key(prefix, i, "b"), uniform({1, l.out}, bound, rng));
                   },
                   [&](const TemporalConv1D& c) {
                     const double bound = std::sqrt(1.0 / static_cast<double>(c.in_ch * c.kernel));
                     params.add(key(prefix, i, "W"), uniform({c.kernel * c.in_ch, c.out_ch}, bound, rng));
                     params.add(key(prefix, i, "b"), uniform({1, c.out_ch}, bound, rng));
                   },
                   [&](const CausalAttentionBlock& b) {
                     const std::size_t d = b.embed_dim;
                     const double bd = std::sqrt(1.0 / static_cast<double>(d));
                     const double bf = std::sqrt(1.0 / static_cast<double>(b.feedforward_dim));
                     params.add(key(prefix, i, "ln1_g"), Tensor({1, d}, 1.0));
                     params.add(key(prefix, i, "ln1_b"), Tensor({1, d}, 0.0));
                     params.add(key(prefix, i, "Wqkv"), uniform({d, 3 * d}, bd, rng));
                     params.add(key(prefix, i, "bqkv"), Tensor({1, 3 * d}, 0.0));
                     params.add(key(prefix, i, "Wo"), uniform({d, d}, bd, rng));
                     params.add(key(prefix, i, "bo"), Tensor({1, d}, 0.0));
                     params.add(key(prefix, i, "ln2_g"), Tensor({1, d}, 1.0));
                     params.add(key(prefix, i, "ln2_b"), Tensor({1, d}, 0.0));
                     params.add(key(prefix, i, "W1"), uniform({d, b.feedforward_dim}, bd, rng));
                     params.add(key(prefix, i, "b1"), Tensor({1, b.feedforward_dim}, 0.0));
                     params.add(key(prefix, i, "W2"), uniform({b.feedforward_dim, d}, bf, rng));
                     params.add(key(prefix, i, "b2"), Tensor({1, d}, 0.0));
                   },
                   [&](const LayerNorm& n) {
                     params.add(key(prefix, i, "g"), Tensor({1, n.dim}, 1.0));
                     params.add(key(prefix, i, "b"), Tensor({1, n.dim}, 0.0));
                   },
                   [&](const Flatten&) {}},
        spec.layers[i]);
  }
}

ad::ParamSet init_params(const NetworkSpec& spec, std::mt19937_64& rng, const std::string& prefix) {
  ad::ParamSet p;
  init_params(spec, p, rng, prefix);
  return p;
}

Var apply_activation(Var x, Activation act) {
  switch (act) {
    case Activation::None: return x;
    case Activation::Elu: return ad::elu(x);
    case Activation::Gelu: return ad::gelu(x);
    case Activation::Tanh: return ad::tanh(x);
    case Activation::Relu: return ad::relu(x);
  }
  return x;
}

Var linear(ad::Tape& tape, const ad::ParamSet& params, const std::string& name, Var x) {
  Var w = tape.param(params, name + ".W");
  Var b = tape.param(params, name + ".b");
  return ad::add_row(ad::matmul(x, w), b);
}

Var forward(const NetworkSpec& spec, const ad::ParamSet& params, Var input, ad::Tape& tape,
            const std::string& prefix) {
  if (input.tape != &tape) throw ad::NoTape("forward: input not on the given tape");
  const std::size_t in_dim = spec.input_dim();
  if (input.cols() != in_dim || input.rows() % spec.seq_len != 0) {
    throw ShapeMismatch(spec.name + ": input [" + std::to_string(input.rows()) + "," +
                        std::to_string(input.cols()) + "] does not match width " +
                        std::to_string(in_dim) + " / seq_len " + std::to_string(spec.seq_len));
  }
  Var x = input;
  std::size_t seq = spec.seq_len;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    std::visit(
        Overloaded{
            [&](const Linear& l) {
              x = apply_activation(linear(tape, params, prefix + std::to_string(i), x), l.act);
            },
            [&](const TemporalConv1D& c) {
              Var w = tape.param(params, key(prefix, i, "W"));
              Var b = tape.param(params, key(prefix, i, "b"));
              x = apply_activation(ad::conv1d(x, w, b, seq, c.kernel, c.stride, c.causal), c.act);
              seq = ad::conv1d_out_len(seq, c.stride);
            },
            [&](const CausalAttentionBlock& blk) {
              const std::size_t d = blk.embed_dim;
              Var h = ad::layer_norm(x, tape.param(params, key(prefix, i, "ln1_g")),
                                     tape.param(params, key(prefix, i, "ln1_b")));
              Var qkv = ad::add_row(ad::matmul(h, tape.param(params, key(prefix, i, "Wqkv"))),
                                    tape.param(params, key(prefix, i, "bqkv")));
              Var q = ad::slice_cols(qkv, 0, d);
              Var k = ad::slice_cols(qkv, d, 2 * d);
              Var v = ad::slice_cols(qkv, 2 * d, 3 * d);
              Var att = ad::causal_attention(q, k, v, seq, blk.heads);
              Var proj = ad::add_row(ad::matmul(att, tape.param(params, key(prefix, i, "Wo"))),
                                     tape.param(params, key(prefix, i, "bo")));
              x = ad::add(x, proj);
              Var h2 = ad::layer_norm(x, tape.param(params, key(prefix, i, "ln2_g")),
                                      tape.param(params, key(prefix, i, "ln2_b")));
              Var ff = ad::gelu(ad::add_row(ad::matmul(h2, tape.param(params, key(prefix, i, "W1"))),
                                            tape.param(params, key(prefix, i, "b1"))));
              Var ff2 = ad::add_row(ad::matmul(ff, tape.param(params, key(prefix, i, "W2"))),
                                    tape.param(params, key(prefix, i, "b2")));
              x = ad::add(x, ff2);
            },
            [&](const LayerNorm&) {
              x = ad::layer_norm(x, tape.param(params, key(prefix, i, "g")),
                                 tape.param(params, key(prefix, i, "b")));
            },
            [&](const Flatten&) {
              const std::size_t batch = x.rows() / seq;
              x = ad::reshape(x, {batch, seq * x.cols()});
              seq = 1;
            }},
        spec.layers[i]);
  }
  return x;
}

Tensor infer(const NetworkSpec& spec, const ad::ParamSet& params, const Tensor& input,
             const std::string& prefix) {
  ad::Tape tape;
  Var out = forward(spec, params, tape.constant(input), tape, prefix);
  return out.value();
}

GradCheckResult grad_check_fn(ad::ParamSet& params,
                              const std::function<Var(ad::Tape&, ad::ParamSet&)>& loss,
                              std::mt19937_64& rng, std::size_t max_checks, double h) {
  ad::Gradients analytic;
  {
    ad::Tape tape;
    Var l = loss(tape, params);
    tape.backward(l);
    analytic = tape.gradients(params);
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  for (const auto& [name, p] : params.entries()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) entries.emplace_back(name, i);
  }
  std::shuffle(entries.begin(), entries.end(), rng);
  if (entries.size() > max_checks) entries.resize(max_checks);

  auto eval = [&]() {
    ad::Tape tape;
    return loss(tape, params).item();
  };
  GradCheckResult res;
  for (const auto& [name, idx] : entries) {
    double& w = params.value(name).data[idx];
    const double saved = w;
    w = saved + h;
    const double fp = eval();
    w = saved - h;
    const double fm = eval();
    w = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.at(name).data[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
    ++res.checked;
  }
  return res;
}

GradCheckResult grad_check(const NetworkSpec& spec, ad::ParamSet& params, const Tensor& input,
                           const LossFn& loss_fn, std::mt19937_64& rng, std::size_t max_checks,
                           double h) {
  return grad_check_fn(
      params,
      [&](ad::Tape& tape, ad::ParamSet& p) { return loss_fn(forward(spec, p, tape.constant(input), tape)); },
      rng, max_checks, h);
}

}  // namespace ptld::nn
