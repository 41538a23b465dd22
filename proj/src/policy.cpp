#include "ptld/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ptld::policy {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void append(std::vector<double>& out, std::span<const double> v) { out.insert(out.end(), v.begin(), v.end()); }

nn::NetworkSpec two_layer(const std::string& name, std::size_t in, std::size_t hidden) {
  nn::NetworkSpec s;
  s.name = name;
  s.layers.emplace_back(nn::Linear{in, hidden, nn::Activation::Elu, 1.0});
  s.layers.emplace_back(nn::Linear{hidden, hidden, nn::Activation::None, 1.0});
  return s;
}

Tensor sinusoid(std::size_t rows, std::size_t dim) {
  Tensor t({rows, dim}, 0.0);
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      t.at(p, i) = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  }
  return t;
}

std::size_t tc_out_len(const EncoderLayout& l, const NetConfig& net) {
  std::size_t seq = l.window_frames;
  for (std::size_t i = 0; i < net.tc_channels.size(); ++i) seq = ad::conv1d_out_len(seq, net.tc_stride);
  return seq;
}

std::vector<std::size_t> sizes_of(const json& j) { return j.get<std::vector<std::size_t>>(); }

}  // namespace

std::string view_name(ObsView v) {
  switch (v) {
    case ObsView::Proprio: return "proprio";
    case ObsView::ProprioPose: return "proprio+pose";
    case ObsView::Privileged: return "oracle";
    case ObsView::Tactile: return "tactile";
  }
  return "?";
}

ObsView parse_view(const std::string& s) {
  if (s == "proprio") return ObsView::Proprio;
  if (s == "proprio+pose" || s == "pose") return ObsView::ProprioPose;
  if (s == "oracle" || s == "privileged") return ObsView::Privileged;
  if (s == "tactile") return ObsView::Tactile;
  throw ConfigError("unknown observation view '" + s + "'");
}

std::string kind_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::Mlp: return "mlp";
    case EncoderKind::TemporalConv: return "tc";
    case EncoderKind::Transformer: return "ar";
  }
  return "?";
}

EncoderKind parse_kind(const std::string& s) {
  if (s == "mlp") return EncoderKind::Mlp;
  if (s == "tc") return EncoderKind::TemporalConv;
  if (s == "ar") return EncoderKind::Transformer;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

// ---- configuration -----------------------------------------------------------

NetConfig NetConfig::from_config(Config& cfg, const std::string& section) {
  NetConfig n;
  const auto key = [&](const char* k) { return section + "." + k; };
  const auto sizes = [&](const char* k, const std::vector<std::size_t>& def) {
    std::vector<double> d(def.begin(), def.end());
    std::vector<std::size_t> out;
    for (double v : cfg.get(key(k), d)) {
      if (v < 1.0) throw ConfigError("config key " + key(k) + " must hold positive sizes");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  };
  n.latent_dim = cfg.get(key("latent_dim"), n.latent_dim);
  n.encoder_hidden = sizes("encoder_hidden", n.encoder_hidden);
  n.pi_hidden = sizes("pi_hidden", n.pi_hidden);
  n.value_hidden = sizes("value_hidden", n.value_hidden);
  n.frames = cfg.get(key("frames"), n.frames);
  n.log_std_init = cfg.get(key("log_std_init"), n.log_std_init);
  n.tc_window_steps = cfg.get(key("tc_window_steps"), n.tc_window_steps);
  n.tc_embed = cfg.get(key("tc_embed"), n.tc_embed);
  n.tc_channels = sizes("tc_channels", n.tc_channels);
  n.tc_kernel = cfg.get(key("tc_kernel"), n.tc_kernel);
  n.tc_stride = cfg.get(key("tc_stride"), n.tc_stride);
  n.tc_head_hidden = sizes("tc_head_hidden", n.tc_head_hidden);
  n.ar_embed = cfg.get(key("ar_embed"), n.ar_embed);
  n.ar_layers = cfg.get(key("ar_layers"), n.ar_layers);
  n.ar_heads = cfg.get(key("ar_heads"), n.ar_heads);
  n.ar_context = cfg.get(key("ar_context"), n.ar_context);
  n.ar_modal_hidden = cfg.get(key("ar_modal_hidden"), n.ar_modal_hidden);
  if (n.latent_dim == 0 || n.frames == 0 || n.tc_window_steps == 0 || n.ar_context == 0) {
    throw ConfigError("policy sizes must be positive");
  }
  if (n.ar_embed % n.ar_heads != 0) throw ConfigError("policy.ar_embed must be divisible by policy.ar_heads");
  if (n.log_std_init < kLogStdMin || n.log_std_init > kLogStdMax) {
    throw ConfigError("policy.log_std_init outside [-5, 2]");
  }
  return n;
}

json NetConfig::to_json() const {
  return json{{"latent_dim", latent_dim},       {"encoder_hidden", encoder_hidden},
              {"pi_hidden", pi_hidden},         {"value_hidden", value_hidden},
              {"frames", frames},               {"log_std_init", log_std_init},
              {"tc_window_steps", tc_window_steps}, {"tc_embed", tc_embed},
              {"tc_channels", tc_channels},     {"tc_kernel", tc_kernel},
              {"tc_stride", tc_stride},         {"tc_head_hidden", tc_head_hidden},
              {"ar_embed", ar_embed},           {"ar_layers", ar_layers},
              {"ar_heads", ar_heads},           {"ar_context", ar_context},
              {"ar_modal_hidden", ar_modal_hidden}};
}

NetConfig NetConfig::from_json(const json& j) {
  NetConfig n;
  n.latent_dim = j.at("latent_dim");
  n.encoder_hidden = sizes_of(j.at("encoder_hidden"));
  n.pi_hidden = sizes_of(j.at("pi_hidden"));
  n.value_hidden = sizes_of(j.at("value_hidden"));
  n.frames = j.at("frames");
  n.log_std_init = j.at("log_std_init");
  n.tc_window_steps = j.at("tc_window_steps");
  n.tc_embed = j.at("tc_embed");
  n.tc_channels = sizes_of(j.at("tc_channels"));
  n.tc_kernel = j.at("tc_kernel");
  n.tc_stride = j.at("tc_stride");
  n.tc_head_hidden = sizes_of(j.at("tc_head_hidden"));
  n.ar_embed = j.at("ar_embed");
  n.ar_layers = j.at("ar_layers");
  n.ar_heads = j.at("ar_heads");
  n.ar_context = j.at("ar_context");
  n.ar_modal_hidden = j.at("ar_modal_hidden");
  return n;
}

json EncoderLayout::to_json() const {
  return json{{"kind", kind_name(kind)},   {"view", view_name(view)},
              {"frame_dim", frame_dim},    {"frames", frames},
              {"taxels", taxels},          {"window_frames", window_frames},
              {"substeps", substeps},      {"proprio_dim", proprio_dim},
              {"goal_dim", goal_dim},      {"context", context},
              {"latent_dim", latent_dim}};
}

EncoderLayout EncoderLayout::from_json(const json& j) {
  EncoderLayout l;
  l.kind = parse_kind(j.at("kind"));
  l.view = parse_view(j.at("view"));
  l.frame_dim = j.at("frame_dim");
  l.frames = j.at("frames");
  l.taxels = j.at("taxels");
  l.window_frames = j.at("window_frames");
  l.substeps = j.at("substeps");
  l.proprio_dim = j.at("proprio_dim");
  l.goal_dim = j.at("goal_dim");
  l.context = j.at("context");
  l.latent_dim = j.at("latent_dim");
  return l;
}

// ---- encoders ------------------------------------------------------------------

Encoder Encoder::skeleton(const EncoderLayout& layout, const NetConfig& net) {
  Encoder e;
  e.layout = layout;
  e.net = net;
  const std::size_t L = layout.latent_dim;
  switch (layout.kind) {
    case EncoderKind::Mlp:
      e.body = nn::mlp("enc.mlp", layout.frame_dim * layout.frames, net.encoder_hidden, L, nn::Activation::Elu,
                       nn::Activation::Tanh);
      break;
    case EncoderKind::TemporalConv: {
      if (layout.window_frames == 0 || layout.taxels == 0) throw ShapeMismatch("tc encoder needs a tactile window");
      nn::NetworkSpec b;
      b.name = "enc.tc";
      b.seq_len = layout.window_frames;
      b.layers.emplace_back(nn::Linear{layout.tactile_channels(), net.tc_embed, nn::Activation::Elu, 1.0});
      std::size_t ch = net.tc_embed;
      for (std::size_t c : net.tc_channels) {
        b.layers.emplace_back(nn::TemporalConv1D{ch, c, net.tc_kernel, net.tc_stride, true, nn::Activation::Elu});
        ch = c;
      }
      b.layers.emplace_back(nn::Flatten{});
      e.body = b;
      const std::size_t head_in = tc_out_len(layout, net) * ch + layout.frame_dim * layout.frames;
      e.head = nn::mlp("enc.tc_head", head_in, net.tc_head_hidden, L, nn::Activation::Elu, nn::Activation::Tanh);
      break;
    }
    case EncoderKind::Transformer: {
      const std::size_t h = net.ar_modal_hidden;
      e.embedders.push_back(two_layer("enc.emb_tactile", layout.tactile_step_dim(), h));
      e.embedders.push_back(two_layer("enc.emb_proprio", layout.proprio_dim, h));
      if (layout.goal_dim > 0) e.embedders.push_back(two_layer("enc.emb_goal", layout.goal_dim, h));
      e.embedders.push_back(two_layer("enc.emb_latent", L, h));
      e.head = nn::mlp("enc.proj", h * e.embedders.size(), {}, net.ar_embed, nn::Activation::None,
                       nn::Activation::None);
      nn::NetworkSpec b;
      b.name = "enc.ar";
      b.seq_len = layout.context;
      for (std::size_t i = 0; i < net.ar_layers; ++i) {
        b.layers.emplace_back(nn::CausalAttentionBlock{net.ar_embed, net.ar_heads, 2 * net.ar_embed});
      }
      b.layers.emplace_back(nn::LayerNorm{net.ar_embed});
      b.layers.emplace_back(nn::Linear{net.ar_embed, L, nn::Activation::Tanh, 1.0});
      e.body = b;
      break;
    }
  }
  e.body.validate();
  if (!e.head.layers.empty()) e.head.validate();
  return e;
}

Encoder Encoder::build(const EncoderLayout& layout, const NetConfig& net, std::mt19937_64& rng) {
  Encoder e = skeleton(layout, net);
  nn::init_params(e.body, e.params, rng, "b.");
  if (!e.head.layers.empty()) nn::init_params(e.head, e.params, rng, "h.");
  for (std::size_t i = 0; i < e.embedders.size(); ++i) {
    nn::init_params(e.embedders[i], e.params, rng, "e" + std::to_string(i) + ".");
  }
  return e;
}

Var Encoder::forward_all(Tape& tape, Var tokens, std::size_t seq_len) const {
  if (layout.kind != EncoderKind::Transformer) throw ShapeMismatch("forward_all needs a transformer encoder");
  if (seq_len == 0 || seq_len > layout.context) {
    throw ContextOverflow("sequence of " + std::to_string(seq_len) + " tokens exceeds context " +
                          std::to_string(layout.context));
  }
  if (tokens.cols() != layout.token_dim() || tokens.rows() % seq_len != 0) {
    throw ShapeMismatch("transformer encoder: token width " + std::to_string(tokens.cols()) + ", expected " +
                        std::to_string(layout.token_dim()));
  }
  std::vector<std::pair<std::size_t, std::size_t>> parts;
  std::size_t off = 0;
  parts.emplace_back(off, off + layout.tactile_step_dim());
  off += layout.tactile_step_dim();
  parts.emplace_back(off, off + layout.proprio_dim);
  off += layout.proprio_dim;
  if (layout.goal_dim > 0) {
    parts.emplace_back(off, off + layout.goal_dim);
    off += layout.goal_dim;
  }
  parts.emplace_back(off, off + layout.latent_dim);
  std::vector<Var> emb;
  for (std::size_t i = 0; i < embedders.size(); ++i) {
    Var x = ad::slice_cols(tokens, parts[i].first, parts[i].second);
    emb.push_back(nn::forward(embedders[i], params, x, tape, "e" + std::to_string(i) + "."));
  }
  Var x = nn::forward(head, params, ad::concat_cols(emb), tape, "h.");
  x = ad::add_positional(x, tape.constant(sinusoid(seq_len, net.ar_embed)), seq_len);
  nn::NetworkSpec b = body;
  b.seq_len = seq_len;
  return nn::forward(b, params, x, tape, "b.");
}

Var Encoder::forward(Tape& tape, std::span<const EncoderInput* const> batch) const {
  const std::size_t B = batch.size();
  if (B == 0) throw ShapeMismatch("empty encoder batch");
  const std::size_t flat_dim = layout.frame_dim * layout.frames;
  if (layout.kind == EncoderKind::Transformer) {
    const std::size_t td = layout.token_dim();
    const std::size_t n = batch[0]->flat.size();
    if (n == 0 || n % td != 0) throw ShapeMismatch("transformer input is not a whole number of tokens");
    const std::size_t T = n / td;
    Tensor tok({B * T, td});
    for (std::size_t b = 0; b < B; ++b) {
      if (batch[b]->flat.size() != n) throw ShapeMismatch("transformer batch with unequal history lengths");
      std::copy(batch[b]->flat.begin(), batch[b]->flat.end(), tok.data.begin() + b * n);
    }
    Var all = forward_all(tape, tape.constant(std::move(tok)), T);
    std::vector<Var> last;
    for (std::size_t b = 0; b < B; ++b) last.push_back(ad::slice_rows(all, b * T + T - 1, b * T + T));
    return B == 1 ? last[0] : ad::concat_rows(last);
  }
  Tensor flat({B, flat_dim});
  for (std::size_t b = 0; b < B; ++b) {
    if (batch[b]->flat.size() != flat_dim) {
      throw ShapeMismatch("encoder " + kind_name(layout.kind) + "/" + view_name(layout.view) + ": input width " +
                          std::to_string(batch[b]->flat.size()) + ", expected " + std::to_string(flat_dim));
    }
    std::copy(batch[b]->flat.begin(), batch[b]->flat.end(), flat.data.begin() + b * flat_dim);
  }
  if (layout.kind == EncoderKind::Mlp) return nn::forward(body, params, tape.constant(std::move(flat)), tape, "b.");

  const std::size_t W = layout.window_frames, C = layout.tactile_channels();
  Tensor tac({B * W, C});
  for (std::size_t b = 0; b < B; ++b) {
    if (batch[b]->tactile.size() < W * C) {
      throw WindowTooShort("tactile window holds " + std::to_string(batch[b]->tactile.size() / C) +
                           " frames, encoder needs " + std::to_string(W));
    }
    if (batch[b]->tactile.size() != W * C) throw ShapeMismatch("tactile window larger than the encoder's");
    std::copy(batch[b]->tactile.begin(), batch[b]->tactile.end(), tac.data.begin() + b * W * C);
  }
  Var feat = nn::forward(body, params, tape.constant(std::move(tac)), tape, "b.");
  if (flat_dim > 0) feat = ad::concat_cols({feat, tape.constant(std::move(flat))});
  return nn::forward(head, params, feat, tape, "h.");
}

std::vector<double> Encoder::encode(const EncoderInput& in) const {
  Tape tape;
  const EncoderInput* p = &in;
  return forward(tape, std::span<const EncoderInput* const>(&p, 1)).value().vec();
}

std::uint64_t Encoder::spec_hash() const {
  const std::string d = describe().dump();
  return ad::fnv1a(d.data(), d.size());
}

json Encoder::describe() const {
  json j = layout.to_json();
  j["body"] = body.describe();
  j["head"] = head.layers.empty() ? std::string() : head.describe();
  json e = json::array();
  for (const auto& s : embedders) e.push_back(s.describe());
  j["embedders"] = e;
  return j;
}

std::vector<double> encode_tactile_tc(const Encoder& enc, std::span<const double> window,
                                      std::span<const double> taxel_positions, std::span<const double> proprio_stack) {
  const EncoderLayout& l = enc.layout;
  if (l.kind != EncoderKind::TemporalConv) throw ShapeMismatch("encode_tactile_tc needs a tc encoder");
  const std::size_t per = l.taxels * 3;
  if (window.size() % per != 0) throw ShapeMismatch("tactile window is not a whole number of frames");
  const std::size_t frames = window.size() / per;
  if (frames < l.window_frames) {
    throw WindowTooShort("tactile window holds " + std::to_string(frames) + " frames, encoder needs " +
                         std::to_string(l.window_frames));
  }
  const bool per_frame_pos = taxel_positions.size() == frames * per;
  if (!per_frame_pos && taxel_positions.size() != per) throw ShapeMismatch("taxel positions size");
  EncoderInput in;
  in.flat.assign(proprio_stack.begin(), proprio_stack.end());
  const std::size_t first = frames - l.window_frames;
  for (std::size_t f = first; f < frames; ++f) {
    const double* pos = taxel_positions.data() + (per_frame_pos ? f * per : 0);
    for (std::size_t t = 0; t < l.taxels; ++t) {
      for (int k = 0; k < 3; ++k) in.tactile.push_back(window[f * per + t * 3 + k]);
      for (int k = 0; k < 3; ++k) in.tactile.push_back(pos[t * 3 + k]);
    }
  }
  return enc.encode(in);
}

void ArHistory::append(ArToken token) {
  if (tokens_.size() >= context_) {
    throw ContextOverflow("autoregressive history is full (" + std::to_string(context_) + " tokens)");
  }
  tokens_.push_back(std::move(token));
}

void ArHistory::push_sliding(ArToken token) {
  if (tokens_.size() >= context_) tokens_.pop_front();
  tokens_.push_back(std::move(token));
}

std::vector<double> flatten_token(const EncoderLayout& l, const ArToken& t) {
  if (t.tactile.size() != l.tactile_step_dim() || t.proprio.size() != l.proprio_dim || t.goal.size() != l.goal_dim ||
      t.z_prev.size() != l.latent_dim) {
    throw ShapeMismatch("autoregressive token parts do not match the encoder layout");
  }
  std::vector<double> v;
  v.reserve(l.token_dim());
  append(v, t.tactile);
  append(v, t.proprio);
  append(v, t.goal);
  append(v, t.z_prev);
  return v;
}

std::vector<double> encode_tactile_ar(const Encoder& enc, const ArHistory& history) {
  if (enc.layout.kind != EncoderKind::Transformer) throw ShapeMismatch("encode_tactile_ar needs a transformer encoder");
  if (history.size() == 0) throw ShapeMismatch("empty autoregressive history");
  if (history.size() > enc.layout.context) throw ContextOverflow("history longer than the encoder context");
  EncoderInput in;
  for (const auto& t : history.tokens()) append(in.flat, flatten_token(enc.layout, t));
  return enc.encode(in);
}

// ---- policy --------------------------------------------------------------------

EncoderLayout layout_for(const plant::PlantParams& p, ObsView view, EncoderKind kind, const NetConfig& net) {
  EncoderLayout l;
  l.kind = kind;
  l.view = view;
  l.latent_dim = net.latent_dim;
  const std::size_t A = p.action_dim(), P = p.proprio_dim(), G = p.goal_dim();
  switch (view) {
    case ObsView::Proprio: l.frame_dim = P + G + A; l.frames = net.frames; break;
    case ObsView::ProprioPose: l.frame_dim = P + p.pose_dim() + G + A; l.frames = net.frames; break;
    case ObsView::Privileged: l.frame_dim = p.privileged_dim(); l.frames = 1; break;
    case ObsView::Tactile: l.frame_dim = P + G + A; l.frames = net.frames; break;
  }
  if (kind == EncoderKind::Mlp && view == ObsView::Tactile) throw ShapeMismatch("tactile view needs a tc or ar encoder");
  if (kind != EncoderKind::Mlp) {
    if (view != ObsView::Tactile) throw ShapeMismatch("tc and ar encoders read the tactile view");
    l.taxels = p.taxels();
    l.substeps = p.tactile_substeps;
  }
  if (kind == EncoderKind::TemporalConv) l.window_frames = net.tc_window_steps * p.tactile_substeps;
  if (kind == EncoderKind::Transformer) {
    l.frame_dim = 0;
    l.frames = 1;
    l.proprio_dim = P + A;
    l.goal_dim = G;
    l.context = net.ar_context;
  }
  return l;
}

PolicyNet make_policy(const plant::PlantParams& p, ObsView actor_view, const NetConfig& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PolicyNet pn;
  pn.task = p.task;
  pn.net = net;
  pn.action_dim = p.action_dim();
  const EncoderKind kind = actor_view == ObsView::Tactile
                               ? (p.task == plant::Task::Rotation ? EncoderKind::TemporalConv : EncoderKind::Transformer)
                               : EncoderKind::Mlp;
  pn.actor = Encoder::build(layout_for(p, actor_view, kind, net), net, rng);
  pn.critic = Encoder::build(layout_for(p, ObsView::Privileged, EncoderKind::Mlp, net), net, rng);
  pn.pi_spec = nn::mlp("pi", net.latent_dim, net.pi_hidden, pn.action_dim, nn::Activation::Elu, nn::Activation::None,
                       0.01);
  pn.v_spec = nn::mlp("value", net.latent_dim, net.value_hidden, 1, nn::Activation::Elu, nn::Activation::None);
  nn::init_params(pn.pi_spec, pn.pi, rng);
  pn.pi.add("log_std", Tensor({1, pn.action_dim}, net.log_std_init));
  nn::init_params(pn.v_spec, pn.value, rng);
  return pn;
}

std::vector<double> clamped_log_std(const PolicyNet& net) {
  std::vector<double> ls = net.pi.value("log_std").vec();
  for (double& v : ls) v = std::clamp(v, kLogStdMin, kLogStdMax);
  return ls;
}

double gaussian_log_prob(std::span<const double> mean, std::span<const double> log_std, std::span<const double> a) {
  if (mean.size() != a.size() || log_std.size() != a.size()) throw ShapeMismatch("gaussian_log_prob sizes");
  double lp = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double z = (a[i] - mean[i]) / std::exp(log_std[i]);
    lp += -0.5 * z * z - log_std[i] - 0.5 * kLog2Pi;
  }
  return lp;
}

Var policy_mean(Tape& tape, const PolicyNet& net, Var latent) { return nn::forward(net.pi_spec, net.pi, latent, tape); }

std::vector<ActResult> act_batch(const PolicyNet& net, std::span<const EncoderInput* const> batch, Mode mode,
                                 std::mt19937_64& rng) {
  Tape tape;
  Var z = net.actor.forward(tape, batch);
  Var mu = policy_mean(tape, net, z);
  const std::vector<double> ls = clamped_log_std(net);
  const std::size_t A = net.action_dim, L = net.latent_dim();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<ActResult> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ActResult& r = out[b];
    r.mean.assign(mu.value().data.begin() + b * A, mu.value().data.begin() + (b + 1) * A);
    r.latent.assign(z.value().data.begin() + b * L, z.value().data.begin() + (b + 1) * L);
    r.action = r.mean;
    if (mode == Mode::Stochastic) {
      for (std::size_t i = 0; i < A; ++i) r.action[i] += std::exp(ls[i]) * gauss(rng);
    }
    r.log_prob = gaussian_log_prob(r.mean, ls, r.action);
  }
  return out;
}

ActResult act(const PolicyNet& net, const EncoderInput& in, Mode mode, std::mt19937_64& rng) {
  const EncoderInput* p = &in;
  return act_batch(net, std::span<const EncoderInput* const>(&p, 1), mode, rng)[0];
}

std::vector<double> action_from_latent(const PolicyNet& net, std::span<const double> latent) {
  Tape tape;
  Var mu = policy_mean(tape, net, tape.constant(Tensor::row(latent)));
  return mu.value().vec();
}

std::vector<double> encode_privileged(const PolicyNet& net, std::span<const double> priv) {
  EncoderInput in;
  in.flat.assign(priv.begin(), priv.end());
  return net.critic.encode(in);
}

// ---- observation assembly ------------------------------------------------------

void FrameStack::push(std::span<const double> frame) {
  if (frame.size() != dim_) {
    throw ShapeMismatch("frame of width " + std::to_string(frame.size()) + ", stack expects " + std::to_string(dim_));
  }
  if (buf_.empty()) {
    for (std::size_t i = 0; i < k_; ++i) buf_.emplace_back(frame.begin(), frame.end());
    return;
  }
  buf_.pop_front();
  buf_.emplace_back(frame.begin(), frame.end());
}

std::vector<double> FrameStack::window() const {
  std::vector<double> out;
  out.reserve(k_ * dim_);
  for (const auto& f : buf_) append(out, f);
  return out;
}

std::vector<double> frame_of(ObsView view, const plant::ObservationBundle& obs, std::span<const double> prev_action) {
  std::vector<double> f;
  switch (view) {
    case ObsView::Privileged: return obs.privileged;
    case ObsView::ProprioPose:
      append(f, obs.proprio);
      append(f, obs.pose);
      break;
    case ObsView::Proprio:
    case ObsView::Tactile: append(f, obs.proprio); break;
  }
  append(f, obs.goal);
  append(f, prev_action);
  return f;
}

ObsAssembler::ObsAssembler(const EncoderLayout& layout, bool mask_tactile)
    : layout_(layout), mask_(mask_tactile), stack_(layout.frames, layout.frame_dim), history_(std::max<std::size_t>(layout.context, 1)) {}

void ObsAssembler::push_tactile(const plant::ObservationBundle& obs) {
  const std::size_t per = layout_.taxels * 3;
  if (obs.tactile.size() != layout_.substeps * per || obs.taxel_pos.size() != per) {
    throw ShapeMismatch("observation carries no tactile frames of the encoder's shape (deployment plant required)");
  }
  for (std::size_t s = 0; s < layout_.substeps; ++s) {
    std::vector<double> frame(layout_.tactile_channels(), 0.0);
    if (!mask_) {
      for (std::size_t t = 0; t < layout_.taxels; ++t) {
        for (int k = 0; k < 3; ++k) {
          frame[t * 6 + k] = obs.tactile[s * per + t * 3 + k];
          frame[t * 6 + 3 + k] = obs.taxel_pos[t * 3 + k];
        }
      }
    }
    if (tactile_.empty()) {
      for (std::size_t i = 0; i < layout_.window_frames; ++i) tactile_.push_back(frame);
    } else {
      tactile_.pop_front();
      tactile_.push_back(std::move(frame));
    }
  }
}

void ObsAssembler::reset(const plant::ObservationBundle& first, std::size_t action_dim) {
  stack_.reset();
  tactile_.clear();
  history_.clear();
  z_prev_.assign(layout_.latent_dim, 0.0);
  push(first, std::vector<double>(action_dim, 0.0));
}

void ObsAssembler::push(const plant::ObservationBundle& obs, std::span<const double> prev_action) {
  if (layout_.kind == EncoderKind::Transformer) {
    ArToken t;
    t.tactile = mask_ ? std::vector<double>(obs.tactile.size(), 0.0) : obs.tactile;
    t.proprio = obs.proprio;
    append(t.proprio, prev_action);
    t.goal = obs.goal;
    t.z_prev = z_prev_;
    flatten_token(layout_, t);
    history_.push_sliding(std::move(t));
    return;
  }
  if (layout_.frame_dim > 0) stack_.push(frame_of(layout_.view, obs, prev_action));
  if (layout_.kind == EncoderKind::TemporalConv) push_tactile(obs);
}

void ObsAssembler::set_latent(std::span<const double> z) { z_prev_.assign(z.begin(), z.end()); }

EncoderInput ObsAssembler::input() const {
  EncoderInput in;
  if (layout_.kind == EncoderKind::Transformer) {
    for (const auto& t : history_.tokens()) append(in.flat, flatten_token(layout_, t));
    return in;
  }
  if (layout_.frame_dim > 0) in.flat = stack_.window();
  for (const auto& f : tactile_) append(in.tactile, f);
  return in;
}

Agent::Agent(const PolicyNet& net, Mode mode, std::uint64_t seed, bool mask_tactile)
    : net_(&net), mode_(mode), rng_(seed), assembler_(net.actor.layout, mask_tactile) {}

void Agent::reset(const plant::ObservationBundle& first) {
  prev_action_.assign(net_->action_dim, 0.0);
  assembler_.reset(first, net_->action_dim);
  fresh_ = true;
}

ActResult Agent::step(const plant::ObservationBundle& obs) {
  if (!fresh_) assembler_.push(obs, prev_action_);
  fresh_ = false;
  ActResult r = act(*net_, assembler_.input(), mode_, rng_);
  assembler_.set_latent(r.latent);
  prev_action_ = r.action;
  return r;
}

// ---- persistence ---------------------------------------------------------------

void write_policy(io::Container& c, const PolicyNet& net) {
  json j;
  j["task"] = plant::task_name(net.task);
  j["action_dim"] = net.action_dim;
  j["net"] = net.net.to_json();
  j["actor"] = net.actor.layout.to_json();
  j["actor_spec_hash"] = io::hex64(net.actor.spec_hash());
  j["critic"] = net.critic.layout.to_json();
  j["heads_hash"] = io::hex64(heads_hash(net));
  c.header["policy"] = j;
  io::append_params(c, "actor", net.actor.params);
  io::append_params(c, "critic", net.critic.params);
  io::append_params(c, "pi", net.pi);
  io::append_params(c, "value", net.value);
}

PolicyNet read_policy(const io::Container& c) {
  if (!c.header.contains("policy")) throw IncompatibleCheckpoint("container holds no policy");
  const json& j = c.header.at("policy");
  PolicyNet pn;
  try {
    pn.task = plant::parse_task(j.at("task"));
    pn.action_dim = j.at("action_dim");
    pn.net = NetConfig::from_json(j.at("net"));
    pn.actor = Encoder::skeleton(EncoderLayout::from_json(j.at("actor")), pn.net);
    pn.critic = Encoder::skeleton(EncoderLayout::from_json(j.at("critic")), pn.net);
  } catch (const json::exception& e) {
    throw IncompatibleCheckpoint(std::string("malformed policy header: ") + e.what());
  }
  if (io::hex64(pn.actor.spec_hash()) != j.at("actor_spec_hash").get<std::string>()) {
    throw IncompatibleCheckpoint("actor encoder spec does not match its recorded hash");
  }
  pn.pi_spec = nn::mlp("pi", pn.net.latent_dim, pn.net.pi_hidden, pn.action_dim, nn::Activation::Elu,
                       nn::Activation::None, 0.01);
  pn.v_spec = nn::mlp("value", pn.net.latent_dim, pn.net.value_hidden, 1, nn::Activation::Elu, nn::Activation::None);
  pn.actor.params = io::read_params(c, "actor");
  pn.critic.params = io::read_params(c, "critic");
  pn.pi = io::read_params(c, "pi");
  pn.value = io::read_params(c, "value");
  return pn;
}

std::uint64_t heads_hash(const PolicyNet& net) {
  std::uint64_t h[2] = {net.pi.value_hash(), net.value.value_hash()};
  return ad::fnv1a(h, sizeof(h));
}

}  // namespace ptld::policy
