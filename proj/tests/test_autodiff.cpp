#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ptld/autodiff.hpp"
#include "ptld/nn.hpp"

#include <cmath>
#include <memory>
#include <random>
#include <vector>

using namespace ptld;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.data) v = n(rng);
  return t;
}


// Weighted sum so every output entry gets a distinct upstream gradient.
nn::LossFn weighted_loss(std::size_t n, std::mt19937_64& rng) {
  auto w = std::make_shared<Tensor>(std::vector<std::size_t>{1, n}, 0.0);
  std::normal_distribution<double> d(0.0, 1.0);
  for (double& v : w->data) v = d(rng);
  return [w](Var y) {
    Var flat = ad::reshape(y, {1, y.value().size()});
    Var c = y.tape->constant(*w);
    return ad::add(ad::sum(ad::mul(flat, c)), ad::scale(ad::sum(ad::square(flat)), 0.1));
  };
}

}  // namespace

TEST_CASE("identity linear layer passes input through") {
  nn::NetworkSpec spec;
  spec.name = "id";
  spec.layers.emplace_back(nn::Linear{3, 3, nn::Activation::None});
  ad::ParamSet p;
  p.add("0.W", Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  p.add("0.b", Tensor({1, 3}, 0.0));
  const Tensor x({2, 3}, {1.5, -2, 3, 0.25, 7, -1});
  CHECK(nn::infer(spec, p, x).data == x.data);
}

TEST_CASE("two-layer MLP matches a straight-line recomputation") {
  std::mt19937_64 rng(4);
  const auto spec = nn::mlp("m", 4, {5}, 2, nn::Activation::Elu, nn::Activation::None);
  const ad::ParamSet p = nn::init_params(spec, rng);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor y = nn::infer(spec, p, x);

  const Tensor& w0 = p.value("0.W");
  const Tensor& b0 = p.value("0.b");
  const Tensor& w1 = p.value("1.W");
  const Tensor& b1 = p.value("1.b");
  for (std::size_t r = 0; r < 3; ++r) {
    double h[5];
    for (std::size_t j = 0; j < 5; ++j) {
      double s = b0.data[j];
      for (std::size_t i = 0; i < 4; ++i) s += x.data[r * 4 + i] * w0.data[i * 5 + j];
      h[j] = s > 0 ? s : std::exp(s) - 1.0;
    }
    for (std::size_t k = 0; k < 2; ++k) {
      double s = b1.data[k];
      for (std::size_t j = 0; j < 5; ++j) s += h[j] * w1.data[j * 2 + k];
      CHECK(y.data[r * 2 + k] == doctest::Approx(s).epsilon(1e-13));
    }
  }
}

TEST_CASE("shape mismatch is reported") {
  std::mt19937_64 rng(1);
  const auto spec = nn::mlp("m", 4, {3}, 2, nn::Activation::Elu, nn::Activation::None);
  const ad::ParamSet p = nn::init_params(spec, rng);
  CHECK_THROWS_AS(nn::infer(spec, p, Tensor({2, 5}, 0.0)), ad::ShapeMismatch);

  nn::NetworkSpec broken;
  broken.name = "broken";
  broken.layers.emplace_back(nn::Linear{4, 3});
  broken.layers.emplace_back(nn::Linear{2, 1});
  CHECK_THROWS_AS(broken.validate(), ad::ShapeMismatch);
}

TEST_CASE("backward of a constant loss gives zero gradients") {
  std::mt19937_64 rng(2);
  const auto spec = nn::mlp("m", 3, {4}, 2, nn::Activation::Tanh, nn::Activation::None);
  const ad::ParamSet p = nn::init_params(spec, rng);
  ad::Tape tape;
  Var y = nn::forward(spec, p, tape.constant(random_tensor({2, 3}, rng)), tape);
  Var loss = ad::add(ad::scale(ad::sum(y), 0.0), tape.constant(Tensor({1, 1}, 3.0)));
  tape.backward(loss);
  for (const auto& [name, g] : tape.gradients(p)) {
    for (double v : g.data) CHECK(v == 0.0);
  }
}

TEST_CASE("quadratic loss has the closed-form gradient") {
  std::mt19937_64 rng(8);
  ad::ParamSet p;
  p.add("W", random_tensor({3, 2}, rng));
  const Tensor x = random_tensor({1, 3}, rng);
  const Tensor target = random_tensor({1, 2}, rng);
  ad::Tape tape;
  Var pred = ad::matmul(tape.constant(x), tape.param(p, "W"));
  Var loss = ad::sum(ad::square(ad::sub(pred, tape.constant(target))));
  tape.backward(loss);
  const Tensor g = tape.gradients(p).at("W");
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double expected = 2.0 * (pred.value().data[j] - target.data[j]) * x.data[i];
      CHECK(g.data[i * 2 + j] == doctest::Approx(expected).epsilon(1e-13));
    }
  }
}

TEST_CASE("backward without a tape is rejected") {
  ad::Tape tape;
  Var v = tape.constant(Tensor({1, 1}, 1.0));
  ad::Tape other;
  CHECK_THROWS_AS(other.backward(v), ad::NoTape);
  ad::ParamSet p;
  CHECK_THROWS_AS(other.gradients(p), ad::NoTape);
  CHECK_THROWS_AS(Var{}.value(), ad::NoTape);
}

TEST_CASE("stop_gradient semantics") {
  ad::ParamSet p;
  p.add("a", Tensor({1, 3}, {1.0, -2.0, 0.5}));
  p.add("b", Tensor({1, 3}, {0.25, 1.0, -1.5}));
  ad::Tape tape;
  Var a = tape.param(p, "a");
  Var b = tape.param(p, "b");
  Var sb = ad::stop_gradient(b);
  CHECK(sb.value().data == b.value().data);
  Var loss = ad::sum(ad::square(ad::sub(a, sb)));
  tape.backward(loss);
  const auto g = tape.gradients(p);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g.at("b").data[i] == 0.0);
    CHECK(g.at("a").data[i] == doctest::Approx(2.0 * (p.value("a").data[i] - p.value("b").data[i])));
  }

  ad::Tape t2;
  Var loss2 = ad::sum(ad::square(ad::sub(t2.param(p, "a"), ad::stop_gradient(ad::stop_gradient(t2.param(p, "b"))))));
  t2.backward(loss2);
  const auto g2 = t2.gradients(p);
  for (double v : g2.at("b").data) CHECK(v == 0.0);
}

TEST_CASE("causal attention ignores future positions") {
  std::mt19937_64 rng(12);
  nn::NetworkSpec spec;
  spec.name = "attn";
  spec.seq_len = 6;
  spec.layers.emplace_back(nn::CausalAttentionBlock{8, 2, 16});
  spec.layers.emplace_back(nn::CausalAttentionBlock{8, 2, 16});
  const ad::ParamSet p = nn::init_params(spec, rng);
  const Tensor x = random_tensor({12, 8}, rng);
  const Tensor base = nn::infer(spec, p, x);
  for (std::size_t t = 0; t < 6; ++t) {
    Tensor cut = x;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t tt = t + 1; tt < 6; ++tt) {
        for (std::size_t c = 0; c < 8; ++c) cut.data[(b * 6 + tt) * 8 + c] = 0.0;
      }
    }
    const Tensor y = nn::infer(spec, p, cut);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t tt = 0; tt <= t; ++tt) {
        for (std::size_t c = 0; c < 8; ++c) {
          CHECK(y.data[(b * 6 + tt) * 8 + c] == base.data[(b * 6 + tt) * 8 + c]);
        }
      }
    }
  }
}

TEST_CASE("causal temporal convolution ignores future frames") {
  std::mt19937_64 rng(13);
  nn::NetworkSpec spec;
  spec.name = "tc";
  spec.seq_len = 9;
  spec.layers.emplace_back(nn::TemporalConv1D{3, 4, 3, 1, true});
  spec.layers.emplace_back(nn::TemporalConv1D{4, 4, 3, 1, true});
  const ad::ParamSet p = nn::init_params(spec, rng);
  const Tensor x = random_tensor({9, 3}, rng);
  const Tensor base = nn::infer(spec, p, x);
  Tensor cut = x;
  for (std::size_t t = 5; t < 9; ++t) {
    for (std::size_t c = 0; c < 3; ++c) cut.data[t * 3 + c] = 42.0;
  }
  const Tensor y = nn::infer(spec, p, cut);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.data[t * 4 + c] == base.data[t * 4 + c]);
  }
}

TEST_CASE("conv output length with stride") {
  CHECK(ad::conv1d_out_len(50, 1) == 50);
  CHECK(ad::conv1d_out_len(50, 2) == 25);
  CHECK(ad::conv1d_out_len(25, 2) == 13);
}

TEST_CASE("gradient check: linear regression toy") {
  std::mt19937_64 rng(30);
  const auto spec = nn::mlp("lin", 4, {}, 1, nn::Activation::None, nn::Activation::None);
  ad::ParamSet p = nn::init_params(spec, rng);
  const Tensor x = random_tensor({16, 4}, rng);
  const Tensor y = random_tensor({16, 1}, rng);
  const auto res = nn::grad_check(
      spec, p, x, [&](Var out) { return ad::mean(ad::square(ad::sub(out, out.tape->constant(y)))); }, rng);
  CHECK(res.checked == 5);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("gradient check: MLP with every activation") {
  for (auto act : {nn::Activation::Elu, nn::Activation::Gelu, nn::Activation::Tanh}) {
    std::mt19937_64 rng(31);
    const auto spec = nn::mlp("mlp", 5, {7, 6}, 3, act, nn::Activation::Tanh);
    ad::ParamSet p = nn::init_params(spec, rng);
    const auto res = nn::grad_check(spec, p, random_tensor({4, 5}, rng), weighted_loss(12, rng), rng);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradient check: temporal-conv encoder") {
  std::mt19937_64 rng(32);
  nn::NetworkSpec spec;
  spec.name = "tc_enc";
  spec.seq_len = 10;
  spec.layers.emplace_back(nn::Linear{6, 5, nn::Activation::Elu});
  spec.layers.emplace_back(nn::TemporalConv1D{5, 4, 3, 2, true});
  spec.layers.emplace_back(nn::TemporalConv1D{4, 4, 3, 2, true});
  spec.layers.emplace_back(nn::Flatten{});
  spec.layers.emplace_back(nn::Linear{12, 3, nn::Activation::Tanh});
  ad::ParamSet p = nn::init_params(spec, rng);
  const auto res = nn::grad_check(spec, p, random_tensor({20, 6}, rng), weighted_loss(6, rng), rng, 400);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradient check: transformer block with layer norm") {
  std::mt19937_64 rng(33);
  nn::NetworkSpec spec;
  spec.name = "tf";
  spec.seq_len = 5;
  spec.layers.emplace_back(nn::Linear{3, 8, nn::Activation::None});
  spec.layers.emplace_back(nn::CausalAttentionBlock{8, 2, 12});
  spec.layers.emplace_back(nn::LayerNorm{8});
  spec.layers.emplace_back(nn::Linear{8, 2, nn::Activation::None});
  ad::ParamSet p = nn::init_params(spec, rng);
  const auto res = nn::grad_check(spec, p, random_tensor({10, 3}, rng), weighted_loss(20, rng), rng, 400);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradient check: structural ops") {
  std::mt19937_64 rng(34);
  ad::ParamSet p;
  p.add("a", random_tensor({4, 3}, rng));
  p.add("b", random_tensor({1, 3}, rng));
  p.add("c", random_tensor({4, 1}, rng));
  p.add("pos", random_tensor({2, 3}, rng));
  const auto res = nn::grad_check_fn(
      p,
      [](ad::Tape& t, ad::ParamSet& ps) {
        Var a = t.param(ps, "a");
        Var b = t.param(ps, "b");
        Var c = t.param(ps, "c");
        Var x = ad::mul_row(ad::add_row(a, b), ad::exp(ad::scale(b, 0.3)));
        x = ad::mul_col(x, ad::sigmoid(c));
        x = ad::add_positional(x, t.param(ps, "pos"), 2);
        Var y = ad::concat_cols({ad::slice_cols(x, 1, 3), ad::sum_cols(x)});
        y = ad::concat_rows({ad::slice_rows(y, 2, 4), ad::mean_rows(y), ad::broadcast_rows(b, 1)});
        Var m = ad::minimum(y, ad::clamp(ad::scale(y, 0.5), -0.4, 0.4));
        return ad::add(ad::sum(ad::square(m)), ad::sum(ad::log(ad::add_scalar(ad::square(y), 1.0))));
      },
      rng, 100);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("adamw: zero gradient and zero decay leaves parameters unchanged") {
  ad::ParamSet p;
  p.add("w", Tensor({1, 3}, {1.0, -2.0, 3.0}));
  const auto before = p.value("w").data;
  ad::Gradients g{{"w", Tensor({1, 3}, 0.0)}};
  ad::adamw_step(p, g, {.lr = 0.1});
  CHECK(p.value("w").data == before);
  CHECK(p.step() == 1);
}

TEST_CASE("adamw: decoupled weight decay") {
  ad::ParamSet p;
  p.add("w", Tensor({1, 1}, 2.0));
  ad::Gradients g{{"w", Tensor({1, 1}, 0.0)}};
  double expected = 2.0;
  for (int i = 0; i < 5; ++i) {
    ad::adamw_step(p, g, {.lr = 0.1, .weight_decay = 0.1});
    expected *= (1.0 - 0.01);
    CHECK(p.value("w").data[0] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("adamw converges on a convex scalar problem") {
  ad::ParamSet p;
  p.add("w", Tensor({1, 1}, 0.0));
  for (int i = 0; i < 5000; ++i) {
    ad::Tape tape;
    Var w = tape.param(p, "w");
    Var loss = ad::sum(ad::square(ad::add_scalar(w, -3.0)));
    tape.backward(loss);
    ad::adamw_step(p, tape.gradients(p), {.lr = 1e-2});
  }
  CHECK(std::abs(p.value("w").data[0] - 3.0) < 1e-3);
}

TEST_CASE("adamw rejects mismatched or non-finite gradients") {
  ad::ParamSet p;
  p.add("w", Tensor({1, 2}, 0.0));
  CHECK_THROWS_AS(ad::adamw_step(p, {{"w", Tensor({1, 3}, 0.0)}}, {}), ad::ShapeMismatch);
  CHECK_THROWS_AS(ad::adamw_step(p, {{"w", Tensor({1, 2}, {NAN, 0.0})}}, {}), ad::NonFinite);
}

TEST_CASE("forward passes are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(77);
    nn::NetworkSpec spec;
    spec.name = "det";
    spec.seq_len = 4;
    spec.layers.emplace_back(nn::Linear{3, 8, nn::Activation::Gelu});
    spec.layers.emplace_back(nn::CausalAttentionBlock{8, 4, 16});
    const ad::ParamSet p = nn::init_params(spec, rng);
    return nn::infer(spec, p, random_tensor({8, 3}, rng)).data;
  };
  CHECK(run() == run());
}
