#include "ptld/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace ptld::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_mat(Tensor& t) { return MapMat(t.data.data(), t.rows(), t.cols()); }
CMapMat as_mat(const Tensor& t) { return CMapMat(t.data.data(), t.rows(), t.cols()); }

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void require(bool cond, const char* op, const Tensor& a, const Tensor& b) {
  if (!cond) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

Tape* tape_of(Var a) {
  if (a.tape == nullptr) throw NoTape("variable is not attached to a tape");
  return a.tape;
}

Tape* tape_of(Var a, Var b) {
  Tape* t = tape_of(a);
  if (tape_of(b) != t) throw NoTape("variables belong to different tapes");
  return t;
}

// Element-wise unary op with derivative expressed through (x, y).
template <typename F, typename D>
Var unary(Var a, F f, D df) {
  Tape* t = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai, df](Tape& tp, int self) {
    const Tensor& xv = tp.value(ai);
    const Tensor& yv = tp.value(self);
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * df(xv.data[i], yv.data[i]);
  });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---- Tensor ----------------------------------------------------------------

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shp, double fill)
    : shape(std::move(shp)), data(shape_product(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> shp, const std::vector<double>& values)
    : Tensor(std::move(shp), Buffer(values.begin(), values.end())) {}

Tensor::Tensor(std::vector<std::size_t> shp, Buffer values)
    : shape(std::move(shp)), data(std::move(values)) {
  if (data.size() != shape_product(shape)) {
    throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::span<const double> values) {
  return Tensor({rows, cols}, std::vector<double>(values.begin(), values.end()));
}

std::size_t Tensor::rows() const {
  if (shape.size() == 2) return shape[0];
  if (shape.size() == 1) return 1;
  if (shape.empty()) return 1;
  return shape_product(shape) / shape.back();
}

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  return shape.back();
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

// ---- ParamSet ----------------------------------------------------------------

void ParamSet::add(const std::string& name, Tensor value) {
  Param p;
  p.m = Tensor(value.shape, 0.0);
  p.v = Tensor(value.shape, 0.0);
  p.value = std::move(value);
  params_[name] = std::move(p);
}

Tensor& ParamSet::value(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second.value;
}

const Tensor& ParamSet::value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second.value;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

std::uint64_t ParamSet::value_hash() const {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& [name, p] : params_) {
    h = fnv1a(name.data(), name.size(), h);
    for (auto d : p.value.shape) {
      const std::uint64_t dd = d;
      h = fnv1a(&dd, sizeof dd, h);
    }
    h = fnv1a(p.value.data.data(), p.value.data.size() * sizeof(double), h);
  }
  return h;
}

bool ParamSet::all_finite() const {
  return std::all_of(params_.begin(), params_.end(),
                     [](const auto& kv) { return kv.second.value.all_finite(); });
}

// ---- Var / Tape ----------------------------------------------------------------

const Tensor& Var::value() const {
  if (tape == nullptr) throw NoTape("variable is not attached to a tape");
  return tape->value(id);
}

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ShapeMismatch("item() on non-scalar " + shape_str(v.shape));
  return v.data[0];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(const ParamSet& set, const std::string& name) {
  const auto key = std::make_pair(&set, name);
  if (auto it = bound_.find(key); it != bound_.end()) return {this, it->second};
  Node n;
  n.value = set.value(name);
  n.requires_grad = true;
  n.owner = &set;
  n.name = name;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  bound_[key] = id;
  return {this, id};
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [this](int p) { return nodes_[p].requires_grad; });
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_.at(id);
  if (n.grad.data.size() != n.value.data.size()) n.grad = Tensor(n.value.shape, 0.0);
  return n.grad;
}

void Tape::backward(Var loss, double seed) {
  if (loss.tape != this) throw NoTape("loss was not recorded on this tape");
  if (loss.value().size() != 1) throw ShapeMismatch("backward() requires a scalar loss");
  for (auto& n : nodes_) n.grad = Tensor();
  grad(loss.id).data[0] = seed;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.data.empty()) continue;
    n.backward(*this, i);
  }
  backward_done_ = true;
}

Gradients Tape::gradients(const ParamSet& set) const {
  if (!backward_done_) throw NoTape("gradients requested before backward()");
  Gradients out;
  for (const auto& [name, p] : set.entries()) out[name] = Tensor(p.value.shape, 0.0);
  for (const auto& n : nodes_) {
    if (n.owner != &set || n.grad.data.empty()) continue;
    Tensor& g = out[n.name];
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
  }
  return out;
}

// ---- binary ops ----------------------------------------------------------------

Var add(Var a, Var b) {
  Tape* t = tape_of(a, b);
  require(a.shape() == b.shape(), "add", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i];
  const int ai = a.id, bi = b.id;
  return t->record(std::move(y), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
    }
  });
}

Var sub(Var a, Var b) { return add(a, neg(b)); }

Var mul(Var a, Var b) {
  Tape* t = tape_of(a, b);
  require(a.shape() == b.shape(), "mul", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b.value().data[i];
  const int ai = a.id, bi = b.id;
  return t->record(std::move(y), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var add_row(Var a, Var b) {
  Tape* t = tape_of(a, b);
  require(b.rows() == 1 && b.cols() == a.cols(), "add_row", a.value(), b.value());
  Tensor y = a.value();
  as_mat(y).rowwise() += as_mat(b.value()).row(0);
  const int ai = a.id, bi = b.id;
  return t->record(std::move(y), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) as_mat(tp.grad(ai)) += as_mat(g);
    if (tp.requires_grad(bi)) as_mat(tp.grad(bi)) += as_mat(g).colwise().sum();
  });
}

Var mul_row(Var a, Var b) {
  Tape* t = tape_of(a, b);
  require(b.rows() == 1 && b.cols() == a.cols(), "mul_row", a.value(), b.value());
  Tensor y = a.value();
  {
    auto ym = as_mat(y);
    auto bm = as_mat(b.value());
    for (Eigen::Index r = 0; r < ym.rows(); ++r) ym.row(r).array() *= bm.row(0).array();
  }
  const int ai = a.id, bi = b.id;
  return t->record(std::move(y), {ai, bi}, [ai, bi](Tape& tp, int self) {
    auto g = as_mat(tp.grad(self));
    auto av = as_mat(tp.value(ai));
    auto bv = as_mat(tp.value(bi));
    if (tp.requires_grad(ai)) {
      auto ga = as_mat(tp.grad(ai));
      for (Eigen::Index r = 0; r < g.rows(); ++r) ga.row(r).array() += g.row(r).array() * bv.row(0).array();
    }
    if (tp.requires_grad(bi)) {
      as_mat(tp.grad(bi)) += (g.array() * av.array()).matrix().colwise().sum();
    }
  });
}

Var mul_col(Var a, Var c) {
  Tape* t = tape_of(a, c);
  require(c.cols() == 1 && c.rows() == a.rows(), "mul_col", a.value(), c.value());
  Tensor y = a.value();
  {
    auto ym = as_mat(y);
    auto cm = as_mat(c.value());
    for (Eigen::Index r = 0; r < ym.rows(); ++r) ym.row(r) *= cm(r, 0);
  }
  const int ai = a.id, ci = c.id;
  return t->record(std::move(y), {ai, ci}, [ai, ci](Tape& tp, int self) {
    auto g = as_mat(tp.grad(self));
    auto av = as_mat(tp.value(ai));
    auto cv = as_mat(tp.value(ci));
    if (tp.requires_grad(ai)) {
      auto ga = as_mat(tp.grad(ai));
      for (Eigen::Index r = 0; r < g.rows(); ++r) ga.row(r) += g.row(r) * cv(r, 0);
    }
    if (tp.requires_grad(ci)) {
      auto gc = as_mat(tp.grad(ci));
      for (Eigen::Index r = 0; r < g.rows(); ++r) gc(r, 0) += g.row(r).dot(av.row(r));
    }
  });
}

Var matmul(Var a, Var b) {
  Tape* t = tape_of(a, b);
  require(a.cols() == b.rows(), "matmul", a.value(), b.value());
  Tensor y({a.rows(), b.cols()}, 0.0);
  as_mat(y).noalias() = as_mat(a.value()) * as_mat(b.value());
  const int ai = a.id, bi = b.id;
  return t->record(std::move(y), {ai, bi}, [ai, bi](Tape& tp, int self) {
    auto g = as_mat(tp.grad(self));
    if (tp.requires_grad(ai)) as_mat(tp.grad(ai)).noalias() += g * as_mat(tp.value(bi)).transpose();
    if (tp.requires_grad(bi)) as_mat(tp.grad(bi)).noalias() += as_mat(tp.value(ai)).transpose() * g;
  });
}

// ---- activations -------------------------------------------------------------

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var elu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
               [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Var gelu(Var a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var minimum(Var a, Var b) {
  Tape* t = tape_of(a, b);
  require(a.shape() == b.shape(), "minimum", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = std::min(y.data[i], b.value().data[i]);
  const int ai = a.id, bi = b.id;
  return t->record(std::move(y), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    const bool ga_on = tp.requires_grad(ai);
    const bool gb_on = tp.requires_grad(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      // Ties route to the first argument.
      if (av.data[i] <= bv.data[i]) {
        if (ga_on) tp.grad(ai).data[i] += g.data[i];
      } else if (gb_on) {
        tp.grad(bi).data[i] += g.data[i];
      }
    }
  });
}

// ---- reductions ----------------------------------------------------------------

Var sum(Var a) {
  Tape* t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const int ai = a.id;
  return t->record(Tensor({1, 1}, s), {ai}, [ai](Tape& tp, int self) {
    const double g = tp.grad(self).data[0];
    for (double& v : tp.grad(ai).data) v += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_cols(Var a) {
  Tape* t = tape_of(a);
  Tensor y({a.rows(), 1}, 0.0);
  as_mat(y) = as_mat(a.value()).rowwise().sum();
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai](Tape& tp, int self) {
    auto g = as_mat(tp.grad(self));
    auto ga = as_mat(tp.grad(ai));
    for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r).array() += g(r, 0);
  });
}

Var mean_rows(Var a) {
  Tape* t = tape_of(a);
  const double n = static_cast<double>(a.rows());
  Tensor y({1, a.cols()}, 0.0);
  as_mat(y) = as_mat(a.value()).colwise().sum() / n;
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai, n](Tape& tp, int self) {
    auto g = as_mat(tp.grad(self));
    auto ga = as_mat(tp.grad(ai));
    for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r) += g.row(0) / n;
  });
}

// ---- structural ----------------------------------------------------------------

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
  Tape* t = tape_of(parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (tape_of(p) != t) throw NoTape("concat across tapes");
    require(p.rows() == rows, "concat_cols", parts[0].value(), p.value());
    offsets.push_back(cols);
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor y({rows, cols}, 0.0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    as_mat(y).block(0, offsets[k], rows, parts[k].cols()) = as_mat(parts[k].value());
  }
  return t->record(std::move(y), ids, [ids, offsets](Tape& tp, int self) {
    auto g = as_mat(tp.grad(self));
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      auto ga = as_mat(tp.grad(ids[k]));
      ga += g.block(0, offsets[k], ga.rows(), ga.cols());
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
  Tape* t = tape_of(parts[0]);
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows", parts[0].value(), p.value());
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id);
  }
  Tensor y({rows, cols}, 0.0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::copy(parts[k].value().data.begin(), parts[k].value().data.end(),
              y.data.begin() + static_cast<std::ptrdiff_t>(offsets[k] * cols));
  }
  return t->record(std::move(y), ids, [ids, offsets, cols](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Tensor& ga = tp.grad(ids[k]);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += g.data[offsets[k] * cols + i];
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape* t = tape_of(a);
  if (!(begin <= end && end <= a.cols())) {
    throw ShapeMismatch("slice_cols out of range on " + shape_str(a.shape()));
  }
  const std::size_t rows = a.rows();
  Tensor y({rows, end - begin}, 0.0);
  as_mat(y) = as_mat(a.value()).block(0, begin, rows, end - begin);
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai, begin, end, rows](Tape& tp, int self) {
    as_mat(tp.grad(ai)).block(0, begin, rows, end - begin) += as_mat(tp.grad(self));
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape* t = tape_of(a);
  if (!(begin <= end && end <= a.rows())) {
    throw ShapeMismatch("slice_rows out of range on " + shape_str(a.shape()));
  }
  const std::size_t cols = a.cols();
  Tensor y({end - begin, cols}, 0.0);
  std::copy(a.value().data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
            a.value().data.begin() + static_cast<std::ptrdiff_t>(end * cols), y.data.begin());
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai, begin, cols](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[begin * cols + i] += g.data[i];
  });
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  Tape* t = tape_of(a);
  if (shape_product(shape) != a.value().size()) {
    throw ShapeMismatch("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor y(std::move(shape), a.value().data);
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
  });
}

Var broadcast_rows(Var a, std::size_t n) {
  Tape* t = tape_of(a);
  if (a.rows() != 1) throw ShapeMismatch("broadcast_rows expects a single row");
  const std::size_t cols = a.cols();
  Tensor y({n, cols}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(a.value().data.begin(), a.value().data.end(),
              y.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  const int ai = a.id;
  return t->record(std::move(y), {ai}, [ai](Tape& tp, int self) {
    as_mat(tp.grad(ai)) += as_mat(tp.grad(self)).colwise().sum();
  });
}

Var stop_gradient(Var a) {
  Tape* t = tape_of(a);
  return t->record(a.value(), {}, nullptr);
}

Var add_positional(Var x, Var pos, std::size_t seq_len) {
  Tape* t = tape_of(x, pos);
  if (seq_len == 0 || x.rows() % seq_len != 0 || pos.rows() < seq_len || pos.cols() != x.cols()) {
    throw ShapeMismatch("add_positional: " + shape_str(x.shape()) + " with " +
                        shape_str(pos.shape()) + " seq_len " + std::to_string(seq_len));
  }
  const std::size_t d = x.cols();
  Tensor y = x.value();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const std::size_t p = r % seq_len;
    for (std::size_t c = 0; c < d; ++c) y.data[r * d + c] += pos.value().data[p * d + c];
  }
  const int xi = x.id, pi = pos.id;
  return t->record(std::move(y), {xi, pi}, [xi, pi, seq_len, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
    }
    if (tp.requires_grad(pi)) {
      Tensor& gp = tp.grad(pi);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const std::size_t p = r % seq_len;
        for (std::size_t c = 0; c < d; ++c) gp.data[p * d + c] += g.data[r * d + c];
      }
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape* t = tape_of(x, gamma);
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeMismatch("layer_norm affine shape vs " + shape_str(x.shape()));
  }
  Tensor xhat({n, d}, 0.0);
  std::vector<double> inv_std(n);
  Tensor y({n, d}, 0.0);
  const auto& xv = x.value().data;
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xv[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xv[r * d + c] - mu) * (xv[r * d + c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xv[r * d + c] - mu) * inv_std[r];
      xhat.data[r * d + c] = h;
      y.data[r * d + c] = h * gamma.value().data[c] + beta.value().data[c];
    }
  }
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return t->record(std::move(y), {xi, gi, bi},
                   [xi, gi, bi, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       Tape& tp, int self) {
                     const Tensor& g = tp.grad(self);
                     const Tensor& gam = tp.value(gi);
                     if (tp.requires_grad(gi)) {
                       Tensor& gg = tp.grad(gi);
                       for (std::size_t i = 0; i < g.size(); ++i) gg.data[i % d] += g.data[i] * xhat.data[i];
                     }
                     if (tp.requires_grad(bi)) {
                       Tensor& gb = tp.grad(bi);
                       for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % d] += g.data[i];
                     }
                     if (tp.requires_grad(xi)) {
                       Tensor& gx = tp.grad(xi);
                       const double dd = static_cast<double>(d);
                       for (std::size_t r = 0; r < n; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t c = 0; c < d; ++c) {
                           const double gh = g.data[r * d + c] * gam.data[c];
                           s1 += gh;
                           s2 += gh * xhat.data[r * d + c];
                         }
                         for (std::size_t c = 0; c < d; ++c) {
                           const double gh = g.data[r * d + c] * gam.data[c];
                           gx.data[r * d + c] +=
                               inv_std[r] * (gh - s1 / dd - xhat.data[r * d + c] * s2 / dd);
                         }
                       }
                     }
                   });
}

std::size_t conv1d_out_len(std::size_t seq_len, std::size_t stride) {
  return (seq_len + stride - 1) / stride;
}

Var conv1d(Var x, Var weight, Var bias, std::size_t seq_len, std::size_t kernel,
           std::size_t stride, bool causal) {
  Tape* t = tape_of(x, weight);
  if (seq_len == 0 || stride == 0 || kernel == 0 || x.rows() % seq_len != 0) {
    throw ShapeMismatch("conv1d: rows " + std::to_string(x.rows()) + " not a multiple of seq_len " +
                        std::to_string(seq_len));
  }
  const std::size_t cin = x.cols();
  const std::size_t cout = weight.cols();
  if (weight.rows() != kernel * cin || bias.rows() != 1 || bias.cols() != cout) {
    throw ShapeMismatch("conv1d weight " + shape_str(weight.shape()) + " for input " +
                        shape_str(x.shape()));
  }
  const std::size_t batch = x.rows() / seq_len;
  const std::size_t tout = conv1d_out_len(seq_len, stride);
  // Tap k of output j reads input time anchor(j) - k (causal) or
  // anchor(j) + kernel/2 - k (centered).
  const std::ptrdiff_t shift = causal ? 0 : static_cast<std::ptrdiff_t>(kernel / 2);
  auto anchor = [=](std::size_t j) {
    return static_cast<std::ptrdiff_t>(seq_len - 1) - static_cast<std::ptrdiff_t>((tout - 1 - j) * stride);
  };
  // im2col: [B*T', K*Cin]
  Tensor cols({batch * tout, kernel * cin}, 0.0);
  const auto& xv = x.value().data;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < tout; ++j) {
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t tin = anchor(j) + shift - static_cast<std::ptrdiff_t>(k);
        if (tin < 0 || tin >= static_cast<std::ptrdiff_t>(seq_len)) continue;
        const double* src = &xv[(b * seq_len + static_cast<std::size_t>(tin)) * cin];
        double* dst = &cols.data[(b * tout + j) * kernel * cin + k * cin];
        std::copy(src, src + cin, dst);
      }
    }
  }
  Tensor y({batch * tout, cout}, 0.0);
  as_mat(y).noalias() = as_mat(cols) * as_mat(weight.value());
  as_mat(y).rowwise() += as_mat(bias.value()).row(0);
  const int xi = x.id, wi = weight.id, bi = bias.id;
  return t->record(
      std::move(y), {xi, wi, bi},
      [=, cols = std::move(cols)](Tape& tp, int self) {
        auto g = as_mat(tp.grad(self));
        if (tp.requires_grad(wi)) as_mat(tp.grad(wi)).noalias() += as_mat(cols).transpose() * g;
        if (tp.requires_grad(bi)) as_mat(tp.grad(bi)) += g.colwise().sum();
        if (tp.requires_grad(xi)) {
          Tensor gcols({batch * tout, kernel * cin}, 0.0);
          as_mat(gcols).noalias() = g * as_mat(tp.value(wi)).transpose();
          Tensor& gx = tp.grad(xi);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t j = 0; j < tout; ++j) {
              for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t tin = anchor(j) + shift - static_cast<std::ptrdiff_t>(k);
                if (tin < 0 || tin >= static_cast<std::ptrdiff_t>(seq_len)) continue;
                double* dst = &gx.data[(b * seq_len + static_cast<std::size_t>(tin)) * cin];
                const double* src = &gcols.data[(b * tout + j) * kernel * cin + k * cin];
                for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
      });
}

Var causal_attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads) {
  Tape* t = tape_of(q, k);
  if (tape_of(v) != t) throw NoTape("attention across tapes");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeMismatch("attention q/k/v shapes differ");
  }
  const std::size_t d = q.cols();
  if (seq_len == 0 || q.rows() % seq_len != 0 || heads == 0 || d % heads != 0) {
    throw ShapeMismatch("attention: bad seq_len/heads for " + shape_str(q.shape()));
  }
  const std::size_t batch = q.rows() / seq_len;
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[b][h] is a T x T lower-triangular row-stochastic matrix.
  std::vector<RowMat> probs(batch * heads);
  Tensor y({batch * seq_len, d}, 0.0);
  auto qm = as_mat(q.value());
  auto km = as_mat(k.value());
  auto vm = as_mat(v.value());
  auto ym = as_mat(y);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * seq_len);
    const auto T = static_cast<Eigen::Index>(seq_len);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto D = static_cast<Eigen::Index>(dh);
      RowMat s = qm.block(r0, c0, T, D) * km.block(r0, c0, T, D).transpose() * inv;
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = s(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < T; ++j) {
          if (j <= i) {
            s(i, j) = std::exp(s(i, j) - mx);
            z += s(i, j);
          } else {
            s(i, j) = 0.0;
          }
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= z;
      }
      ym.block(r0, c0, T, D).noalias() = s * vm.block(r0, c0, T, D);
      probs[b * heads + h] = std::move(s);
    }
  }
  const int qi = q.id, ki = k.id, vi = v.id;
  return t->record(
      std::move(y), {qi, ki, vi},
      [=, probs = std::move(probs)](Tape& tp, int self) {
        auto g = as_mat(tp.grad(self));
        auto qv = as_mat(tp.value(qi));
        auto kv = as_mat(tp.value(ki));
        auto vv = as_mat(tp.value(vi));
        const bool need_q = tp.requires_grad(qi);
        const bool need_k = tp.requires_grad(ki);
        const bool need_v = tp.requires_grad(vi);
        for (std::size_t b = 0; b < batch; ++b) {
          const auto r0 = static_cast<Eigen::Index>(b * seq_len);
          const auto T = static_cast<Eigen::Index>(seq_len);
          for (std::size_t h = 0; h < heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h * dh);
            const auto D = static_cast<Eigen::Index>(dh);
            const RowMat& p = probs[b * heads + h];
            const RowMat go = g.block(r0, c0, T, D);
            if (need_v) as_mat(tp.grad(vi)).block(r0, c0, T, D).noalias() += p.transpose() * go;
            if (!need_q && !need_k) continue;
            RowMat dp = go * vv.block(r0, c0, T, D).transpose();
            RowMat ds(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
              const double dot = dp.row(i).dot(p.row(i));
              for (Eigen::Index j = 0; j < T; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv;
            }
            if (need_q) as_mat(tp.grad(qi)).block(r0, c0, T, D).noalias() += ds * kv.block(r0, c0, T, D);
            if (need_k) as_mat(tp.grad(ki)).block(r0, c0, T, D).noalias() += ds.transpose() * qv.block(r0, c0, T, D);
          }
        }
      });
}

// ---- optimizer ---------------------------------------------------------------

void adamw_step(ParamSet& params, const Gradients& grads, const AdamWConfig& cfg) {
  for (const auto& [name, p] : params.entries()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ShapeMismatch("adamw: missing gradient for '" + name + "'");
    if (it->second.shape != p.value.shape) {
      throw ShapeMismatch("adamw: gradient shape mismatch for '" + name + "'");
    }
    if (!it->second.all_finite()) throw NonFinite("adamw: non-finite gradient for '" + name + "'");
  }
  params.bump_step();
  const double t = static_cast<double>(params.step());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params.entries()) {
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = g.data[i];
      p.m.data[i] = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * gi;
      p.v.data[i] = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = p.m.data[i] / bc1;
      const double vhat = p.v.data[i] / bc2;
      double w = p.value.data[i];
      w -= cfg.lr * cfg.weight_decay * w;
      w -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      p.value.data[i] = w;
    }
  }
}

double global_grad_norm(const std::vector<const Gradients*>& grads) {
  double s = 0.0;
  for (const Gradients* g : grads) {
    for (const auto& [_, t] : *g) {
      for (double v : t.data) s += v * v;
    }
  }
  return std::sqrt(s);
}

void scale_gradients(Gradients& grads, double factor) {
  for (auto& [_, t] : grads) {
    for (double& v : t.data) v *= factor;
  }
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace ptld::ad
