#pragma once

// Reverse-mode differentiation over dense row-major double tensors.
//
// A Tape owns every intermediate value created during a forward pass. Vars are
// cheap handles (tape pointer + node index). Parameters live in a ParamSet and
// are bound to a tape with Tape::param(); after Tape::backward() the gradient
// of every bound parameter can be read back with Tape::gradients().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <new>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::ad {

class ShapeMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoTape : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-byte aligned storage keeps Eigen's vectorized loops independent of
// where a buffer happens to land, so results are bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Tensor {
  std::vector<std::size_t> shape;
  Buffer data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shp, double fill = 0.0);
  Tensor(std::vector<std::size_t> shp, const std::vector<double>& values);
  Tensor(std::vector<std::size_t> shp, Buffer values);
  Tensor(std::vector<std::size_t> shp, std::initializer_list<double> values)
      : Tensor(std::move(shp), Buffer(values)) {}

  static Tensor row(std::span<const double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::span<const double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  bool all_finite() const;
  std::vector<double> vec() const { return {data.begin(), data.end()}; }
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

struct Param {
  Tensor value;
  Tensor m;
  Tensor v;
};

using Gradients = std::map<std::string, Tensor>;

/// Named parameters plus AdamW moments. Iteration order is name order.
class ParamSet {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  const std::map<std::string, Param>& entries() const { return params_; }
  std::map<std::string, Param>& entries() { return params_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }
  void bump_step() { ++step_; }
  std::size_t parameter_count() const;
  // FNV-1a over names, shapes and value bytes (moments excluded).
  std::uint64_t value_hash() const;
  bool all_finite() const;

 private:
  std::map<std::string, Param> params_;
  std::int64_t step_ = 0;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var constant(Tensor value);
  Var param(const ParamSet& set, const std::string& name);

  // Internal: used by op implementations.
  Var record(Tensor value, std::vector<int> parents, BackwardFn fn);

  void backward(Var loss, double seed = 1.0);

  // Gradient for every parameter of `set` bound to this tape; parameters not
  // reached by the loss get zero tensors.
  Gradients gradients(const ParamSet& set) const;

  const Tensor& value(int id) const { return nodes_.at(id).value; }
  Tensor& grad(int id);
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  bool has_run_backward() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
    const ParamSet* owner = nullptr;
    std::string name;
  };
  std::vector<Node> nodes_;
  std::map<std::pair<const ParamSet*, std::string>, int> bound_;
  bool backward_done_ = false;
};

// ---- element-wise and structural ops ---------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);
// a[N, D] + b[1, D]
Var add_row(Var a, Var b);
// a[N, D] * b[1, D]
Var mul_row(Var a, Var b);
// a[N, D] * c[N, 1]
Var mul_col(Var a, Var c);
Var matmul(Var a, Var b);
Var tanh(Var a);
Var elu(Var a);
Var gelu(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var minimum(Var a, Var b);
// Gradient passes only where lo < a < hi.
Var clamp(Var a, double lo, double hi);
Var sum(Var a);
Var mean(Var a);
// [N, D] -> [N, 1]
Var sum_cols(Var a);
// [N, D] -> [1, D]
Var mean_rows(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var reshape(Var a, std::vector<std::size_t> shape);
// [1, D] repeated to [N, D]
Var broadcast_rows(Var a, std::size_t n);
// Value-identical; contributes no gradient to its input.
Var stop_gradient(Var a);

// x[B*T, D] + pos[0:T, :] for each of the B sequences.
Var add_positional(Var x, Var pos, std::size_t seq_len);

// Row-wise layer norm with affine gamma/beta [1, D].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// x[B*T, Cin] -> [B*T', Cout]; weight [K*Cin, Cout], bias [1, Cout].
// Output j of a sequence sits on input time T-1-(T'-1-j)*stride. Causal mode
// only reads inputs at or before that time (zero left padding).
Var conv1d(Var x, Var weight, Var bias, std::size_t seq_len, std::size_t kernel,
           std::size_t stride, bool causal);
std::size_t conv1d_out_len(std::size_t seq_len, std::size_t stride);

// Multi-head causal self-attention core (no projections). q, k, v: [B*T, D].
Var causal_attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads);

// ---- optimizer ---------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

void adamw_step(ParamSet& params, const Gradients& grads, const AdamWConfig& cfg);

double global_grad_norm(const std::vector<const Gradients*>& grads);
void scale_gradients(Gradients& grads, double factor);

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace ptld::ad
