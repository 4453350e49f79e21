#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace leafseq {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  concat,
  sigmoid,
  tanh,
  relu,
  softmax_rows,
  log,
  embedding_lookup,
  slice,
  sum,
  mean,
  add_bias,
  // extensions used by the attention / pointer blocks
  exp,
  minimum,
  scale,
  mul_scalar,
  reshape,
  scatter_add,
  pick,
};

const char* op_name(OpKind kind);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::int64_t record = -1;  // index in the producing Graph, -1 for leaves

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    grad[i] += g;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major array of doubles with an optional gradient slot. Copies are
// handles: two Tensor objects may refer to the same storage (see same_storage).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Direct write access; meant for leaves (parameters, inputs), never for
  // values already consumed by a recorded graph.
  std::span<double> mutable_values() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag) const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad() const;
  void zero_grad() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  // Fresh leaf holding a copy of the values.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Tape of recorded operations. Constructing a Graph makes it the active tape
// for the current thread until it is destroyed; ops record into the active
// tape only when an input requires a gradient. Without an active tape ops
// run forward-only.
class Graph {
 public:
  struct Record {
    OpKind kind;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void(const detail::Node& out)> backward;
  };

  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active();

  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_[i]; }

  // Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
  void backward(const Tensor& loss);

  void push(Record record);

 private:
  std::vector<Record> records_;
  Graph* previous_;
};

inline void backward(Graph& graph, const Tensor& loss) { graph.backward(loss); }

// ---- primitives -----------------------------------------------------------
//
// Vectors are rank-1. matmul accepts (m,k)x(k,n), (k)x(k,n) -> (n) and
// (m,k)x(k) -> (m).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Axis 0 concatenation of rank-1 vectors or rank-2 matrices; axis 1 for rank-2.
Tensor concat(std::span<const Tensor> parts, std::size_t axis = 0);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis = 0);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
// Softmax over the last axis (a rank-1 tensor is one row). Max-subtracted.
Tensor softmax_rows(const Tensor& x);
// Natural log of max(x, floor). Gradient is zero where x < floor.
Tensor log(const Tensor& x, double floor = 0.0);
Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids);
// Half-open range [begin, end) along axis 0.
Tensor slice(const Tensor& x, std::size_t begin, std::size_t end);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// (m,n) + (n): bias broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor exp(const Tensor& x);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x * s where s holds exactly one element.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor reshape(const Tensor& x, Shape shape);
// out[index[i]] += x[i], out has `size` entries.
Tensor scatter_add(const Tensor& x, std::span<const std::int64_t> index, std::size_t size);
// One element as a shape-(1) tensor.
Tensor pick(const Tensor& x, std::size_t index);

Tensor stack_rows(std::span<const Tensor> rows);

struct OpArgs {
  std::vector<std::int64_t> indices;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t axis = 0;
  std::size_t size = 0;
  double value = 0.0;
  Shape shape;
};

// Uniform entry point over every primitive, used by tests and tooling.
Tensor forward_primitive(OpKind kind, std::span<const Tensor> inputs, const OpArgs& args = {});

// ---- verification -----------------------------------------------------------

// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// numeric from the five-point central stencil with step `eps`. Values of
// `params` are perturbed in place and restored.
double grad_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                  double eps = 1e-3);
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                  double eps = 1e-3);

// ---- serialization ----------------------------------------------------------
//
// rank (u64 LE), dims (u64 LE each), payload (f64 LE each).
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void write_u64(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64(std::istream& in);

}  // namespace leafseq
