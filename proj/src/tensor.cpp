#include "leafseq/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "leafseq/errors.hpp"

namespace leafseq {

using detail::Node;

namespace {

thread_local Graph* g_active = nullptr;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

[[noreturn]] void dim_error(OpKind kind, const std::string& what) {
  throw DimensionError(std::string(op_name(kind)) + ": " + what);
}

[[noreturn]] void dim_error(OpKind kind, const Tensor& a, const Tensor& b) {
  dim_error(kind, "incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

void require_defined(OpKind kind, const Tensor& t) {
  if (!t.defined()) dim_error(kind, "undefined operand");
}

// Builds the output node and records it when an input requires grad and a
// tape is active. The backward functor is only materialized when recording.
template <typename Backward>
Tensor emit(OpKind kind, Shape shape, std::vector<double> values,
            std::initializer_list<const Tensor*> inputs, Backward&& backward) {
  auto out = new_node(std::move(shape), std::move(values), false);
  Graph* graph = g_active;
  if (graph != nullptr) {
    bool needs = false;
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (needs) {
      out->requires_grad = true;
      Graph::Record rec{kind, {}, out, std::forward<Backward>(backward)};
      rec.inputs.reserve(inputs.size());
      for (const Tensor* t : inputs) rec.inputs.push_back(t->node());
      graph->push(std::move(rec));
    }
  }
  return Tensor(std::move(out));
}

template <typename Backward>
Tensor emit_many(OpKind kind, Shape shape, std::vector<double> values,
                 std::span<const Tensor> inputs, Backward&& backward) {
  auto out = new_node(std::move(shape), std::move(values), false);
  Graph* graph = g_active;
  if (graph != nullptr) {
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
    if (needs) {
      out->requires_grad = true;
      Graph::Record rec{kind, {}, out, std::forward<Backward>(backward)};
      for (const Tensor& t : inputs) rec.inputs.push_back(t.node());
      graph->push(std::move(rec));
    }
  }
  return Tensor(std::move(out));
}

template <typename F, typename D>
Tensor unary(OpKind kind, const Tensor& x, F&& f, D&& dfdx_from_xy) {
  require_defined(kind, x);
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  Node* xn = x.node().get();
  return emit(kind, x.shape(), std::move(y), {&x}, [xn, d = std::forward<D>(dfdx_from_xy)](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < out.value.size(); ++i) {
      xn->grad[i] += out.grad[i] * d(xn->value[i], out.value[i]);
    }
  });
}

void require_same_shape(OpKind kind, const Tensor& a, const Tensor& b) {
  require_defined(kind, a);
  require_defined(kind, b);
  if (a.shape() != b.shape()) dim_error(kind, a, b);
}

void put_bytes(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(buf, 8);
}

}  // namespace

// ---- shapes ----------------------------------------------------------------

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::concat: return "concat";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::relu: return "relu";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::log: return "log";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::slice: return "slice";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::add_bias: return "add_bias";
    case OpKind::exp: return "exp";
    case OpKind::minimum: return "minimum";
    case OpKind::scale: return "scale";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::reshape: return "reshape";
    case OpKind::scatter_add: return "scatter_add";
    case OpKind::pick: return "pick";
  }
  return "?";
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor: rank must be at least 1");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor: zero dimension in " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  node_ = new_node(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return node_ ? node_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("tensor: axis out of range for " + shape_string(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) return {};
  return node_->value;
}

std::span<double> Tensor::mutable_values() const {
  if (!node_) return {};
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return node_->value.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at: rank-2 access on " + shape_string(shape()));
  return node_->value.at(row * shape()[1] + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) const {
  if (node_) node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (!node_) return {};
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (node_) node_->grad.clear();
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(shape(), std::vector<double>(values().begin(), values().end()), requires_grad);
}

// ---- Graph -----------------------------------------------------------------

Graph::Graph() : previous_(g_active) { g_active = this; }

Graph::~Graph() { g_active = previous_; }

Graph* Graph::active() { return g_active; }

void Graph::push(Record record) {
  record.output->record = static_cast<std::int64_t>(records_.size());
  records_.push_back(std::move(record));
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  const auto idx = loss.node()->record;
  if (idx < 0 || static_cast<std::size_t>(idx) >= records_.size() ||
      records_[static_cast<std::size_t>(idx)].output != loss.node()) {
    throw ContractError("backward: loss was not produced by this graph");
  }
  loss.node()->accumulate(0, 1.0);
  for (auto i = idx; i >= 0; --i) {
    const Record& rec = records_[static_cast<std::size_t>(i)];
    if (rec.output->grad.empty()) continue;
    rec.backward(*rec.output);
  }
}

// ---- primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::matmul;
  require_defined(kind, a);
  require_defined(kind, b);
  if (a.rank() > 2 || b.rank() > 2) dim_error(kind, a, b);
  const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t k = a.rank() == 2 ? a.dim(1) : a.dim(0);
  const std::size_t kb = b.dim(0);
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  if (k != kb) dim_error(kind, a, b);
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    out_shape = {m, n};
  } else if (a.rank() == 2) {
    out_shape = {m};
  } else if (b.rank() == 2) {
    out_shape = {n};
  } else {
    out_shape = {1};
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit(kind, std::move(out_shape), std::move(c), {&a, &b}, [an, bn, m, k, n](const Node& out) {
    const double* dc = out.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bn->value.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * brow[j];
          an->grad[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an->value[i * k + p];
          if (aip == 0.0) continue;
          double* grow = bn->grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += aip * dc[i * n + j];
        }
      }
    }
  });
}

namespace {

template <typename F, typename DA, typename DB>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F&& f, DA&& da, DB&& db) {
  require_same_shape(kind, a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit(kind, a.shape(), std::move(y), {&a, &b},
              [an, bn, da = std::forward<DA>(da), db = std::forward<DB>(db)](const Node& out) {
                const std::size_t n = out.value.size();
                if (an->requires_grad) {
                  an->ensure_grad();
                  for (std::size_t i = 0; i < n; ++i) an->grad[i] += out.grad[i] * da(an->value[i], bn->value[i]);
                }
                if (bn->requires_grad) {
                  bn->ensure_grad();
                  for (std::size_t i = 0; i < n; ++i) bn->grad[i] += out.grad[i] * db(an->value[i], bn->value[i]);
                }
              });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::minimum, a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  constexpr auto kind = OpKind::concat;
  if (parts.empty()) dim_error(kind, "no operands");
  for (const auto& p : parts) require_defined(kind, p);
  const std::size_t rank = parts[0].rank();
  if (rank > 2 || axis >= rank) dim_error(kind, "axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  for (const auto& p : parts) {
    if (p.rank() != rank) dim_error(kind, parts[0], p);
    if (rank == 2 && p.dim(1 - axis) != parts[0].dim(1 - axis)) dim_error(kind, parts[0], p);
  }
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& p : parts) shape[axis] += p.dim(axis);
  std::vector<double> y;
  y.reserve(shape_numel(shape));
  std::vector<Node*> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node().get());
  if (axis == 0) {
    for (const auto& p : parts) y.insert(y.end(), p.values().begin(), p.values().end());
    return emit_many(kind, std::move(shape), std::move(y), parts, [nodes](const Node& out) {
      std::size_t offset = 0;
      for (Node* n : nodes) {
        const std::size_t len = n->value.size();
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) n->grad[i] += out.grad[offset + i];
        }
        offset += len;
      }
    });
  }
  const std::size_t rows = shape[0];
  const std::size_t cols = shape[1];
  for (std::size_t r = 0; r < rows; ++r) {
    for (const auto& p : parts) {
      const std::size_t c = p.dim(1);
      const auto v = p.values();
      y.insert(y.end(), v.begin() + static_cast<std::ptrdiff_t>(r * c), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    }
  }
  return emit_many(kind, std::move(shape), std::move(y), parts, [nodes, rows, cols](const Node& out) {
    std::size_t col0 = 0;
    for (Node* n : nodes) {
      const std::size_t c = n->shape[1];
      if (n->requires_grad) {
        n->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) n->grad[r * c + j] += out.grad[r * cols + col0 + j];
        }
      }
      col0 += c;
    }
  });
}

Tensor stack_rows(std::span<const Tensor> rows) {
  constexpr auto kind = OpKind::concat;
  if (rows.empty()) dim_error(kind, "stack of zero rows");
  const std::size_t n = rows[0].numel();
  for (const auto& r : rows) {
    require_defined(kind, r);
    if (r.rank() != 1 || r.numel() != n) dim_error(kind, rows[0], r);
  }
  std::vector<double> y;
  y.reserve(rows.size() * n);
  std::vector<Node*> nodes;
  for (const auto& r : rows) {
    y.insert(y.end(), r.values().begin(), r.values().end());
    nodes.push_back(r.node().get());
  }
  return emit_many(kind, Shape{rows.size(), n}, std::move(y), rows, [nodes, n](const Node& out) {
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      Node* node = nodes[r];
      if (!node->requires_grad) continue;
      node->ensure_grad();
      for (std::size_t j = 0; j < n; ++j) node->grad[j] += out.grad[r * n + j];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      OpKind::sigmoid, x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      OpKind::tanh, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      OpKind::relu, x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      OpKind::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x, double floor) {
  const double lo = std::max(floor, std::numeric_limits<double>::min());
  return unary(
      OpKind::log, x, [lo](double v) { return std::log(std::max(v, lo)); },
      [lo](double v, double) { return v >= lo ? 1.0 / v : 0.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      OpKind::scale, x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor softmax_rows(const Tensor& x) {
  constexpr auto kind = OpKind::softmax_rows;
  require_defined(kind, x);
  if (x.rank() > 2) dim_error(kind, "rank > 2: " + shape_string(x.shape()));
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = y.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
  Node* xn = x.node().get();
  return emit(kind, x.shape(), std::move(y), {&x}, [xn, rows, cols](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yv = out.value.data() + r * cols;
      const double* dy = out.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * yv[j];
      for (std::size_t j = 0; j < cols; ++j) xn->grad[r * cols + j] += yv[j] * (dy[j] - dot);
    }
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids) {
  constexpr auto kind = OpKind::embedding_lookup;
  require_defined(kind, table);
  if (table.rank() != 2) dim_error(kind, "table must be rank 2, got " + shape_string(table.shape()));
  if (ids.empty()) dim_error(kind, "empty id list");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  const auto tv = table.values();
  std::vector<double> y;
  y.reserve(ids.size() * d);
  for (auto r : rows) y.insert(y.end(), tv.begin() + static_cast<std::ptrdiff_t>(r * d), tv.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  Node* tn = table.node().get();
  return emit(kind, Shape{ids.size(), d}, std::move(y), {&table}, [tn, rows = std::move(rows), d](const Node& out) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) tn->grad[rows[i] * d + j] += out.grad[i * d + j];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  constexpr auto kind = OpKind::slice;
  require_defined(kind, x);
  if (x.rank() > 2 || begin >= end || end > x.dim(0)) {
    dim_error(kind, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + shape_string(x.shape()));
  }
  const std::size_t stride = x.rank() == 2 ? x.dim(1) : 1;
  Shape shape = x.shape();
  shape[0] = end - begin;
  const auto xv = x.values();
  std::vector<double> y(xv.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                        xv.begin() + static_cast<std::ptrdiff_t>(end * stride));
  Node* xn = x.node().get();
  const std::size_t off = begin * stride;
  return emit(kind, std::move(shape), std::move(y), {&x}, [xn, off](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < out.value.size(); ++i) xn->grad[off + i] += out.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  constexpr auto kind = OpKind::sum;
  require_defined(kind, x);
  double s = 0.0;
  for (double v : x.values()) s += v;
  Node* xn = x.node().get();
  return emit(kind, Shape{1}, {s}, {&x}, [xn](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += out.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  constexpr auto kind = OpKind::mean;
  require_defined(kind, x);
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  Node* xn = x.node().get();
  return emit(kind, Shape{1}, {s / n}, {&x}, [xn, n](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += out.grad[0] / n;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  constexpr auto kind = OpKind::add_bias;
  require_defined(kind, x);
  require_defined(kind, bias);
  if (bias.rank() != 1 || x.rank() > 2 || x.shape().back() != bias.dim(0)) dim_error(kind, x, bias);
  const std::size_t cols = bias.dim(0);
  const std::size_t rows = x.numel() / cols;
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = xv[r * cols + j] + bv[j];
  }
  Node* xn = x.node().get();
  Node* bn = bias.node().get();
  return emit(kind, x.shape(), std::move(y), {&x, &bias}, [xn, bn, rows, cols](const Node& out) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) xn->grad[i] += out.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) bn->grad[j] += out.grad[r * cols + j];
      }
    }
  });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  constexpr auto kind = OpKind::mul_scalar;
  require_defined(kind, x);
  require_defined(kind, s);
  if (s.numel() != 1) dim_error(kind, x, s);
  const double k = s.values()[0];
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * k;
  Node* xn = x.node().get();
  Node* sn = s.node().get();
  return emit(kind, x.shape(), std::move(y), {&x, &s}, [xn, sn](const Node& out) {
    const double k = sn->value[0];
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) xn->grad[i] += out.grad[i] * k;
    }
    if (sn->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * xn->value[i];
      sn->accumulate(0, acc);
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  constexpr auto kind = OpKind::reshape;
  require_defined(kind, x);
  if (shape.empty() || shape_numel(shape) != x.numel()) {
    dim_error(kind, "cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<double> y(x.values().begin(), x.values().end());
  Node* xn = x.node().get();
  return emit(kind, std::move(shape), std::move(y), {&x}, [xn](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) xn->grad[i] += out.grad[i];
  });
}

Tensor scatter_add(const Tensor& x, std::span<const std::int64_t> index, std::size_t size) {
  constexpr auto kind = OpKind::scatter_add;
  require_defined(kind, x);
  if (x.rank() != 1 || index.size() != x.numel() || size == 0) {
    dim_error(kind, "index list of " + std::to_string(index.size()) + " for " + shape_string(x.shape()));
  }
  std::vector<std::size_t> idx(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= size) {
      throw std::out_of_range("scatter_add: index " + std::to_string(index[i]) + " outside [0," + std::to_string(size) + ")");
    }
    idx[i] = static_cast<std::size_t>(index[i]);
  }
  std::vector<double> y(size, 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) y[idx[i]] += xv[i];
  Node* xn = x.node().get();
  return emit(kind, Shape{size}, std::move(y), {&x}, [xn, idx = std::move(idx)](const Node& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) xn->grad[i] += out.grad[idx[i]];
  });
}

Tensor pick(const Tensor& x, std::size_t index) {
  constexpr auto kind = OpKind::pick;
  require_defined(kind, x);
  if (index >= x.numel()) {
    throw std::out_of_range("pick: index " + std::to_string(index) + " outside tensor of " + std::to_string(x.numel()));
  }
  Node* xn = x.node().get();
  return emit(kind, Shape{1}, {x.values()[index]}, {&x}, [xn, index](const Node& out) {
    if (xn->requires_grad) xn->accumulate(index, out.grad[0]);
  });
}

Tensor forward_primitive(OpKind kind, std::span<const Tensor> in, const OpArgs& args) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      dim_error(kind, "expected " + std::to_string(n) + " operands, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::concat: return concat(in, args.axis);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::tanh: need(1); return tanh(in[0]);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::softmax_rows: need(1); return softmax_rows(in[0]);
    case OpKind::log: need(1); return log(in[0], args.value);
    case OpKind::embedding_lookup: need(1); return embedding_lookup(in[0], args.indices);
    case OpKind::slice: need(1); return slice(in[0], args.begin, args.end);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::add_bias: need(2); return add_bias(in[0], in[1]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::minimum: need(2); return minimum(in[0], in[1]);
    case OpKind::scale: need(1); return scale(in[0], args.value);
    case OpKind::mul_scalar: need(2); return mul_scalar(in[0], in[1]);
    case OpKind::reshape: need(1); return reshape(in[0], args.shape);
    case OpKind::scatter_add: need(1); return scatter_add(in[0], args.indices, args.size);
    case OpKind::pick: need(1); return pick(in[0], args.begin);
  }
  dim_error(kind, "unknown op");
}

// ---- grad check --------------------------------------------------------------

double grad_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params, double eps) {
  if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
  auto eval = [&]() {
    Graph* saved = g_active;
    g_active = nullptr;
    double v = 0.0;
    try {
      v = loss_fn().item();
    } catch (...) {
      g_active = saved;
      throw;
    }
    g_active = saved;
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  std::vector<bool> saved_flags;
  for (const auto& p : params) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Graph tape;
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite function value");
    tape.backward(loss);
    for (const auto& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.numel(), 0.0);
      }
    }
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = params[k].mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      auto at = [&](double offset) {
        v[i] = orig + offset;
        return eval();
      };
      const double near = at(eps) - at(-eps);
      const double far = at(2.0 * eps) - at(-2.0 * eps);
      v[i] = orig;
      const double numeric = (8.0 * near - far) / (12.0 * eps);
      const double a = analytic[k][i];
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].zero_grad();
    params[k].set_requires_grad(saved_flags[k]);
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double eps) {
  Tensor x = point.clone(true);
  std::vector<Tensor> params{x};
  return grad_check([&]() { return fn(x); }, params, eps);
}

// ---- serialization -------------------------------------------------------------

void write_u64(std::ostream& out, std::uint64_t v) { put_bytes(out, v); }

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (in.gcount() != 8) throw IoError("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u64(out, t.rank());
  for (auto d : t.shape()) write_u64(out, d);
  for (double v : t.values()) put_bytes(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  const auto rank = read_u64(in);
  if (rank == 0 || rank > 8) throw IoError("tensor record: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    d = read_u64(in);
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw IoError("tensor record: implausible dimension");
    n *= d;
    if (n > (std::uint64_t{1} << 34)) throw IoError("tensor record: payload too large");
  }
  std::vector<double> values(n);
  for (auto& v : values) v = std::bit_cast<double>(read_u64(in));
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace leafseq
