// Copyright 2026 The Sherlock Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a handle: copies share the same underlying node, the way a
// parameter list and a model struct can refer to the same weights. Operations
// never modify their inputs; they allocate a result node and, when any input
// requires a gradient, record the inputs plus a backward rule on that node.
// GradTape::record walks those links from a scalar loss and produces a
// topological order in which backward rules are replayed.

#ifndef SHERLOCK_TENSOR_HPP_
#define SHERLOCK_TENSOR_HPP_

#include <Eigen/Core>
#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace sherlock {

using Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline thread_local bool grad_enabled = true;
inline thread_local bool finite_checks = false;

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Array& grad_out)> backward;

  void accumulate(const Array& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When enabled, every operation result is checked for NaN/Inf and a
/// std::domain_error names the offending operation.
inline void set_finite_checks(bool on) { detail::finite_checks = on; }
inline bool finite_checks_enabled() { return detail::finite_checks; }

template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Node = detail::Node<Scalar>;
  using Array = typename Node::Array;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;

  Tensor(Shape shape, Array data, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, data has " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Zero(n), requires_grad);
  }
  static Tensor constant(Shape shape, Scalar v, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, v), requires_grad);
  }
  static Tensor scalar(Scalar v) { return constant({}, v); }

  /// Internal: wraps an existing node.
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  /// Dimension `i`; negative values count from the back.
  Index dim(Index i) const {
    const Index r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("dim " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }
  Index size() const { return node_->value.size(); }

  const Array& data() const { return node_->value; }
  /// Mutable access for optimizers and initializers. Not recorded.
  Array& mutable_data() { return node_->value; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Rows are the flattened leading dimensions, columns the last dimension.
  Eigen::Map<const Matrix> matrix() const {
    const Index cols = rank() == 0 ? 1 : dim(-1);
    return Eigen::Map<const Matrix>(node_->value.data(), size() / cols, cols);
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Array& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }
  void accumulate_grad(const Array& g) const { node_->accumulate(g); }

  /// New leaf holding a copy of the values, outside any graph.
  Tensor detach() const { return Tensor(shape(), data(), false); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Builds the result of an operation. `backward` receives d(loss)/d(result)
/// and must push contributions into the inputs via accumulate_grad. It is
/// only stored when at least one input requires a gradient.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_result(const char* op, Shape shape, typename Tensor<Scalar>::Array value,
                           std::vector<Tensor<Scalar>> inputs, Backward&& backward) {
  if (detail::finite_checks && !value.allFinite()) {
    throw std::domain_error(std::string("non-finite value produced by ") + op);
  }
  Tensor<Scalar> out(std::move(shape), std::move(value));
  if (!detail::grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<Scalar>& t) { return t.requires_grad(); });
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (auto& in : inputs) {
    if (in.requires_grad()) node.inputs.push_back(in.node());
  }
  node.backward = std::forward<Backward>(backward);
  return out;
}

/// Topologically ordered record of the operations that produced a loss.
template <typename Scalar>
class GradTape {
 public:
  using Node = detail::Node<Scalar>;

  static GradTape record(const Tensor<Scalar>& loss) {
    GradTape tape;
    tape.loss_ = loss;
    if (!loss.requires_grad()) return tape;
    // Iterative post-order DFS; producers land before their consumers.
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<Node*>& entries() const { return order_; }

  /// Seeds d(loss)/d(loss) = 1 and replays backward rules in reverse order.
  /// Gradients accumulate into leaves until they are zeroed.
  void backward() const {
    if (loss_.size() != 1 || loss_.rank() > 1) {
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss_.shape()));
    }
    if (order_.empty()) return;
    // Interior gradients from an earlier pass must not leak into this one.
    for (Node* n : order_) {
      if (n->backward) n->grad.resize(0);
    }
    order_.back()->accumulate(Node::Array::Ones(1));
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(n->grad);
    }
  }

 private:
  Tensor<Scalar> loss_;
  std::vector<Node*> order_;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  GradTape<Scalar>::record(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with trailing-dimension broadcasting: the smaller
// operand's shape must equal a suffix of the larger one's.

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinaryOp { Add, Sub, Mul };

template <typename Scalar>
using RowArray = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
Tensor<Scalar> binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, BinaryOp op, const char* name) {
  using Array = typename Tensor<Scalar>::Array;
  using Rows = RowArray<Scalar>;
  const bool b_small = is_suffix(b.shape(), a.shape());
  const bool a_small = !b_small && is_suffix(a.shape(), b.shape());
  if (!b_small && !a_small) {
    throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                     shape_str(b.shape()));
  }
  const Shape out_shape = b_small ? a.shape() : b.shape();
  const Index inner = b_small ? b.size() : a.size();
  const Index outer = numel(out_shape) / std::max<Index>(inner, 1);

  // Expand the small operand to the full grid.
  auto expand = [outer, inner](const Array& v) -> Rows {
    return Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>>(v.data(), inner).replicate(outer, 1);
  };
  auto view = [outer, inner](const Array& v) {
    return Eigen::Map<const Rows>(v.data(), outer, inner);
  };
  auto reduce = [outer, inner](const Rows& g) -> Array {
    Array r = g.colwise().sum().transpose();
    return r;
  };

  const Rows lhs = b_small ? Rows(view(a.data())) : expand(a.data());
  const Rows rhs = b_small ? expand(b.data()) : Rows(view(b.data()));
  Rows out;
  switch (op) {
    case BinaryOp::Add: out = lhs + rhs; break;
    case BinaryOp::Sub: out = lhs - rhs; break;
    case BinaryOp::Mul: out = lhs * rhs; break;
  }
  Array flat = Eigen::Map<const Array>(out.data(), out.size());

  return make_result<Scalar>(
      name, out_shape, std::move(flat), {a, b},
      [a, b, op, b_small, outer, inner, expand, view, reduce](const Array& g) mutable {
        const Rows G = Eigen::Map<const Rows>(g.data(), outer, inner);
        auto emit = [&](const Tensor<Scalar>& t, bool small, const Rows& full) {
          if (!t.requires_grad()) return;
          if (small) {
            t.accumulate_grad(reduce(full));
          } else {
            t.accumulate_grad(Eigen::Map<const Array>(full.data(), full.size()));
          }
        };
        switch (op) {
          case BinaryOp::Add:
            emit(a, !b_small, G);
            emit(b, b_small, G);
            break;
          case BinaryOp::Sub:
            emit(a, !b_small, G);
            emit(b, b_small, Rows(-G));
            break;
          case BinaryOp::Mul: {
            const Rows A = b_small ? Rows(view(a.data())) : expand(a.data());
            const Rows B = b_small ? expand(b.data()) : Rows(view(b.data()));
            if (a.requires_grad()) emit(a, !b_small, Rows(G * B));
            if (b.requires_grad()) emit(b, b_small, Rows(G * A));
            break;
          }
        }
      });
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(a, b, detail::BinaryOp::Add, "add");
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(a, b, detail::BinaryOp::Sub, "sub");
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(a, b, detail::BinaryOp::Mul, "mul");
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar s) {
  using Array = typename Tensor<Scalar>::Array;
  return make_result<Scalar>("scale", x.shape(), x.data() * s, {x},
                             [x, s](const Array& g) mutable { x.accumulate_grad(g * s); });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  using Array = typename Tensor<Scalar>::Array;
  Array v(1);
  v[0] = x.data().sum();
  const Index n = x.size();
  return make_result<Scalar>("sum", {}, std::move(v), {x},
                             [x, n](const Array& g) mutable { x.accumulate_grad(Array::Constant(n, g[0])); });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

// ---------------------------------------------------------------------------
// Matrix products.

/// a: [..., m, k]. b: [k, n] (shared across the batch) or [..., k, n] with the
/// same leading dimensions as a. Result: [..., m, n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using T = Tensor<Scalar>;
  using Array = typename T::Array;
  using Matrix = typename T::Matrix;
  using CMap = Eigen::Map<const Matrix>;
  using MMap = Eigen::Map<Matrix>;
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) fail();
  const Index m = a.dim(-2), k = a.dim(-1);
  if (b.dim(-2) != k) fail();
  const Index n = b.dim(-1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  if (b.rank() == 2) {
    const Index rows = a.size() / k;
    Array out(rows * n);
    MMap(out.data(), rows, n).noalias() = CMap(a.data().data(), rows, k) * CMap(b.data().data(), k, n);
    return make_result<Scalar>("matmul", out_shape, std::move(out), {a, b},
                               [a, b, rows, k, n](const Array& g) mutable {
                                 CMap G(g.data(), rows, n);
                                 if (a.requires_grad()) {
                                   Array ga(rows * k);
                                   MMap(ga.data(), rows, k).noalias() = G * CMap(b.data().data(), k, n).transpose();
                                   a.accumulate_grad(ga);
                                 }
                                 if (b.requires_grad()) {
                                   Array gb(k * n);
                                   MMap(gb.data(), k, n).noalias() = CMap(a.data().data(), rows, k).transpose() * G;
                                   b.accumulate_grad(gb);
                                 }
                               });
  }

  if (b.rank() != a.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    fail();
  }
  const Index batch = a.size() / (m * k);
  Array out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    MMap(out.data() + i * m * n, m, n).noalias() =
        CMap(a.data().data() + i * m * k, m, k) * CMap(b.data().data() + i * k * n, k, n);
  }
  return make_result<Scalar>(
      "bmm", out_shape, std::move(out), {a, b}, [a, b, batch, m, k, n](const Array& g) mutable {
        if (a.requires_grad()) {
          Array ga(batch * m * k);
          for (Index i = 0; i < batch; ++i) {
            MMap(ga.data() + i * m * k, m, k).noalias() =
                CMap(g.data() + i * m * n, m, n) * CMap(b.data().data() + i * k * n, k, n).transpose();
          }
          a.accumulate_grad(ga);
        }
        if (b.requires_grad()) {
          Array gb(batch * k * n);
          for (Index i = 0; i < batch; ++i) {
            MMap(gb.data() + i * k * n, k, n).noalias() =
                CMap(a.data().data() + i * m * k, m, k).transpose() * CMap(g.data() + i * m * n, m, n);
          }
          b.accumulate_grad(gb);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  using Array = typename Tensor<Scalar>::Array;
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result<Scalar>("reshape", std::move(shape), x.data(), {x},
                             [x](const Array& g) mutable { x.accumulate_grad(g); });
}

namespace detail {

inline std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (Index i = static_cast<Index>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// out[i0..] = in[i_perm...], i.e. out axis j walks input axis perm[j].
template <typename Array>
Array permute_values(const Array& in, const Shape& in_shape, const std::vector<Index>& perm) {
  const std::size_t r = in_shape.size();
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(r);
  std::vector<Index> step(r);
  for (std::size_t j = 0; j < r; ++j) {
    out_shape[j] = in_shape[perm[j]];
    step[j] = in_strides[perm[j]];
  }
  Array out(in.size());
  if (in.size() == 0) return out;
  std::vector<Index> idx(r, 0);
  Index src = 0;
  for (Index o = 0; o < in.size(); ++o) {
    out[o] = in[src];
    for (Index j = static_cast<Index>(r) - 1; j >= 0; --j) {
      if (++idx[j] < out_shape[j]) {
        src += step[j];
        break;
      }
      src -= step[j] * (out_shape[j] - 1);
      idx[j] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, std::vector<Index> perm) {
  using Array = typename Tensor<Scalar>::Array;
  const Index r = x.rank();
  std::vector<Index> check = perm;
  std::sort(check.begin(), check.end());
  for (Index i = 0; i < static_cast<Index>(check.size()); ++i) {
    if (static_cast<Index>(check.size()) != r || check[i] != i) {
      throw ShapeError("permute: invalid permutation for " + shape_str(x.shape()));
    }
  }
  Shape out_shape(r);
  std::vector<Index> inverse(r);
  for (Index j = 0; j < r; ++j) {
    out_shape[j] = x.shape()[perm[j]];
    inverse[perm[j]] = j;
  }
  Array out = detail::permute_values(x.data(), x.shape(), perm);
  return make_result<Scalar>("permute", out_shape, std::move(out), {x},
                             [x, out_shape, inverse](const Array& g) mutable {
                               x.accumulate_grad(detail::permute_values(g, out_shape, inverse));
                             });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, Index d0 = -2, Index d1 = -1) {
  const Index r = x.rank();
  if (d0 < 0) d0 += r;
  if (d1 < 0) d1 += r;
  if (d0 < 0 || d1 < 0 || d0 >= r || d1 >= r) {
    throw ShapeError("transpose: axes out of range for " + shape_str(x.shape()));
  }
  std::vector<Index> perm(r);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::swap(perm[d0], perm[d1]);
  return permute(x, std::move(perm));
}

namespace detail {

// (outer, axis length, inner) decomposition around `axis`.
struct AxisSplit {
  Index outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, Index axis) {
  AxisSplit r;
  for (Index i = 0; i < axis; ++i) r.outer *= s[i];
  r.length = s[axis];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) r.inner *= s[i];
  return r;
}

inline Index normalize_axis(Index axis, Index rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  using Array = typename Tensor<Scalar>::Array;
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  std::vector<Index> widths;  // contiguous chunk per outer index, per part
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: incompatible shapes " + shape_str(p.shape()) + " and " + shape_str(parts[0].shape()));
    out_shape[axis] += p.shape()[axis];
    widths.push_back(detail::split_at(p.shape(), axis).length * detail::split_at(p.shape(), axis).inner);
  }
  const auto split = detail::split_at(out_shape, axis);
  const Index row = split.length * split.inner;
  Array out(numel(out_shape));
  Index offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    for (Index o = 0; o < split.outer; ++o) {
      out.segment(o * row + offset, widths[i]) = parts[i].data().segment(o * widths[i], widths[i]);
    }
    offset += widths[i];
  }
  return make_result<Scalar>("concat", out_shape, std::move(out), parts,
                             [parts, widths, split, row](const Array& g) mutable {
                               Index offset = 0;
                               for (std::size_t i = 0; i < parts.size(); ++i) {
                                 if (parts[i].requires_grad()) {
                                   Array gi(split.outer * widths[i]);
                                   for (Index o = 0; o < split.outer; ++o) {
                                     gi.segment(o * widths[i], widths[i]) = g.segment(o * row + offset, widths[i]);
                                   }
                                   parts[i].accumulate_grad(gi);
                                 }
                                 offset += widths[i];
                               }
                             });
}

/// Gather along `axis`; indices may repeat (their gradients add up).
template <typename Scalar>
Tensor<Scalar> index_select(const Tensor<Scalar>& x, Index axis, std::vector<Index> indices) {
  using Array = typename Tensor<Scalar>::Array;
  axis = detail::normalize_axis(axis, x.rank(), "index_select");
  const auto split = detail::split_at(x.shape(), axis);
  for (Index i : indices) {
    if (i < 0 || i >= split.length) {
      throw std::out_of_range("index_select: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  const Index k = static_cast<Index>(indices.size());
  out_shape[axis] = k;
  Array out(split.outer * k * split.inner);
  for (Index o = 0; o < split.outer; ++o) {
    for (Index j = 0; j < k; ++j) {
      out.segment((o * k + j) * split.inner, split.inner) =
          x.data().segment((o * split.length + indices[j]) * split.inner, split.inner);
    }
  }
  return make_result<Scalar>("index_select", out_shape, std::move(out), {x},
                             [x, split, k, indices](const Array& g) mutable {
                               Array gx = Array::Zero(x.size());
                               for (Index o = 0; o < split.outer; ++o) {
                                 for (Index j = 0; j < k; ++j) {
                                   gx.segment((o * split.length + indices[j]) * split.inner, split.inner) +=
                                       g.segment((o * k + j) * split.inner, split.inner);
                                 }
                               }
                               x.accumulate_grad(gx);
                             });
}

/// Per-batch-row gather along axis 1: x is [B, N, ...] and indices[b] lists
/// the rows of batch element b to keep. Every list must have the same length.
template <typename Scalar>
Tensor<Scalar> batch_gather(const Tensor<Scalar>& x, const std::vector<std::vector<Index>>& indices) {
  using Array = typename Tensor<Scalar>::Array;
  if (x.rank() < 2 || static_cast<Index>(indices.size()) != x.dim(0)) {
    throw ShapeError("batch_gather: need one index list per batch row of " + shape_str(x.shape()));
  }
  const Index B = x.dim(0), N = x.dim(1);
  const Index inner = x.size() / (B * N);
  const Index k = static_cast<Index>(indices.front().size());
  for (const auto& row : indices) {
    if (static_cast<Index>(row.size()) != k) throw ShapeError("batch_gather: ragged index lists");
    for (Index i : row) {
      if (i < 0 || i >= N) throw std::out_of_range("batch_gather: index out of range");
    }
  }
  Shape out_shape = x.shape();
  out_shape[1] = k;
  Array out(B * k * inner);
  for (Index b = 0; b < B; ++b) {
    for (Index j = 0; j < k; ++j) {
      out.segment((b * k + j) * inner, inner) = x.data().segment((b * N + indices[b][j]) * inner, inner);
    }
  }
  return make_result<Scalar>("batch_gather", out_shape, std::move(out), {x},
                             [x, indices, B, N, k, inner](const Array& g) mutable {
                               Array gx = Array::Zero(x.size());
                               for (Index b = 0; b < B; ++b) {
                                 for (Index j = 0; j < k; ++j) {
                                   gx.segment((b * N + indices[b][j]) * inner, inner) +=
                                       g.segment((b * k + j) * inner, inner);
                                 }
                               }
                               x.accumulate_grad(gx);
                             });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization.

/// Max-subtracted softmax along `axis`.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis = -1) {
  using Array = typename Tensor<Scalar>::Array;
  axis = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto s = detail::split_at(x.shape(), axis);
  Array y(x.size());
  const Array& v = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      Scalar mx = v[base];
      for (Index j = 1; j < s.length; ++j) mx = std::max(mx, v[base + j * s.inner]);
      Scalar total = 0;
      for (Index j = 0; j < s.length; ++j) {
        const Scalar e = std::exp(v[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        total += e;
      }
      for (Index j = 0; j < s.length; ++j) y[base + j * s.inner] /= total;
    }
  }
  Array saved = y;
  return make_result<Scalar>("softmax", x.shape(), std::move(y), {x},
                             [x, s, saved](const Array& g) mutable {
                               Array gx(x.size());
                               for (Index o = 0; o < s.outer; ++o) {
                                 for (Index i = 0; i < s.inner; ++i) {
                                   const Index base = o * s.length * s.inner + i;
                                   Scalar dot = 0;
                                   for (Index j = 0; j < s.length; ++j) {
                                     dot += g[base + j * s.inner] * saved[base + j * s.inner];
                                   }
                                   for (Index j = 0; j < s.length; ++j) {
                                     const Index at = base + j * s.inner;
                                     gx[at] = saved[at] * (g[at] - dot);
                                   }
                                 }
                               }
                               x.accumulate_grad(gx);
                             });
}

/// Normalizes over the last axis with population variance, then applies
/// gamma and beta.
template <typename Scalar>
Tensor<Scalar> layernorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                         Scalar eps = Scalar(1e-6)) {
  using T = Tensor<Scalar>;
  using Array = typename T::Array;
  using Rows = detail::RowArray<Scalar>;
  using RowVec = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
  const Index d = x.rank() == 0 ? 0 : x.dim(-1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
    throw ShapeError("layernorm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  }
  const Index rows = x.size() / d;
  const Eigen::Map<const Rows> X(x.data().data(), rows, d);
  const Eigen::Map<const RowVec> G(gamma.data().data(), d);
  const Eigen::Map<const RowVec> Bt(beta.data().data(), d);
  const Eigen::Array<Scalar, Eigen::Dynamic, 1> mu = X.rowwise().mean();
  const Rows centered = X.colwise() - mu;
  const Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std =
      ((centered.square().rowwise().sum() / static_cast<Scalar>(d)) + eps).rsqrt();
  Rows xhat = centered.colwise() * inv_std;
  Rows y = (xhat.rowwise() * G).rowwise() + Bt;
  Array out = Eigen::Map<const Array>(y.data(), y.size());
  return make_result<Scalar>(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, rows, d](const Array& g) mutable {
        const Eigen::Map<const Rows> Gy(g.data(), rows, d);
        if (gamma.requires_grad()) gamma.accumulate_grad((Gy * xhat).colwise().sum().transpose());
        if (beta.requires_grad()) beta.accumulate_grad(Gy.colwise().sum().transpose());
        if (x.requires_grad()) {
          const Eigen::Map<const RowVec> Gm(gamma.data().data(), d);
          const Rows gxhat = Gy.rowwise() * Gm;
          const Eigen::Array<Scalar, Eigen::Dynamic, 1> m1 = gxhat.rowwise().mean();
          const Eigen::Array<Scalar, Eigen::Dynamic, 1> m2 = (gxhat * xhat).rowwise().mean();
          Rows gx = ((gxhat.colwise() - m1) - xhat.colwise() * m2).colwise() * inv_std;
          x.accumulate_grad(Eigen::Map<const Array>(gx.data(), gx.size()));
        }
      });
}

/// Tanh approximation of GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  using Array = typename Tensor<Scalar>::Array;
  const Scalar c = Scalar(0.7978845608028654);  // sqrt(2 / pi)
  const Scalar k = Scalar(0.044715);
  const Array& v = x.data();
  const Array t = (c * (v + k * v.cube())).tanh();
  Array y = Scalar(0.5) * v * (Scalar(1) + t);
  return make_result<Scalar>("gelu", x.shape(), std::move(y), {x}, [x, t, c, k](const Array& g) mutable {
    const Array& v = x.data();
    const Array dy = Scalar(0.5) * (Scalar(1) + t) +
                     Scalar(0.5) * v * (Scalar(1) - t.square()) * c * (Scalar(1) + Scalar(3) * k * v.square());
    x.accumulate_grad(g * dy);
  });
}

}  // namespace sherlock

#endif  // SHERLOCK_TENSOR_HPP_
