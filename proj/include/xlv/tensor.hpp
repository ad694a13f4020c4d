#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xlv/alloc_stats.hpp"

namespace xlv {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatX<S>>;
template <typename S>
using CMapMat = Eigen::Map<const MatX<S>>;
template <typename S>
using MapArr = Eigen::Map<ArrX<S>>;
template <typename S>
using CMapArr = Eigen::Map<const ArrX<S>>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s) {
  for (Index d : s)
    if (d <= 0)
      throw std::invalid_argument("tensor: dimension sizes must be positive, got " +
                                  shape_str(s));
}

/// Row-major flat offset of a multi-index.
inline Index flatten_index(const Shape& shape, const Shape& idx) {
  Index flat = 0;
  for (std::size_t d = 0; d < shape.size(); ++d) flat = flat * shape[d] + idx[d];
  return flat;
}

/// Inverse of flatten_index.
inline Shape unflatten_index(const Shape& shape, Index flat) {
  Shape idx(shape.size());
  for (std::size_t d = shape.size(); d-- > 0;) {
    idx[d] = flat % shape[d];
    flat /= shape[d];
  }
  return idx;
}

/// One record in the autodiff graph. Values are written once at construction
/// time and never mutated afterwards (leaves excepted); grads accumulate.
template <typename S>
struct Node {
  Shape shape;
  ArrX<S> value;
  ArrX<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  explicit Node(Shape s) : shape(std::move(s)) {
    check_shape_valid(shape);
    value.resize(numel(shape));
    alloc_stats::track(static_cast<std::size_t>(value.size()) * sizeof(S));
    id = next_id();
  }

  ~Node() {
    alloc_stats::untrack(static_cast<std::size_t>(value.size() + grad.size()) *
                         sizeof(S));
  }

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void ensure_grad() {
    if (grad.size() == 0) {
      grad = ArrX<S>::Zero(value.size());
      alloc_stats::track(static_cast<std::size_t>(grad.size()) * sizeof(S));
    }
  }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
};

/// Value-semantics handle to a graph node. Copies share the node.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> node) : n_(std::move(node)) {}

  static Tensor zeros(Shape shape) {
    Tensor t(std::make_shared<Node<S>>(std::move(shape)));
    t.n_->value.setZero();
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::make_shared<Node<S>>(std::move(shape)));
    t.n_->value.setConstant(v);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  static Tensor from(Shape shape, const std::vector<S>& data) {
    Tensor t(std::make_shared<Node<S>>(std::move(shape)));
    if (static_cast<Index>(data.size()) != t.size())
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape_str(t.shape()));
    for (Index i = 0; i < t.size(); ++i) t.n_->value[i] = data[i];
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  Index size() const { return n_->value.size(); }
  Index ndim() const { return static_cast<Index>(n_->shape.size()); }

  /// 2D view dims; 1D tensors count as a single row.
  Index rows() const { return ndim() == 2 ? n_->shape[0] : 1; }
  Index cols() const { return ndim() == 2 ? n_->shape[1] : size(); }

  const S* data() const { return n_->value.data(); }
  /// Direct write access; valid for leaves only (values are otherwise
  /// immutable once they participate in a graph).
  S* mutable_data() { return n_->value.data(); }

  S item() const {
    if (size() != 1)
      throw std::invalid_argument("item: tensor is not scalar, shape " +
                                  shape_str(shape()));
    return n_->value[0];
  }

  S at(Index r, Index c) const { return n_->value[r * cols() + c]; }
  S at(Index i) const { return n_->value[i]; }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return n_->grad.size() != 0; }
  const S* grad_data() const { return n_->grad.data(); }
  S grad_at(Index i) const { return n_->grad[i]; }

  void zero_grad() {
    if (n_->grad.size() != 0) n_->grad.setZero();
  }

  CMapMat<S> mat() const { return CMapMat<S>(data(), rows(), cols()); }
  CMapArr<S> arr() const { return CMapArr<S>(data(), size()); }
  MapMat<S> mutable_mat() { return MapMat<S>(mutable_data(), rows(), cols()); }
  MapArr<S> mutable_arr() { return MapArr<S>(mutable_data(), size()); }

  const std::shared_ptr<Node<S>>& node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
inline void accumulate(Node<S>& parent, const ArrX<S>& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  parent.grad += g;
}

}  // namespace detail

/// Allocates the result node for an op, wiring requires_grad and parent
/// links. The caller fills value and, when tracked() is true, sets backprop.
template <typename S>
class OpResult {
 public:
  OpResult(const char* name, Shape shape, std::initializer_list<Tensor<S>> inputs)
      : t_(std::make_shared<Node<S>>(std::move(shape))) {
    Node<S>& n = *t_.node();
    n.op = name;
    for (const Tensor<S>& in : inputs)
      if (in.requires_grad()) n.requires_grad = true;
    if (n.requires_grad) {
      n.parents.reserve(inputs.size());
      for (const Tensor<S>& in : inputs) n.parents.push_back(in.node());
    }
  }

  bool tracked() const { return t_.node()->requires_grad; }
  Node<S>& node() { return *t_.node(); }
  S* out() { return t_.mutable_data(); }

  template <typename F>
  void set_backprop(F&& f) {
    if (tracked()) t_.node()->backprop = std::forward<F>(f);
  }

  Tensor<S> tensor() const { return t_; }

 private:
  Tensor<S> t_;
};

/// Reverse-mode sweep from a scalar loss. Grads accumulate into every
/// reachable leaf with requires_grad; repeated calls keep accumulating.
/// Interior (op-produced) grads are scratch space reset on each sweep.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  Node<S>* root = loss.node().get();
  if (!root->requires_grad) return;  // constant graph, nothing to do

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  // Creation ids are a topological order: parents always precede children.
  std::sort(order.begin(), order.end(),
            [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });

  for (Node<S>* n : order)
    if (n->backprop && n->grad.size() != 0) n->grad.setZero();

  root->ensure_grad();
  root->grad[0] += S(1);
  for (Node<S>* n : order)
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
}

}  // namespace xlv
