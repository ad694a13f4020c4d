#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "xlv/tensor.hpp"

namespace xlv {

namespace detail {

template <typename S>
Index node_rows(const Node<S>& n) {
  return n.shape.size() == 2 ? n.shape[0] : 1;
}
template <typename S>
Index node_cols(const Node<S>& n) {
  return n.shape.size() == 2 ? n.shape[1] : static_cast<Index>(n.value.size());
}

// 2D broadcast info for binary pointwise ops. 1D operands count as one row,
// so {N,1} op {M} follows the usual outer-broadcast rule.
struct Bcast {
  Index rr = 0, rc = 0;        // result dims (2D view)
  Index ar = 0, ac = 0, br = 0, bc = 0;
  bool same = false;           // identical shapes, any rank
  Shape result;
};

inline Bcast bcast_info(const char* op, const Shape& a, const Shape& b) {
  Bcast f;
  if (a == b) {
    f.same = true;
    f.result = a;
    f.rr = 1;
    f.rc = numel(a);
    return f;
  }
  if (a.size() > 2 || b.size() > 2)
    throw std::invalid_argument(std::string(op) +
                                ": broadcast requires matching shapes or 2D operands, got " +
                                shape_str(a) + " vs " + shape_str(b));
  f.ar = a.size() == 2 ? a[0] : 1;
  f.ac = a.size() == 2 ? a[1] : numel(a);
  f.br = b.size() == 2 ? b[0] : 1;
  f.bc = b.size() == 2 ? b[1] : numel(b);
  bool rows_ok = f.ar == f.br || f.ar == 1 || f.br == 1;
  bool cols_ok = f.ac == f.bc || f.ac == 1 || f.bc == 1;
  if (!rows_ok || !cols_ok)
    throw std::invalid_argument(std::string(op) + ": shapes not broadcastable, " +
                                shape_str(a) + " vs " + shape_str(b));
  f.rr = std::max(f.ar, f.br);
  f.rc = std::max(f.ac, f.bc);
  if (a.size() == 2 || b.size() == 2)
    f.result = {f.rr, f.rc};
  else
    f.result = {f.rc};
  return f;
}

// fv(x, y) -> value; fda(x, y) -> d/dx; fdb(x, y) -> d/dy
template <typename S, typename FV, typename FDA, typename FDB>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, FV fv,
                    FDA fda, FDB fdb) {
  Bcast f = bcast_info(name, a.shape(), b.shape());
  OpResult<S> r(name, f.result, {a, b});
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = r.out();
  if (f.same) {
    const Index n = a.size();
    for (Index i = 0; i < n; ++i) po[i] = fv(pa[i], pb[i]);
  } else {
    for (Index i = 0; i < f.rr; ++i)
      for (Index j = 0; j < f.rc; ++j)
        po[i * f.rc + j] = fv(pa[(f.ar == 1 ? 0 : i) * f.ac + (f.ac == 1 ? 0 : j)],
                              pb[(f.br == 1 ? 0 : i) * f.bc + (f.bc == 1 ? 0 : j)]);
  }
  r.set_backprop([a, b, f, fda, fdb](Node<S>& n) {
    Node<S>& na = *a.node();
    Node<S>& nb = *b.node();
    const S* pa = na.value.data();
    const S* pb = nb.value.data();
    const S* g = n.grad.data();
    if (f.same) {
      const Index cnt = na.value.size();
      if (na.requires_grad) {
        ArrX<S> ga(cnt);
        for (Index i = 0; i < cnt; ++i) ga[i] = g[i] * fda(pa[i], pb[i]);
        accumulate(na, ga);
      }
      if (nb.requires_grad) {
        ArrX<S> gb(cnt);
        for (Index i = 0; i < cnt; ++i) gb[i] = g[i] * fdb(pa[i], pb[i]);
        accumulate(nb, gb);
      }
      return;
    }
    ArrX<S> ga, gb;
    if (na.requires_grad) ga = ArrX<S>::Zero(na.value.size());
    if (nb.requires_grad) gb = ArrX<S>::Zero(nb.value.size());
    for (Index i = 0; i < f.rr; ++i)
      for (Index j = 0; j < f.rc; ++j) {
        Index ia = (f.ar == 1 ? 0 : i) * f.ac + (f.ac == 1 ? 0 : j);
        Index ib = (f.br == 1 ? 0 : i) * f.bc + (f.bc == 1 ? 0 : j);
        S gij = g[i * f.rc + j];
        if (na.requires_grad) ga[ia] += gij * fda(pa[ia], pb[ib]);
        if (nb.requires_grad) gb[ib] += gij * fdb(pa[ia], pb[ib]);
      }
    if (na.requires_grad) accumulate(na, ga);
    if (nb.requires_grad) accumulate(nb, gb);
  });
  return r.tensor();
}

// f(x) -> value; df(x, y) -> dy/dx given input x and output y
template <typename S, typename FV, typename FD>
Tensor<S> pointwise(const char* name, const Tensor<S>& a, FV fv, FD fd) {
  OpResult<S> r(name, a.shape(), {a});
  const S* pa = a.data();
  S* po = r.out();
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) po[i] = fv(pa[i]);
  r.set_backprop([a, fd](Node<S>& out) {
    Node<S>& na = *a.node();
    const S* x = na.value.data();
    const S* y = out.value.data();
    const S* g = out.grad.data();
    ArrX<S> ga(na.value.size());
    for (Index i = 0; i < na.value.size(); ++i) ga[i] = g[i] * fd(x[i], y[i]);
    accumulate(na, ga);
  });
  return r.tensor();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise arithmetic (broadcasting: matching shapes, or 2D rules where a
// dimension of size 1 stretches; 1D operands count as a single row).
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return detail::pointwise(
      "scale", a, [c](S x) { return x * c; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> shift(const Tensor<S>& a, S c) {
  return detail::pointwise(
      "shift", a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::pointwise(
      "exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return detail::pointwise(
      "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::pointwise(
      "sigmoid", a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  return detail::pointwise(
      "tanh", a, [](S x) { return std::tanh(x); },
      [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return detail::pointwise(
      "abs", a, [](S x) { return std::abs(x); },
      [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

/// Elementwise max(x, c) with constant c; subgradient 1 at x == c.
template <typename S>
Tensor<S> max_with(const Tensor<S>& a, S c) {
  return detail::pointwise(
      "max_with", a, [c](S x) { return x > c ? x : c; },
      [c](S x, S) { return x >= c ? S(1) : S(0); });
}

/// Elementwise max of two tensors, composed from the primitive set:
/// max(a,b) = (a + b + |a - b|) / 2. At ties the gradient splits evenly.
template <typename S>
Tensor<S> pairwise_max(const Tensor<S>& a, const Tensor<S>& b) {
  return scale(add(add(a, b), abs(sub(a, b))), S(0.5));
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() > 2 || b.ndim() > 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  OpResult<S> r("matmul", {a.rows(), b.cols()}, {a, b});
  MapMat<S>(r.out(), a.rows(), b.cols()).noalias() = a.mat() * b.mat();
  r.set_backprop([a, b](Node<S>& n) {
    Node<S>& na = *a.node();
    Node<S>& nb = *b.node();
    CMapMat<S> g(n.grad.data(), detail::node_rows(n), detail::node_cols(n));
    if (na.requires_grad) {
      na.ensure_grad();
      MapMat<S>(na.grad.data(), a.rows(), a.cols()).noalias() +=
          g * b.mat().transpose();
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      MapMat<S>(nb.grad.data(), b.rows(), b.cols()).noalias() +=
          a.mat().transpose() * g;
    }
  });
  return r.tensor();
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.ndim() > 2)
    throw std::invalid_argument("transpose: expects 1D or 2D, got " +
                                shape_str(a.shape()));
  OpResult<S> r("transpose", {a.cols(), a.rows()}, {a});
  MapMat<S>(r.out(), a.cols(), a.rows()) = a.mat().transpose();
  r.set_backprop([a](Node<S>& n) {
    CMapMat<S> g(n.grad.data(), detail::node_rows(n), detail::node_cols(n));
    ArrX<S> ga(a.size());
    MapMat<S>(ga.data(), a.rows(), a.cols()) = g.transpose();
    detail::accumulate(*a.node(), ga);
  });
  return r.tensor();
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: size mismatch, " + shape_str(a.shape()) +
                                " to " + shape_str(shape));
  OpResult<S> r("reshape", std::move(shape), {a});
  MapArr<S>(r.out(), a.size()) = a.arr();
  r.set_backprop([a](Node<S>& n) { detail::accumulate(*a.node(), n.grad); });
  return r.tensor();
}

// ---------------------------------------------------------------------------
// Structure: concat / slice / permute / gather
// ---------------------------------------------------------------------------

/// Concatenates 2D blocks (1D inputs count as single rows) along axis 0 or 1.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  Index rows = parts[0].rows(), cols = parts[0].cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (axis == 0 && p.cols() != cols)
      throw std::invalid_argument("concat: column mismatch " + shape_str(p.shape()));
    if (axis == 1 && p.rows() != rows)
      throw std::invalid_argument("concat: row mismatch " + shape_str(p.shape()));
    total += axis == 0 ? p.rows() : p.cols();
  }
  Shape out_shape = axis == 0 ? Shape{total, cols} : Shape{rows, total};

  auto node = std::make_shared<Node<S>>(out_shape);
  node->op = "concat";
  bool rg = false;
  for (const auto& p : parts) rg |= p.requires_grad();
  node->requires_grad = rg;
  if (rg)
    for (const auto& p : parts) node->parents.push_back(p.node());

  MapMat<S> out(node->value.data(), out_shape[0], out_shape[1]);
  Index off = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(off, p.rows()) = p.mat();
      off += p.rows();
    } else {
      out.middleCols(off, p.cols()) = p.mat();
      off += p.cols();
    }
  }
  if (rg) {
    std::vector<Tensor<S>> held(parts);
    node->backprop = [held, axis](Node<S>& n) {
      CMapMat<S> g(n.grad.data(), detail::node_rows(n), detail::node_cols(n));
      Index off = 0;
      for (const auto& p : held) {
        ArrX<S> gp(p.size());
        if (axis == 0) {
          MapMat<S>(gp.data(), p.rows(), p.cols()) = g.middleRows(off, p.rows());
          off += p.rows();
        } else {
          MapMat<S>(gp.data(), p.rows(), p.cols()) = g.middleCols(off, p.cols());
          off += p.cols();
        }
        detail::accumulate(*p.node(), gp);
      }
    };
  }
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> concat(std::initializer_list<Tensor<S>> parts, int axis) {
  return concat(std::vector<Tensor<S>>(parts), axis);
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  return concat(std::vector<Tensor<S>>{a, b}, axis);
}

/// 2D sub-block [r0,r1) x [c0,c1); 1D tensors are single rows.
template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index r0, Index r1, Index c0, Index c1) {
  if (r0 < 0 || r1 > a.rows() || c0 < 0 || c1 > a.cols() || r0 >= r1 || c0 >= c1)
    throw std::invalid_argument("slice: range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") invalid for " +
                                shape_str(a.shape()));
  Shape out_shape = a.ndim() == 1 ? Shape{c1 - c0} : Shape{r1 - r0, c1 - c0};
  OpResult<S> r("slice", out_shape, {a});
  MapMat<S>(r.out(), r1 - r0, c1 - c0) = a.mat().block(r0, c0, r1 - r0, c1 - c0);
  r.set_backprop([a, r0, c0, r1, c1](Node<S>& n) {
    Node<S>& na = *a.node();
    na.ensure_grad();
    MapMat<S>(na.grad.data(), a.rows(), a.cols()).block(r0, c0, r1 - r0, c1 - c0) +=
        CMapMat<S>(n.grad.data(), r1 - r0, c1 - c0);
  });
  return r.tensor();
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, Index r0, Index r1) {
  return slice(a, r0, r1, 0, a.cols());
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, Index c0, Index c1) {
  return slice(a, 0, a.rows(), c0, c1);
}

inline bool is_permutation_of(const std::vector<Index>& p, Index n) {
  if (static_cast<Index>(p.size()) != n) return false;
  std::vector<bool> seen(n, false);
  for (Index v : p) {
    if (v < 0 || v >= n || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

inline std::vector<Index> inverse_permutation(const std::vector<Index>& p) {
  std::vector<Index> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = static_cast<Index>(i);
  return inv;
}

/// out.row(i) = a.row(perm[i])
template <typename S>
Tensor<S> permute_rows(const Tensor<S>& a, const std::vector<Index>& perm) {
  if (!is_permutation_of(perm, a.rows()))
    throw std::invalid_argument("permute_rows: not a permutation of 0.." +
                                std::to_string(a.rows() - 1));
  OpResult<S> r("permute_rows", {a.rows(), a.cols()}, {a});
  MapMat<S> out(r.out(), a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) out.row(i) = a.mat().row(perm[i]);
  r.set_backprop([a, perm](Node<S>& n) {
    Node<S>& na = *a.node();
    na.ensure_grad();
    MapMat<S> ga(na.grad.data(), a.rows(), a.cols());
    CMapMat<S> g(n.grad.data(), a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) ga.row(perm[i]) += g.row(i);
  });
  return r.tensor();
}

/// Flat gather: out[i] = a.flat[(*idx)[i]]. Backward scatter-adds.
template <typename S>
Tensor<S> gather_flat(const Tensor<S>& a, std::shared_ptr<const std::vector<Index>> idx,
                      Shape out_shape) {
  if (numel(out_shape) != static_cast<Index>(idx->size()))
    throw std::invalid_argument("gather: index count does not match output shape");
  for (Index v : *idx)
    if (v < 0 || v >= a.size())
      throw std::invalid_argument("gather: index out of range");
  OpResult<S> r("gather", std::move(out_shape), {a});
  const S* pa = a.data();
  S* po = r.out();
  for (std::size_t i = 0; i < idx->size(); ++i) po[i] = pa[(*idx)[i]];
  r.set_backprop([a, idx](Node<S>& n) {
    Node<S>& na = *a.node();
    na.ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i) na.grad[(*idx)[i]] += n.grad[i];
  });
  return r.tensor();
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  OpResult<S> r("sum", {1}, {a});
  r.out()[0] = a.arr().sum();
  r.set_backprop([a](Node<S>& n) {
    ArrX<S> g = ArrX<S>::Constant(a.size(), n.grad[0]);
    detail::accumulate(*a.node(), g);
  });
  return r.tensor();
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

/// Row sums of a 2D tensor -> {N,1}.
template <typename S>
Tensor<S> rowsum(const Tensor<S>& a) {
  OpResult<S> r("rowsum", {a.rows(), 1}, {a});
  MapMat<S>(r.out(), a.rows(), 1) = a.mat().rowwise().sum();
  r.set_backprop([a](Node<S>& n) {
    ArrX<S> ga(a.size());
    MapMat<S> gm(ga.data(), a.rows(), a.cols());
    CMapMat<S> g(n.grad.data(), a.rows(), 1);
    gm = g.replicate(1, a.cols());
    detail::accumulate(*a.node(), ga);
  });
  return r.tensor();
}

/// Row maxima of a 2D tensor -> {N,1}. Gradient routes to the first argmax.
template <typename S>
Tensor<S> rowmax(const Tensor<S>& a) {
  OpResult<S> r("rowmax", {a.rows(), 1}, {a});
  auto arg = std::make_shared<std::vector<Index>>(a.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    Index j;
    r.out()[i] = a.mat().row(i).maxCoeff(&j);
    (*arg)[i] = j;
  }
  r.set_backprop([a, arg](Node<S>& n) {
    Node<S>& na = *a.node();
    na.ensure_grad();
    MapMat<S> ga(na.grad.data(), a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) ga(i, (*arg)[i]) += n.grad[i];
  });
  return r.tensor();
}

// ---------------------------------------------------------------------------
// Normalizations and softmax
// ---------------------------------------------------------------------------

/// Softmax over the last axis (each row of a 2D tensor; a 1D tensor is one
/// row). Max-subtracted for stability; the shift is exact and gradient-free.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  OpResult<S> r("softmax", a.shape(), {a});
  const Index rows = a.rows(), cols = a.cols();
  MapMat<S> out(r.out(), rows, cols);
  for (Index i = 0; i < rows; ++i) {
    S m = a.mat().row(i).maxCoeff();
    out.row(i) = (a.mat().row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  r.set_backprop([a](Node<S>& n) {
    const Index rows = detail::node_rows(n), cols = detail::node_cols(n);
    CMapMat<S> y(n.value.data(), rows, cols);
    CMapMat<S> g(n.grad.data(), rows, cols);
    ArrX<S> ga(n.value.size());
    MapMat<S> gm(ga.data(), rows, cols);
    for (Index i = 0; i < rows; ++i) {
      S dot = (g.row(i).array() * y.row(i).array()).sum();
      gm.row(i) = y.row(i).array() * (g.row(i).array() - dot);
    }
    detail::accumulate(*a.node(), ga);
  });
  return r.tensor();
}

namespace detail {

// Shared core for layer_norm (groups == 1) and group_norm: per row, channels
// split into contiguous groups, each normalized to mean 0 / var 1 (population
// variance + eps), then per-channel affine.
template <typename S>
Tensor<S> norm_op(const char* name, const Tensor<S>& x, const Tensor<S>& gamma,
                  const Tensor<S>& beta, Index groups, S eps) {
  const Index rows = x.rows(), cols = x.cols();
  if (groups < 1 || cols % groups != 0)
    throw std::invalid_argument(std::string(name) + ": channel count " +
                                std::to_string(cols) + " not divisible by groups " +
                                std::to_string(groups));
  if (gamma.size() != cols || beta.size() != cols)
    throw std::invalid_argument(std::string(name) + ": affine params must have " +
                                std::to_string(cols) + " channels, got " +
                                shape_str(gamma.shape()) + " / " +
                                shape_str(beta.shape()));
  const Index gsz = cols / groups;
  OpResult<S> r(name, x.shape(), {x, gamma, beta});
  // Cache (x - mu)/sigma and 1/sigma for the backward pass.
  auto xhat = std::make_shared<ArrX<S>>(x.size());
  auto inv_sigma = std::make_shared<ArrX<S>>(rows * groups);
  MapMat<S> out(r.out(), rows, cols);
  MapMat<S> xh(xhat->data(), rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index g = 0; g < groups; ++g) {
      auto seg = x.mat().row(i).segment(g * gsz, gsz);
      S mu = seg.mean();
      S var = (seg.array() - mu).square().sum() / static_cast<S>(gsz);
      S is = S(1) / std::sqrt(var + eps);
      (*inv_sigma)[i * groups + g] = is;
      xh.row(i).segment(g * gsz, gsz) = (seg.array() - mu) * is;
    }
    out.row(i) = xh.row(i).array() * gamma.arr().transpose() +
                 beta.arr().transpose();
  }
  r.set_backprop([x, gamma, beta, xhat, inv_sigma, groups, gsz](Node<S>& n) {
    const Index rows = detail::node_rows(n), cols = detail::node_cols(n);
    CMapMat<S> g(n.grad.data(), rows, cols);
    CMapMat<S> xh(xhat->data(), rows, cols);
    Node<S>& nx = *x.node();
    Node<S>& ng = *gamma.node();
    Node<S>& nb = *beta.node();
    if (ng.requires_grad) {
      ArrX<S> gg(cols);
      MapMat<S> gm(gg.data(), 1, cols);
      gm = (g.array() * xh.array()).colwise().sum();
      accumulate(ng, gg);
    }
    if (nb.requires_grad) {
      ArrX<S> gb(cols);
      MapMat<S> gm(gb.data(), 1, cols);
      gm = g.colwise().sum();
      accumulate(nb, gb);
    }
    if (nx.requires_grad) {
      ArrX<S> gx(nx.value.size());
      MapMat<S> gxm(gx.data(), rows, cols);
      for (Index i = 0; i < rows; ++i) {
        for (Index gi = 0; gi < groups; ++gi) {
          // w = gamma .* dy restricted to the group
          Eigen::Array<S, Eigen::Dynamic, 1> w =
              g.row(i).segment(gi * gsz, gsz).array().transpose() *
              gamma.arr().segment(gi * gsz, gsz);
          Eigen::Array<S, Eigen::Dynamic, 1> xs =
              xh.row(i).segment(gi * gsz, gsz).array().transpose();
          S mw = w.mean();
          S mwx = (w * xs).mean();
          gxm.row(i).segment(gi * gsz, gsz) =
              ((w - mw - xs * mwx) * (*inv_sigma)[i * groups + gi]).transpose();
        }
      }
      accumulate(nx, gx);
    }
  });
  return r.tensor();
}

}  // namespace detail

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  return detail::norm_op("layer_norm", x, gamma, beta, Index(1), eps);
}

template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Index groups, S eps = S(1e-5)) {
  return detail::norm_op("group_norm", x, gamma, beta, groups, eps);
}

// ---------------------------------------------------------------------------
// Causal 1D convolution
// ---------------------------------------------------------------------------

/// Per-channel causal convolution over the sequence (row) axis with left
/// zero padding: out[t,c] = sum_tau k[tau,c] * x[t - tau, c]. Output at t
/// depends only on inputs at positions <= t.
template <typename S>
Tensor<S> causal_conv1d(const Tensor<S>& x, const Tensor<S>& kernel) {
  if (x.ndim() != 2 || kernel.ndim() != 2 || kernel.cols() != x.cols())
    throw std::invalid_argument("causal_conv1d: expects x [NxC] and kernel [KxC], got " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(kernel.shape()));
  const Index n = x.rows(), c = x.cols(), k = kernel.rows();
  OpResult<S> r("causal_conv1d", {n, c}, {x, kernel});
  MapMat<S> out(r.out(), n, c);
  out.setZero();
  for (Index tau = 0; tau < k; ++tau)
    for (Index t = tau; t < n; ++t)
      out.row(t).array() += kernel.mat().row(tau).array() * x.mat().row(t - tau).array();
  r.set_backprop([x, kernel, n, c, k](Node<S>& out) {
    CMapMat<S> g(out.grad.data(), n, c);
    Node<S>& nx = *x.node();
    Node<S>& nk = *kernel.node();
    if (nx.requires_grad) {
      ArrX<S> gx = ArrX<S>::Zero(n * c);
      MapMat<S> gxm(gx.data(), n, c);
      for (Index tau = 0; tau < k; ++tau)
        for (Index t = tau; t < n; ++t)
          gxm.row(t - tau).array() += kernel.mat().row(tau).array() * g.row(t).array();
      detail::accumulate(nx, gx);
    }
    if (nk.requires_grad) {
      ArrX<S> gk = ArrX<S>::Zero(k * c);
      MapMat<S> gkm(gk.data(), k, c);
      for (Index tau = 0; tau < k; ++tau)
        for (Index t = tau; t < n; ++t)
          gkm.row(tau).array() += x.mat().row(t - tau).array() * g.row(t).array();
      detail::accumulate(nk, gk);
    }
  });
  return r.tensor();
}

// ---------------------------------------------------------------------------
// Graph utilities
// ---------------------------------------------------------------------------

/// Copy of the value cut loose from the graph (stop-gradient).
template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  Tensor<S> t = Tensor<S>::zeros(a.shape());
  t.mutable_arr() = a.arr();
  return t;
}

}  // namespace xlv
