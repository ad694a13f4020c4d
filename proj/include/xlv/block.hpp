#pragma once

#include <string>
#include <utility>
#include <vector>

#include "xlv/mlstm.hpp"
#include "xlv/ops.hpp"
#include "xlv/path.hpp"
#include "xlv/rng.hpp"
#include "xlv/tensor.hpp"

namespace xlv {

/// Residual block parameters. The up-projection widens D to 2*D_inner; its
/// first D_inner columns drive the block-level output gate, the rest feed the
/// sequence branch (causal conv then mLSTM, value path bypassing the conv).
/// The conv output re-enters after group norm through the learnable weight
/// lambda; the down-projection narrows back to D. Both projections are
/// bias-free.
template <typename S>
struct BlockParams {
  Tensor<S> ln_scale, ln_shift;  // {D}
  Tensor<S> up;                  // {D, 2*D_inner}
  Tensor<S> conv_kernel;         // {3, D_inner}, causal, per-channel
  MLstmParams<S> mlstm;          // d_in == D_inner, inner == D_inner
  Tensor<S> gn_scale, gn_shift;  // {D_inner}, head_count groups
  Tensor<S> lambda;              // {1}
  Tensor<S> down;                // {D_inner, D}

  Index d() const { return ln_scale.size(); }
  Index d_inner() const { return gn_scale.size(); }

  void validate() const {
    mlstm.validate();
    const Index dim = d(), di = d_inner();
    if (mlstm.d_in() != di || mlstm.inner() != di)
      throw std::invalid_argument(
          "block: mLSTM dims (in " + std::to_string(mlstm.d_in()) + ", out " +
          std::to_string(mlstm.inner()) + ") must both equal inner width " +
          std::to_string(di));
    auto want = [](const Tensor<S>& t, Shape s, const char* name) {
      if (t.shape() != s)
        throw std::invalid_argument(std::string("block: ") + name + " has shape " +
                                    shape_str(t.shape()) + ", expected " +
                                    shape_str(s));
    };
    want(ln_shift, {dim}, "ln_shift");
    want(up, {dim, 2 * di}, "up");
    want(conv_kernel, {3, di}, "conv_kernel");
    want(gn_shift, {di}, "gn_shift");
    want(lambda, {1}, "lambda");
    want(down, {di, dim}, "down");
  }
};

/// Projections and the conv kernel start truncated-normal (std 0.02); norms
/// start as identity maps; lambda starts at 1.
template <typename S>
BlockParams<S> init_block(Index d, Index d_inner, Index head_count, Rng& rng) {
  if (head_count < 1 || d_inner % head_count != 0)
    throw std::invalid_argument("block: inner width " + std::to_string(d_inner) +
                                " must split evenly over " +
                                std::to_string(head_count) + " heads");
  BlockParams<S> p;
  auto tn = [&rng](Shape shape) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (Index i = 0; i < t.size(); ++i)
      t.mutable_data()[i] = static_cast<S>(rng.trunc_normal(0.02));
    t.set_requires_grad(true);
    return t;
  };
  auto constant = [](Shape shape, S v) {
    Tensor<S> t = Tensor<S>::full(std::move(shape), v);
    t.set_requires_grad(true);
    return t;
  };
  p.ln_scale = constant({d}, S(1));
  p.ln_shift = constant({d}, S(0));
  p.up = tn({d, 2 * d_inner});
  p.conv_kernel = tn({3, d_inner});
  p.mlstm = init_mlstm<S>(d_inner, head_count, d_inner / head_count, rng);
  p.gn_scale = constant({d_inner}, S(1));
  p.gn_shift = constant({d_inner}, S(0));
  p.lambda = constant({1}, S(1));
  p.down = tn({d_inner, d});
  p.validate();
  return p;
}

namespace detail {

// Sequence branch for one traversal, returned in original token order:
// permute, causal conv, mLSTM (q/k from conv output, v bypassing it), group
// norm, weighted conv residual, un-permute.
template <typename S>
Tensor<S> block_path(const Tensor<S>& s, const BlockParams<S>& p,
                     const GateConfig& cfg, const std::vector<Index>& order,
                     bool parallel_form) {
  Tensor<S> s_pi = permute_rows(s, order);
  Tensor<S> c = causal_conv1d(s_pi, p.conv_kernel);
  Tensor<S> u = parallel_form ? forward_parallel(c, s_pi, p.mlstm, cfg)
                              : forward_recurrent(c, s_pi, p.mlstm, cfg);
  Tensor<S> gn = group_norm(u, p.gn_scale, p.gn_shift, p.mlstm.head_count);
  Tensor<S> hhat = add(gn, mul(c, p.lambda));
  return permute_rows(hhat, inverse_permutation(order));
}

template <typename S>
struct UpSplit {
  Tensor<S> gate, signal;
};

template <typename S>
UpSplit<S> up_project(const Tensor<S>& tokens, const BlockParams<S>& p) {
  p.validate();
  if (tokens.ndim() != 2 || tokens.cols() != p.d())
    throw std::invalid_argument("block: tokens " + shape_str(tokens.shape()) +
                                " do not match width " + std::to_string(p.d()));
  Tensor<S> normed = layer_norm(tokens, p.ln_scale, p.ln_shift);
  Tensor<S> wide = matmul(normed, p.up);
  const Index di = p.d_inner();
  return {slice_cols(wide, 0, di), slice_cols(wide, di, 2 * di)};
}

}  // namespace detail

/// One block pass over a single traversal order.
template <typename S>
Tensor<S> block_forward(const Tensor<S>& tokens, const BlockParams<S>& p,
                        const GateConfig& cfg, const std::vector<Index>& order,
                        bool parallel_form = true) {
  if (!is_permutation_of(order, tokens.rows()))
    throw std::invalid_argument("block: order is not a permutation of 0.." +
                                std::to_string(tokens.rows() - 1));
  auto up = detail::up_project(tokens, p);
  Tensor<S> hhat = detail::block_path(up.signal, p, cfg, order, parallel_form);
  Tensor<S> h = mul(sigmoid(up.gate), hhat);
  return add(tokens, matmul(h, p.down));
}

/// One block pass running all four grid traversals with shared parameters,
/// softmax-merged before the output gate and down-projection.
template <typename S>
Tensor<S> block_forward_merged(const Tensor<S>& tokens, const BlockParams<S>& p,
                               const GateConfig& cfg, Index grid_rows,
                               Index grid_cols, const PathMergeParams<S>& merge,
                               bool parallel_form = true) {
  if (grid_rows * grid_cols != tokens.rows())
    throw std::invalid_argument("block: grid " + std::to_string(grid_rows) + "x" +
                                std::to_string(grid_cols) + " does not cover " +
                                std::to_string(tokens.rows()) + " tokens");
  auto up = detail::up_project(tokens, p);
  std::vector<Tensor<S>> paths;
  paths.reserve(4);
  for (ScanDirection dir : kAllDirections)
    paths.push_back(detail::block_path(
        up.signal, p, cfg, scan_order(grid_rows, grid_cols, dir), parallel_form));
  Tensor<S> hhat = merge_paths(paths, merge);
  Tensor<S> h = mul(sigmoid(up.gate), hhat);
  return add(tokens, matmul(h, p.down));
}

}  // namespace xlv
