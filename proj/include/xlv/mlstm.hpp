#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "xlv/ops.hpp"
#include "xlv/rng.hpp"
#include "xlv/tensor.hpp"

namespace xlv {

/// Forget-gate activation: exp(f̃) or σ(f̃). The exponential variant has
/// unbounded dynamic range and relies on the stabilizer below.
enum class ForgetVariant { Exponential, Sigmoid };

struct GateConfig {
  ForgetVariant forget_variant = ForgetVariant::Sigmoid;
  bool stabilized = true;
};

inline const char* to_string(ForgetVariant v) {
  return v == ForgetVariant::Exponential ? "exponential" : "sigmoid";
}

/// Layer parameters, stacked across heads:
///   wq/wk/wv: {d_in, H*dh}, column block h belongs to head h; bq/bk/bv: {H*dh}
///   wi/wf:    {H, 3*dh}, one gate weight row per head; bi/bf: {H}
///   wo:       {H*3*dh, dh}, row block h is head h's output-gate projection
///   bo:       {H*dh}
/// Gates consume the per-head concatenation [q k v] (hence width 3*dh) and
/// produce one scalar per head per step; the output gate produces dh values.
template <typename S>
struct MLstmParams {
  Tensor<S> wq, wk, wv;
  Tensor<S> bq, bk, bv;
  Tensor<S> wi, wf;
  Tensor<S> bi, bf;
  Tensor<S> wo, bo;
  Index head_count = 0;
  Index d_head = 0;

  Index inner() const { return head_count * d_head; }
  Index d_in() const { return wq.rows(); }

  void validate() const {
    const Index in = inner();
    auto want = [](const Tensor<S>& t, Shape s, const char* name) {
      if (t.shape() != s)
        throw std::invalid_argument(std::string("mlstm: ") + name + " has shape " +
                                    shape_str(t.shape()) + ", expected " +
                                    shape_str(s));
    };
    if (head_count < 1 || d_head < 1)
      throw std::invalid_argument("mlstm: head_count and d_head must be positive");
    want(wq, {wq.rows(), in}, "wq");
    want(wk, {wq.rows(), in}, "wk");
    want(wv, {wq.rows(), in}, "wv");
    want(bq, {in}, "bq");
    want(bk, {in}, "bk");
    want(bv, {in}, "bv");
    want(wi, {head_count, 3 * d_head}, "wi");
    want(wf, {head_count, 3 * d_head}, "wf");
    want(bi, {head_count}, "bi");
    want(bf, {head_count}, "bf");
    want(wo, {head_count * 3 * d_head, d_head}, "wo");
    want(bo, {in}, "bo");
  }
};

/// Truncated-normal init (std 0.02) for all projections and gate weights;
/// zero biases except the forget bias at +1, a mild remember-at-start bias.
template <typename S>
MLstmParams<S> init_mlstm(Index d_in, Index head_count, Index d_head, Rng& rng) {
  MLstmParams<S> p;
  p.head_count = head_count;
  p.d_head = d_head;
  const Index in = head_count * d_head;
  auto tn = [&rng](Shape shape) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (Index i = 0; i < t.size(); ++i)
      t.mutable_data()[i] = static_cast<S>(rng.trunc_normal(0.02));
    t.set_requires_grad(true);
    return t;
  };
  auto zeros = [](Shape shape) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
  };
  p.wq = tn({d_in, in});
  p.wk = tn({d_in, in});
  p.wv = tn({d_in, in});
  p.bq = zeros({in});
  p.bk = zeros({in});
  p.bv = zeros({in});
  p.wi = tn({head_count, 3 * d_head});
  p.wf = tn({head_count, 3 * d_head});
  p.bi = zeros({head_count});
  p.bf = Tensor<S>::full({head_count}, S(1));
  p.bf.set_requires_grad(true);
  p.wo = tn({head_count * 3 * d_head, d_head});
  p.bo = zeros({in});
  p.validate();
  return p;
}

/// q/k/v for the whole sequence, heads side by side: each {N, H*dh}.
/// q and k map the causal-conv branch; v maps the conv-bypass input; only k
/// carries the 1/sqrt(d_head) factor (on the matrix product, not the bias).
template <typename S>
struct QkvSeq {
  Tensor<S> q, k, v;
};

template <typename S>
QkvSeq<S> project_qkv(const Tensor<S>& x_qk, const Tensor<S>& x_v,
                      const MLstmParams<S>& params) {
  if (x_qk.cols() != params.d_in() || x_v.cols() != params.d_in() ||
      x_qk.rows() != x_v.rows())
    throw std::invalid_argument("mlstm: inputs " + shape_str(x_qk.shape()) + " / " +
                                shape_str(x_v.shape()) + " do not match d_in " +
                                std::to_string(params.d_in()));
  QkvSeq<S> r;
  const S root = std::sqrt(static_cast<S>(params.d_head));
  r.q = add(matmul(x_qk, params.wq), params.bq);
  r.k = add(scale(matmul(x_qk, params.wk), S(1) / root), params.bk);
  r.v = add(matmul(x_v, params.wv), params.bv);
  return r;
}

namespace detail {

// log σ(x) without overflow at either tail.
inline double logsig(double x) {
  return x > 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace detail

/// Effective (possibly rescaled) gates for one head at one step.
///
/// The stabilizer m is the running max of log-gate magnitudes; subtracting it
/// inside the exponentials keeps them representable. The hidden state is
/// mathematically invariant to the shift — the same factor cancels between
/// numerator and denominator — so m is carried as a plain number outside the
/// gradient graph.
template <typename S>
struct GateOut {
  Tensor<S> i, f;       // {1,1} gate values as used by the state update
  Tensor<S> o_preact;   // {1, dh} output-gate preactivation
  double m = 0;         // stabilizer after this step (0 when disabled)
};

/// x_gate: the head's [q k v] row ({3*dh} or {1, 3*dh}).
template <typename S>
GateOut<S> compute_gates(const Tensor<S>& x_gate, const MLstmParams<S>& params,
                         Index head, const GateConfig& cfg, double m_prev) {
  const Index dh = params.d_head;
  if (x_gate.rows() != 1 || x_gate.cols() != 3 * dh)
    throw std::invalid_argument("mlstm: gate input has shape " +
                                shape_str(x_gate.shape()) + ", expected width " +
                                std::to_string(3 * dh));
  Tensor<S> wi_h = slice(params.wi, head, head + 1, 0, 3 * dh);
  Tensor<S> wf_h = slice(params.wf, head, head + 1, 0, 3 * dh);
  Tensor<S> pi = add(matmul(x_gate, transpose(wi_h)),
                     slice(params.bi, 0, 1, head, head + 1));
  Tensor<S> pf = add(matmul(x_gate, transpose(wf_h)),
                     slice(params.bf, 0, 1, head, head + 1));

  GateOut<S> g;
  Tensor<S> wo_h = slice(params.wo, head * 3 * dh, (head + 1) * 3 * dh, 0, dh);
  Tensor<S> bo_h = slice(params.bo, 0, 1, head * dh, (head + 1) * dh);
  g.o_preact = add(matmul(x_gate, wo_h), bo_h);

  const bool sig = cfg.forget_variant == ForgetVariant::Sigmoid;
  if (!cfg.stabilized) {
    g.i = exp(pi);
    g.f = sig ? sigmoid(pf) : exp(pf);
    g.m = 0;
    return g;
  }
  const double pi_v = static_cast<double>(pi.item());
  const double pf_v = static_cast<double>(pf.item());
  const double logf_v = sig ? detail::logsig(pf_v) : pf_v;
  g.m = std::max(logf_v + m_prev, pi_v);
  Tensor<S> logf = sig ? log(sigmoid(pf)) : pf;
  g.i = exp(shift(pi, static_cast<S>(-g.m)));
  g.f = exp(shift(logf, static_cast<S>(m_prev - g.m)));
  return g;
}

/// Per-head recurrent carry: matrix cell C {dh,dh}, normalizer row n {1,dh},
/// stabilizer m. Zero-initialized at sequence start.
template <typename S>
struct HeadState {
  Tensor<S> C;
  Tensor<S> n;
  double m = 0;
};

template <typename S>
struct MLstmState {
  std::vector<HeadState<S>> heads;
};

template <typename S>
MLstmState<S> zero_state(const MLstmParams<S>& params) {
  MLstmState<S> st;
  st.heads.resize(params.head_count);
  for (auto& h : st.heads) {
    h.C = Tensor<S>::zeros({params.d_head, params.d_head});
    h.n = Tensor<S>::zeros({1, params.d_head});
    h.m = 0;
  }
  return st;
}

/// One recurrence step for one head:
///   C_t = f·C_{t-1} + i·vᵀk;  n_t = f·n_{t-1} + i·k
///   h̃_t = C_t qᵀ / max{|n_t qᵀ|, lower};  h_t = σ(o_preact) ⊙ h̃_t
/// where `lower` is 1, or exp(-m_t) in the stabilized rescaling (the bound
/// lives in the same rescaled domain as C and n).
template <typename S>
std::pair<HeadState<S>, Tensor<S>> step(const HeadState<S>& state, const Tensor<S>& q,
                                        const Tensor<S>& k, const Tensor<S>& v,
                                        const GateOut<S>& gates,
                                        const GateConfig& cfg) {
  HeadState<S> next;
  next.m = gates.m;
  next.C = add(mul(state.C, gates.f), mul(matmul(transpose(v), k), gates.i));
  next.n = add(mul(state.n, gates.f), mul(k, gates.i));

  Tensor<S> dot = matmul(next.n, transpose(q));  // {1,1}
  const S lower = cfg.stabilized ? std::exp(static_cast<S>(-gates.m)) : S(1);
  Tensor<S> den = max_with(abs(dot), lower);
  Tensor<S> h_tilde = div(matmul(q, transpose(next.C)), den);
  Tensor<S> h = mul(sigmoid(gates.o_preact), h_tilde);
  return {std::move(next), std::move(h)};
}

namespace detail {

template <typename S>
void check_seq_input(const Tensor<S>& x_qk, const Tensor<S>& x_v,
                     const MLstmParams<S>& params, const char* who) {
  params.validate();
  if (x_qk.ndim() != 2 || x_v.ndim() != 2)
    throw std::invalid_argument(std::string(who) + ": expected NxD sequences, got " +
                                shape_str(x_qk.shape()) + " / " +
                                shape_str(x_v.shape()));
  if (x_qk.cols() != params.d_in() || x_v.cols() != params.d_in() ||
      x_qk.rows() != x_v.rows())
    throw std::invalid_argument(std::string(who) + ": sequences " +
                                shape_str(x_qk.shape()) + " / " +
                                shape_str(x_v.shape()) + " do not match d_in " +
                                std::to_string(params.d_in()));
}

}  // namespace detail

/// Literal left-to-right recurrence from zero state; O(N) in sequence length.
/// Output: {N, H*dh}, heads concatenated per token.
template <typename S>
Tensor<S> forward_recurrent(const Tensor<S>& x_qk, const Tensor<S>& x_v,
                            const MLstmParams<S>& params, const GateConfig& cfg) {
  detail::check_seq_input(x_qk, x_v, params, "forward_recurrent");
  const Index n = x_qk.rows(), dh = params.d_head;
  QkvSeq<S> qkv = project_qkv(x_qk, x_v, params);
  MLstmState<S> state = zero_state(params);

  std::vector<std::vector<Tensor<S>>> head_rows(params.head_count);
  for (Index t = 0; t < n; ++t) {
    for (Index h = 0; h < params.head_count; ++h) {
      Tensor<S> q = slice(qkv.q, t, t + 1, h * dh, (h + 1) * dh);
      Tensor<S> k = slice(qkv.k, t, t + 1, h * dh, (h + 1) * dh);
      Tensor<S> v = slice(qkv.v, t, t + 1, h * dh, (h + 1) * dh);
      Tensor<S> xg = concat({q, k, v}, 1);
      GateOut<S> gates = compute_gates(xg, params, h, cfg, state.heads[h].m);
      auto [next, h_row] = step(state.heads[h], q, k, v, gates, cfg);
      state.heads[h] = std::move(next);
      head_rows[h].push_back(std::move(h_row));
    }
  }
  std::vector<Tensor<S>> per_head;
  per_head.reserve(params.head_count);
  for (auto& rows : head_rows) per_head.push_back(concat(rows, 0));
  return params.head_count == 1 ? per_head[0] : concat(per_head, 1);
}

/// Closed-form pass over all steps at once: a masked, gate-decayed score
/// matrix applied to V. O(N²) work, numerically equivalent to the recurrence.
///
/// Log-domain assembly per head: with F_t = Σ_{u<=t} log f_u,
///   D[t,s] = ĩ_s + F_t - F_s  (s <= t; the log of "input gate at s times
///   forget decay over (s,t]"). Positions s > t are sent to -1e30 before
///   exponentiation so they vanish without producing Inf·0.
/// Stabilized rows subtract their max (detached) before exp; the denominator
/// bound exp(-rowmax) lives in the same rescaled domain.
template <typename S>
Tensor<S> forward_parallel(const Tensor<S>& x_qk, const Tensor<S>& x_v,
                           const MLstmParams<S>& params, const GateConfig& cfg) {
  detail::check_seq_input(x_qk, x_v, params, "forward_parallel");
  const Index n = x_qk.rows(), dh = params.d_head;
  QkvSeq<S> qkv = project_qkv(x_qk, x_v, params);

  // Constant masks shared across heads.
  Tensor<S> lower_tri = Tensor<S>::zeros({n, n});  // 1 on s<=t
  Tensor<S> mask_off = Tensor<S>::zeros({n, n});   // -1e30 on s>t
  for (Index t = 0; t < n; ++t)
    for (Index s = 0; s < n; ++s) {
      if (s <= t)
        lower_tri.mutable_data()[t * n + s] = S(1);
      else
        mask_off.mutable_data()[t * n + s] = S(-1e30);
    }
  Tensor<S> cumsum = lower_tri;  // matmul with it is an inclusive prefix sum

  const bool sig = cfg.forget_variant == ForgetVariant::Sigmoid;
  std::vector<Tensor<S>> per_head;
  per_head.reserve(params.head_count);
  for (Index h = 0; h < params.head_count; ++h) {
    Tensor<S> q = slice(qkv.q, 0, n, h * dh, (h + 1) * dh);
    Tensor<S> k = slice(qkv.k, 0, n, h * dh, (h + 1) * dh);
    Tensor<S> v = slice(qkv.v, 0, n, h * dh, (h + 1) * dh);
    Tensor<S> xg = concat({q, k, v}, 1);  // {n, 3dh}

    Tensor<S> wi_h = slice(params.wi, h, h + 1, 0, 3 * dh);
    Tensor<S> wf_h = slice(params.wf, h, h + 1, 0, 3 * dh);
    Tensor<S> pi = add(matmul(xg, transpose(wi_h)),
                       slice(params.bi, 0, 1, h, h + 1));  // {n,1}
    Tensor<S> pf = add(matmul(xg, transpose(wf_h)),
                       slice(params.bf, 0, 1, h, h + 1));
    Tensor<S> logf = sig ? log(sigmoid(pf)) : pf;
    Tensor<S> fcum = matmul(cumsum, logf);  // {n,1}, F_t

    Tensor<S> d = add(sub(fcum, transpose(fcum)), transpose(pi));
    Tensor<S> d_masked = add(mul(d, lower_tri), mask_off);

    Tensor<S> scores = matmul(q, transpose(k));  // {n,n}, k already scaled
    Tensor<S> p, bound;                          // bound: {n,1}
    if (cfg.stabilized) {
      Tensor<S> row_m = Tensor<S>::zeros({n, 1});  // detached row maxima
      for (Index t = 0; t < n; ++t) {
        S m = d_masked.at(t, 0);
        for (Index s = 1; s <= t; ++s) m = std::max(m, d_masked.at(t, s));
        row_m.mutable_data()[t] = m;
      }
      p = mul(exp(sub(d_masked, row_m)), scores);
      bound = Tensor<S>::zeros({n, 1});
      for (Index t = 0; t < n; ++t)
        bound.mutable_data()[t] = std::exp(-row_m.at(t, 0));
    } else {
      p = mul(exp(d_masked), scores);
      bound = Tensor<S>::full({n, 1}, S(1));
    }
    Tensor<S> den = pairwise_max(abs(rowsum(p)), bound);
    Tensor<S> h_tilde = div(matmul(p, v), den);

    Tensor<S> wo_h = slice(params.wo, h * 3 * dh, (h + 1) * 3 * dh, 0, dh);
    Tensor<S> bo_h = slice(params.bo, 0, 1, h * dh, (h + 1) * dh);
    Tensor<S> o_pre = add(matmul(xg, wo_h), bo_h);
    per_head.push_back(mul(sigmoid(o_pre), h_tilde));
  }
  return params.head_count == 1 ? per_head[0] : concat(per_head, 1);
}

// Self-input convenience: q, k and v all derive from the same sequence.
template <typename S>
Tensor<S> forward_recurrent(const Tensor<S>& x, const MLstmParams<S>& params,
                            const GateConfig& cfg) {
  return forward_recurrent(x, x, params, cfg);
}

template <typename S>
Tensor<S> forward_parallel(const Tensor<S>& x, const MLstmParams<S>& params,
                           const GateConfig& cfg) {
  return forward_parallel(x, x, params, cfg);
}

}  // namespace xlv
