#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "xlv/rng.hpp"
#include "xlv/tensor.hpp"

namespace xlv {

template <typename S>
struct ParamGroup {
  std::string name;
  Tensor<S> tensor;
};

struct GradEntry {
  std::string name;
  double analytic_norm = 0;  // L2 over the full analytic gradient
  double numeric_norm = 0;   // L2 over the sampled central differences
  double max_rel_err = 0;
  Index checked = 0;         // elements compared
};

struct GradReport {
  std::vector<GradEntry> entries;
  bool deterministic = true;
  double max_rel_err = 0;

  bool ok(double tol) const { return deterministic && max_rel_err < tol; }
};

/// Central-difference audit of backward() through an arbitrary closure.
///
/// `closure` rebuilds the scalar loss from the current parameter values on
/// every call. Each parameter group is perturbed elementwise by ±eps; the
/// relative error is |a-n| / max(|a|, |n|, 1e-12). A closure that returns
/// different bits on identical inputs invalidates the whole comparison, so
/// that is detected first and reported rather than blamed on the gradients.
///
/// `samples_per_group` == 0 checks every element; a positive value checks a
/// seeded deterministic subset (large models would otherwise need two closure
/// evaluations per scalar parameter).
template <typename S>
GradReport grad_check(const std::function<Tensor<S>()>& closure,
                      const std::vector<ParamGroup<S>>& params, double eps,
                      Index samples_per_group = 0, std::uint64_t seed = 17) {
  if (!(eps > 0))
    throw std::invalid_argument("grad_check: eps must be positive, got " +
                                std::to_string(eps));

  GradReport report;
  S first = closure().item();
  S second = closure().item();
  if (std::memcmp(&first, &second, sizeof(S)) != 0) {
    report.deterministic = false;
    return report;
  }

  for (const auto& p : params) const_cast<Tensor<S>&>(p.tensor).zero_grad();
  Tensor<S> loss = closure();
  backward(loss);

  Rng rng(seed);
  for (const auto& p : params) {
    Tensor<S> t = p.tensor;
    GradEntry e;
    e.name = p.name;
    for (Index i = 0; i < t.size(); ++i) {
      double a = t.has_grad() ? static_cast<double>(t.grad_data()[i]) : 0.0;
      e.analytic_norm += a * a;
    }
    e.analytic_norm = std::sqrt(e.analytic_norm);

    std::vector<Index> picks;
    if (samples_per_group <= 0 || samples_per_group >= t.size()) {
      picks.resize(t.size());
      for (Index i = 0; i < t.size(); ++i) picks[i] = i;
    } else {
      // sample without replacement from a shrinking prefix
      std::vector<Index> pool(t.size());
      for (Index i = 0; i < t.size(); ++i) pool[i] = i;
      for (Index i = 0; i < samples_per_group; ++i) {
        Index j = rng.integer(i, t.size() - 1);
        std::swap(pool[i], pool[j]);
        picks.push_back(pool[i]);
      }
    }

    for (Index i : picks) {
      S orig = t.data()[i];
      t.mutable_data()[i] = orig + static_cast<S>(eps);
      double up = static_cast<double>(closure().item());
      t.mutable_data()[i] = orig - static_cast<S>(eps);
      double dn = static_cast<double>(closure().item());
      t.mutable_data()[i] = orig;
      double n = (up - dn) / (2 * eps);
      double a = t.has_grad() ? static_cast<double>(t.grad_data()[i]) : 0.0;
      double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
      e.numeric_norm += n * n;
      e.max_rel_err = std::max(e.max_rel_err, rel);
      ++e.checked;
    }
    e.numeric_norm = std::sqrt(e.numeric_norm);
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace xlv
