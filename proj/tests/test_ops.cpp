#include <doctest.h>

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fd.hpp"
#include "xlv/ops.hpp"
#include "xlv/rng.hpp"

using xlv::Index;
using xlv::Shape;
using T = xlv::Tensor<double>;

namespace {

T rand_tensor(xlv::Rng& r, Shape shape, double lo = -1, double hi = 1,
              bool grad = true) {
  T t = T::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.mutable_data()[i] = r.uniform(lo, hi);
  t.set_requires_grad(grad);
  return t;
}

// Uniform sample kept `margin` away from a kink point.
double away(xlv::Rng& r, double lo, double hi, double kink, double margin) {
  double v;
  do {
    v = r.uniform(lo, hi);
  } while (std::abs(v - kink) < margin);
  return v;
}

// Central-difference check of y() with a fixed random linear functional on
// top, so every output element contributes to the scalar loss.
fd::Mismatch fdcheck(const std::vector<T>& leaves, const std::function<T()>& y,
                     xlv::Rng& rng, double tol = 1e-6) {
  T probe = y();
  T w = rand_tensor(rng, probe.shape(), -1, 1, false);
  return fd::check(
      leaves, [y, w]() { return xlv::sum(xlv::mul(y(), w)); }, tol);
}

// Normalization input whose per-group variance stays away from zero, where
// the finite-difference oracle loses accuracy to curvature.
T rand_norm_input(xlv::Rng& r, Index rows, Index cols, Index groups) {
  T x = T::zeros({rows, cols});
  Index gsz = cols / groups;
  for (Index i = 0; i < rows; ++i)
    for (Index g = 0; g < groups; ++g) {
      double var = 0;
      while (var < 0.05) {
        double mean = 0;
        for (Index j = 0; j < gsz; ++j) {
          double v = r.uniform(-1, 1);
          x.mutable_data()[i * cols + g * gsz + j] = v;
          mean += v;
        }
        mean /= gsz;
        var = 0;
        for (Index j = 0; j < gsz; ++j) {
          double d = x.at(i, g * gsz + j) - mean;
          var += d * d;
        }
        var /= gsz;
      }
    }
  x.set_requires_grad(true);
  return x;
}

std::vector<Index> rand_perm(xlv::Rng& r, Index n) {
  std::vector<Index> p(n);
  for (Index i = 0; i < n; ++i) p[i] = i;
  for (Index i = n - 1; i > 0; --i) std::swap(p[i], p[r.integer(0, i)]);
  return p;
}

using Registry =
    std::vector<std::pair<std::string, std::function<fd::Mismatch(xlv::Rng&)>>>;

Registry gradient_registry() {
  Registry reg;
  auto put = [&](std::string name, std::function<fd::Mismatch(xlv::Rng&)> fn) {
    reg.emplace_back(std::move(name), std::move(fn));
  };

  put("add", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4}), b = rand_tensor(r, {3, 4});
    return fdcheck({a, b}, [=] { return xlv::add(a, b); }, r);
  });
  put("add broadcast row", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4}), b = rand_tensor(r, {4});
    return fdcheck({a, b}, [=] { return xlv::add(a, b); }, r);
  });
  put("sub broadcast col", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4}), b = rand_tensor(r, {3, 1});
    return fdcheck({a, b}, [=] { return xlv::sub(a, b); }, r);
  });
  put("mul", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4}), b = rand_tensor(r, {3, 4});
    return fdcheck({a, b}, [=] { return xlv::mul(a, b); }, r);
  });
  put("mul broadcast scalar", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4}), b = rand_tensor(r, {1});
    return fdcheck({a, b}, [=] { return xlv::mul(a, b); }, r);
  });
  put("div", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4});
    T b = T::zeros({3, 4});
    for (Index i = 0; i < b.size(); ++i)
      b.mutable_data()[i] = away(r, -1, 1, 0.0, 0.3);
    b.set_requires_grad(true);
    return fdcheck({a, b}, [=] { return xlv::div(a, b); }, r);
  });
  put("scale/shift/neg", [](xlv::Rng& r) {
    T a = rand_tensor(r, {2, 5});
    return fdcheck(
        {a}, [=] { return xlv::neg(xlv::shift(xlv::scale(a, 1.7), -0.3)); }, r);
  });
  put("exp", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 3});
    return fdcheck({a}, [=] { return xlv::exp(a); }, r);
  });
  put("log", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 3}, 0.4, 1.0);
    return fdcheck({a}, [=] { return xlv::log(a); }, r);
  });
  put("sigmoid", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 3});
    return fdcheck({a}, [=] { return xlv::sigmoid(a); }, r);
  });
  put("tanh", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 3});
    return fdcheck({a}, [=] { return xlv::tanh(a); }, r);
  });
  put("abs", [](xlv::Rng& r) {
    T a = T::zeros({3, 3});
    for (Index i = 0; i < a.size(); ++i)
      a.mutable_data()[i] = away(r, -1, 1, 0.0, 0.05);
    a.set_requires_grad(true);
    return fdcheck({a}, [=] { return xlv::abs(a); }, r);
  });
  put("max_with", [](xlv::Rng& r) {
    T a = T::zeros({3, 3});
    for (Index i = 0; i < a.size(); ++i)
      a.mutable_data()[i] = away(r, -1, 1, 0.1, 0.05);
    a.set_requires_grad(true);
    return fdcheck({a}, [=] { return xlv::max_with(a, 0.1); }, r);
  });
  put("pairwise_max", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 3});
    T b = T::zeros({3, 3});
    for (Index i = 0; i < b.size(); ++i)
      b.mutable_data()[i] = away(r, -1, 1, a.at(i), 0.05);
    b.set_requires_grad(true);
    return fdcheck({a, b}, [=] { return xlv::pairwise_max(a, b); }, r);
  });
  put("matmul", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4}), b = rand_tensor(r, {4, 2});
    return fdcheck({a, b}, [=] { return xlv::matmul(a, b); }, r);
  });
  put("transpose", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4});
    return fdcheck({a}, [=] { return xlv::transpose(a); }, r);
  });
  put("reshape", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4});
    return fdcheck({a}, [=] { return xlv::reshape(a, {2, 6}); }, r);
  });
  put("concat axis0", [](xlv::Rng& r) {
    T a = rand_tensor(r, {2, 3}), b = rand_tensor(r, {4, 3});
    return fdcheck({a, b}, [=] { return xlv::concat(a, b, 0); }, r);
  });
  put("concat axis1", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 2}), b = rand_tensor(r, {3, 5});
    return fdcheck({a, b}, [=] { return xlv::concat(a, b, 1); }, r);
  });
  put("slice", [](xlv::Rng& r) {
    T a = rand_tensor(r, {4, 5});
    return fdcheck({a}, [=] { return xlv::slice(a, 1, 3, 2, 5); }, r);
  });
  put("permute_rows", [](xlv::Rng& r) {
    T a = rand_tensor(r, {5, 3});
    auto p = rand_perm(r, 5);
    return fdcheck({a}, [=] { return xlv::permute_rows(a, p); }, r);
  });
  put("gather_flat", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4});
    auto idx = std::make_shared<std::vector<Index>>();
    for (int i = 0; i < 8; ++i) idx->push_back(r.integer(0, a.size() - 1));
    return fdcheck(
        {a}, [=] { return xlv::gather_flat(a, idx, Shape{2, 4}); }, r);
  });
  put("sum/mean", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 4});
    return fdcheck(
        {a}, [=] { return xlv::add(xlv::sum(a), xlv::mean(a)); }, r);
  });
  put("rowsum", [](xlv::Rng& r) {
    T a = rand_tensor(r, {4, 3});
    return fdcheck({a}, [=] { return xlv::rowsum(a); }, r);
  });
  put("rowmax", [](xlv::Rng& r) {
    // keep the top-2 gap in each row clear of the FD step
    T a = T::zeros({4, 5});
    for (Index i = 0; i < a.rows(); ++i) {
      bool ok = false;
      while (!ok) {
        for (Index j = 0; j < a.cols(); ++j)
          a.mutable_data()[i * a.cols() + j] = r.uniform(-1, 1);
        double top = -2, second = -2;
        for (Index j = 0; j < a.cols(); ++j) {
          double v = a.at(i, j);
          if (v > top) {
            second = top;
            top = v;
          } else if (v > second) {
            second = v;
          }
        }
        ok = top - second > 1e-3;
      }
    }
    a.set_requires_grad(true);
    return fdcheck({a}, [=] { return xlv::rowmax(a); }, r);
  });
  put("softmax", [](xlv::Rng& r) {
    T a = rand_tensor(r, {3, 5});
    return fdcheck({a}, [=] { return xlv::softmax(a); }, r);
  });
  put("layer_norm", [](xlv::Rng& r) {
    T x = rand_norm_input(r, 4, 6, 1);
    T g = rand_tensor(r, {6}, 0.5, 1.5);
    T b = rand_tensor(r, {6});
    return fdcheck({x, g, b}, [=] { return xlv::layer_norm(x, g, b); }, r);
  });
  put("group_norm", [](xlv::Rng& r) {
    T x = rand_norm_input(r, 4, 8, 2);
    T g = rand_tensor(r, {8}, 0.5, 1.5);
    T b = rand_tensor(r, {8});
    return fdcheck({x, g, b}, [=] { return xlv::group_norm(x, g, b, Index(2)); },
                   r);
  });
  put("causal_conv1d", [](xlv::Rng& r) {
    T x = rand_tensor(r, {6, 3});
    T k = rand_tensor(r, {3, 3});
    return fdcheck({x, k}, [=] { return xlv::causal_conv1d(x, k); }, r);
  });
  return reg;
}

}  // namespace

TEST_CASE("every differentiable op matches central finite differences") {
  Registry reg = gradient_registry();
  for (int trial = 0; trial < 100; ++trial) {
    xlv::Rng rng(1000 + trial);
    for (auto& [name, fn] : reg) {
      fd::Mismatch m = fn(rng);
      INFO("op=", name, " trial=", trial, " at ", m.where, " analytic=",
           m.analytic, " numeric=", m.numeric, " rel=", m.err);
      REQUIRE(m.ok);
    }
  }
}

TEST_CASE("matmul against identity is a no-op") {
  T eye = T::from({2, 2}, {1, 0, 0, 1});
  T v = T::from({2, 1}, {3, 4});
  T out = xlv::matmul(eye, v);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(1, 0) == 4.0);
}

TEST_CASE("softmax of a constant row is uniform, sums to one, lies in (0,1)") {
  T z = T::from({3}, {0, 0, 0});
  T s = xlv::softmax(z);
  for (Index i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3));

  xlv::Rng rng(5);
  T x = rand_tensor(rng, {6, 9}, -4, 4, false);
  T y = xlv::softmax(x);
  for (Index i = 0; i < y.rows(); ++i) {
    double rowsum = 0;
    for (Index j = 0; j < y.cols(); ++j) {
      CHECK(y.at(i, j) > 0.0);
      CHECK(y.at(i, j) < 1.0);
      rowsum += y.at(i, j);
    }
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax is stable under large inputs") {
  T x = T::from({3}, {1000.0, 1000.5, 999.0});
  T y = xlv::softmax(x);
  double total = y.at(0) + y.at(1) + y.at(2);
  CHECK(std::isfinite(total));
  CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("causal conv reads only current and past positions") {
  xlv::Rng rng(11);
  T x = rand_tensor(rng, {8, 2}, -1, 1, false);
  T k = rand_tensor(rng, {3, 2}, -1, 1, false);
  T base = xlv::causal_conv1d(x, k);

  // Perturbing x at position s must not change outputs at t < s.
  for (Index s = 1; s < 8; ++s) {
    T xp = xlv::detach(x);
    xp.mutable_data()[s * 2] += 10.0;
    T out = xlv::causal_conv1d(xp, k);
    for (Index t = 0; t < s; ++t)
      for (Index c = 0; c < 2; ++c) CHECK(out.at(t, c) == base.at(t, c));
  }
  // t=0 output depends only on x[0]: out[0] = k[0] * x[0]
  for (Index c = 0; c < 2; ++c)
    CHECK(base.at(0, c) == doctest::Approx(k.at(0, c) * x.at(0, c)));
  // kernel=3 at position t reads exactly t-2..t
  Index t = 5;
  double expect = 0;
  for (Index tau = 0; tau < 3; ++tau) expect += k.at(tau, 0) * x.at(t - tau, 0);
  CHECK(base.at(t, 0) == doctest::Approx(expect));
}

TEST_CASE("norms standardize per group before the affine map") {
  xlv::Rng rng(21);
  T x = rand_tensor(rng, {5, 12}, -3, 3, false);
  T ones = T::full({12}, 1.0);
  T zeros = T::zeros({12});

  for (Index groups : {Index(1), Index(3), Index(6)}) {
    T y = xlv::group_norm(x, ones, zeros, groups, 0.0);
    Index gsz = 12 / groups;
    for (Index i = 0; i < y.rows(); ++i)
      for (Index g = 0; g < groups; ++g) {
        double mean = 0, var = 0;
        for (Index j = 0; j < gsz; ++j) mean += y.at(i, g * gsz + j);
        mean /= gsz;
        for (Index j = 0; j < gsz; ++j) {
          double d = y.at(i, g * gsz + j) - mean;
          var += d * d;
        }
        var /= gsz;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
      }
  }
}

TEST_CASE("shape mismatches name the op and both shapes") {
  T a = T::zeros({2, 3});
  T b = T::zeros({4, 5});
  try {
    xlv::matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK_THROWS_AS(xlv::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(xlv::concat(a, b, 0), std::invalid_argument);
  CHECK_THROWS_AS(xlv::reshape(a, {7}), std::invalid_argument);
  CHECK_THROWS_AS(xlv::slice(a, 0, 3, 0, 3), std::invalid_argument);
  CHECK_THROWS_AS(xlv::group_norm(a, T::zeros({3}), T::zeros({3}), Index(2)),
                  std::invalid_argument);
  CHECK_THROWS_AS(xlv::permute_rows(a, {0, 0}), std::invalid_argument);
}

TEST_CASE("random op chains differentiate correctly") {
  // Three-op chains assembled at random, checked against central differences.
  xlv::Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    T a = rand_tensor(rng, {3, 4}, 0.3, 1.0);
    T b = rand_tensor(rng, {3, 4}, 0.3, 1.0);
    int pick = static_cast<int>(rng.integer(0, 3));
    auto build = [a, b, pick]() -> T {
      switch (pick) {
        case 0: return xlv::sum(xlv::mul(xlv::sigmoid(a), xlv::log(b)));
        case 1: return xlv::sum(xlv::tanh(xlv::add(xlv::exp(a), b)));
        case 2: return xlv::mean(xlv::mul(a, xlv::softmax(b)));
        default: return xlv::sum(xlv::div(xlv::exp(a), xlv::shift(xlv::abs(b), 1.0)));
      }
    };
    fd::Mismatch m = fd::check({a, b}, build);
    INFO("chain=", pick, " trial=", trial, " at ", m.where);
    REQUIRE(m.ok);
  }
}
