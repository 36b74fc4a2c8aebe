#pragma once

// Central finite-difference oracle used by the gradient tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "conceptmark/autodiff.hpp"

namespace testsupport {

using conceptmark::ad::Graph;
using conceptmark::ad::Shape;
using conceptmark::ad::Tensor;
using conceptmark::ad::Var;

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

inline std::vector<double> numeric_grad(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

using ScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Relative error between the tape gradient and central differences for every input.
inline double check_inputs(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h = 1e-5) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t));
  Var out = fn(g, vars);
  g.backward(out);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto eval = [&](const std::vector<double>& x) {
      Graph g2;
      std::vector<Var> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j)
        vs.push_back(g2.constant(j == k ? Tensor(inputs[j].shape, x) : inputs[j]));
      return fn(g2, vs).value()[0];
    };
    worst = std::max(worst, rel_error(vars[k].grad(), numeric_grad(eval, inputs[k].data, h)));
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (double& v : t.data) v = d(rng);
  return t;
}

/// Fixed random projection turning any tensor into a scalar, so every output entry matters.
inline Var project(Graph& g, Var y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return conceptmark::ad::sum(conceptmark::ad::mul(y, g.constant(random_tensor(y.shape(), rng))));
}

}  // namespace testsupport
