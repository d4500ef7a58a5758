#pragma once
// Central finite-difference oracle for graph gradients, 64-bit.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "octflow/autodiff/graph.hpp"

namespace octflow::fixtures {

using GraphD = ad::Graph<double>;
using TensorD = ad::Tensor<double>;

struct GradCheckResult {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
  std::string worst_input;
};

inline TensorD random_tensor(ad::Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Builds `build(graph, inputs)` over inputs with the given values, reduces the
// output with a random projection and compares the analytic input gradients
// against central differences with step h. The graph is reseeded with
// `dropout_seed` before every forward so stochastic masks stay fixed.
inline GradCheckResult check_gradients(const std::function<ad::Var(GraphD&, const std::vector<ad::Var>&)>& build,
                                       std::vector<TensorD> values, std::mt19937_64& rng, bool training = true,
                                       double h = 1e-5, std::uint64_t dropout_seed = 99) {
  GraphD g;
  g.set_training(training);
  std::vector<ad::Var> inputs;
  for (std::size_t i = 0; i < values.size(); ++i) {
    inputs.push_back(g.input("x" + std::to_string(i), true));
    g.set_input(inputs.back(), values[i]);
  }
  const ad::Var out = build(g, inputs);
  g.reseed(dropout_seed);
  g.forward();
  const ad::Var proj = g.input("projection");
  g.set_input(proj, random_tensor(g.value(out).shape, rng));
  const ad::Var loss = g.reduce_mean(g.mul(out, proj));

  auto eval = [&] {
    g.reseed(dropout_seed);
    g.forward();
    return g.value(loss).data[0];
  };
  eval();
  g.backward(loss);
  std::vector<TensorD> analytic;
  for (auto v : inputs) analytic.push_back(g.grad(v));

  double diff2 = 0, a2 = 0, n2 = 0;
  GradCheckResult res;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t k = 0; k < values[i].size(); ++k) {
      TensorD plus = values[i], minus = values[i];
      plus.data[k] += h;
      minus.data[k] -= h;
      g.set_input(inputs[i], plus);
      const double fp = eval();
      g.set_input(inputs[i], minus);
      const double fm = eval();
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[i].data[k];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    g.set_input(inputs[i], values[i]);
  }
  const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
  res.relative_error = std::sqrt(diff2) / denom;
  res.analytic_norm = std::sqrt(a2);
  return res;
}

}  // namespace octflow::fixtures
