#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "octflow/autodiff/tensor.hpp"

namespace octflow::ad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments;  // name -> (m, v)

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One bias-corrected Adam update over every trainable parameter. Only
// parameters whose names start with `prefix` are touched.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const AdamConfig& cfg, const std::string& prefix = {}) {
  const std::uint64_t t = state.step + 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<T>& p = params[i];
    if (!p.trainable || !p.name.starts_with(prefix)) continue;
    for (T g : p.grad.data)
      if (!std::isfinite(static_cast<double>(g)))
        throw TrainingError("non-finite gradient in '" + p.name + "' at step " + std::to_string(t));
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = params[i];
    if (!p.trainable || !p.name.starts_with(prefix)) continue;
    auto it = state.moments.find(p.name);
    if (it == state.moments.end())
      it = state.moments.emplace(p.name, std::make_pair(Tensor<T>(p.value.shape), Tensor<T>(p.value.shape))).first;
    auto& m = it->second.first.data;
    auto& v = it->second.second.data;
    if (m.size() != p.value.size()) throw TrainingError("optimizer state shape mismatch for '" + p.name + "'");
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double g = p.grad.data[k];
      m[k] = static_cast<T>(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g);
      v[k] = static_cast<T>(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g);
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      p.value.data[k] = static_cast<T>(p.value.data[k] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  state.step = t;
}

}  // namespace octflow::ad
