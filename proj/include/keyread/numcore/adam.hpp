#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "keyread/numcore/tensor.hpp"

namespace keyread {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamSlot {
  Tensor<T> m;
  Tensor<T> v;
  long step = 0;
};

// Moments are keyed by parameter name; a parameter gets a slot on its first
// update, so frozen parameters never appear here.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::map<std::string, AdamSlot<T>> slots;
};

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

// One bias-corrected Adam step for every listed parameter, using its
// accumulated gradient (zero when none flowed).
template <typename T>
void adam_update(const std::vector<NamedParam<T>>& params, AdamState<T>& state) {
  const AdamConfig& c = state.config;
  for (const auto& p : params) {
    auto [it, fresh] = state.slots.try_emplace(p.name);
    AdamSlot<T>& slot = it->second;
    if (fresh) {
      slot.m = Tensor<T>(p.var.shape());
      slot.v = Tensor<T>(p.var.shape());
    }
    require(slot.m.shape() == p.var.shape(), "adam: moment shape mismatch for " + p.name);
    ++slot.step;
    const double corr1 = 1.0 - std::pow(c.beta1, static_cast<double>(slot.step));
    const double corr2 = 1.0 - std::pow(c.beta2, static_cast<double>(slot.step));
    auto g = p.var.grad();
    auto& w = p.var.node()->value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      slot.m[i] = static_cast<T>(c.beta1 * slot.m[i] + (1.0 - c.beta1) * g[i]);
      slot.v[i] = static_cast<T>(c.beta2 * slot.v[i] + (1.0 - c.beta2) * static_cast<double>(g[i]) * g[i]);
      const double mhat = slot.m[i] / corr1;
      const double vhat = slot.v[i] / corr2;
      w[i] = static_cast<T>(w[i] - c.lr * mhat / (std::sqrt(vhat) + c.epsilon));
    }
  }
}

}  // namespace keyread
