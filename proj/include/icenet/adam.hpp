// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "icenet/error.hpp"

namespace icenet::ad {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One parameter tensor as seen by the optimizer.
struct ParamRef {
  std::string_view name;
  std::span<double> values;
  std::span<const double> grad;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

class NonFiniteGradient : public NumericError {
 public:
  NonFiniteGradient(std::string param, std::size_t index)
      : NumericError("non-finite gradient in '" + param + "' at index " + std::to_string(index)),
        param_(std::move(param)),
        index_(index) {}
  const std::string& param() const noexcept { return param_; }
  std::size_t index() const noexcept { return index_; }

 private:
  std::string param_;
  std::size_t index_;
};

/// Bias-corrected Adam update. Gradients are validated up front; a rejected
/// step leaves parameters and state untouched.
inline void adam_step(std::span<const ParamRef> params, AdamState& state, double lr, const AdamOptions& opt = {}) {
  if (!(lr >= 0.0)) throw RangeError("learning rate must be >= 0");
  for (const ParamRef& p : params) {
    if (p.values.size() != p.grad.size()) throw ShapeError("adam: gradient shape mismatch for " + std::string(p.name));
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (!std::isfinite(p.grad[i])) throw NonFiniteGradient(std::string(p.name), i);
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.m[k].assign(params[k].values.size(), 0.0);
      state.v[k].assign(params[k].values.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != params[k].values.size()) throw ShapeError("adam: moment shape mismatch for " + std::string(params[k].name));
    const auto g = params[k].grad;
    auto theta = params[k].values;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + opt.epsilon);
    }
  }
}

}  // namespace icenet::ad
