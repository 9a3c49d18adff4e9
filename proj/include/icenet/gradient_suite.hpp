// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of every loss through all network
// parameters on a small random image.
#pragma once

#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "icenet/gradcheck.hpp"
#include "icenet/losses.hpp"
#include "icenet/network.hpp"

namespace icenet {

enum class LossTerm { ibc, entropy, smoothness, total };

inline const char* loss_term_name(LossTerm t) {
  switch (t) {
    case LossTerm::ibc: return "l_ibc";
    case LossTerm::entropy: return "l_ent";
    case LossTerm::smoothness: return "l_smo";
    case LossTerm::total: return "total";
  }
  return "?";
}

struct GradientSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t side = 8;
  std::size_t coords_per_block = 24;
  double step = 1e-5;
  double abs_floor = 1e-6;
  double noise_floor = 1e5;
  int order = 4;
  NetworkConfig network;
};

struct LossGradCheck {
  LossTerm term = LossTerm::total;
  ad::GradCheckReport report;
};

struct GradientSuiteResult {
  std::vector<LossGradCheck> checks;
  double seconds = 0.0;

  double worst() const noexcept {
    double w = 0.0;
    for (const auto& c : checks) w = std::max(w, c.report.max_rel_error);
    return w;
  }
};

/// Weights ~ N(0, 2/fan_in), biases ~ N(0, 0.1^2). The default small init
/// leaves deep activations near zero, where every gradient is dominated by
/// round-off and the check says little.
inline ModelParams<double> gradcheck_params(std::uint64_t seed, const NetworkConfig& cfg) {
  std::mt19937_64 rng(seed);
  auto p = ModelParams<double>::zeros(cfg);
  for (auto& t : p.tensors()) {
    const auto& d = t.tensor.dims;
    const double stddev = d.size() == 1 ? 0.1 : std::sqrt(2.0 / static_cast<double>(t.tensor.size() / d[0]));
    std::normal_distribution<double> normal(0.0, stddev);
    for (double& v : t.tensor.data) v = normal(rng);
  }
  return p;
}

inline GradientSuiteResult run_gradient_suite(const GradientSuiteOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> lum(0.0, 255.0);
  std::uniform_int_distribution<int> scribble(-1, 1);
  std::uniform_real_distribution<double> exposure(0.2, 0.8);

  LuminanceImage y(opt.side, opt.side);
  ScribbleMap s(opt.side, opt.side);
  for (auto& v : y.values()) v = lum(rng);
  for (auto& v : s.values()) v = static_cast<std::int8_t>(scribble(rng));
  const double eta = exposure(rng);
  const TargetMap target = build_target(y, s, eta).target;
  const auto input = make_network_input<double>(y, s);
  ModelParams<double> params = gradcheck_params(rng(), opt.network);
  // Logits are linear in the fc2 parameters; scale them to unit RMS so the
  // sigmoid is exercised away from saturation.
  {
    const auto features = extract_features(params, input);
    const auto w = driving_vector(params, eta);
    std::vector<double> logits(y.size());
    ad::kernels::inner_product_forward<double>(features.data, w.size(), w, logits);
    double ss = 0.0;
    for (double l : logits) ss += l * l;
    const double rms = std::sqrt(ss / static_cast<double>(logits.size()));
    if (rms > 0.0) {
      for (std::size_t k : {ModelParams<double>::kFc2, ModelParams<double>::kFc2 + 1})
        for (double& v : params[k].tensor.data) v /= rms;
    }
  }

  GradientSuiteResult result;
  for (LossTerm term : {LossTerm::ibc, LossTerm::entropy, LossTerm::smoothness, LossTerm::total}) {
    auto forward = [&](DTape& tape, std::vector<ad::Var>& vars) {
      vars = bind_parameters(tape, params);
      const auto fw = record_forward<double>(tape, vars, params.config(), input, eta);
      const ad::Var z = record_gamma_correction(tape, y, fw.gamma);
      switch (term) {
        case LossTerm::ibc: return record_ibc(tape, z, target);
        case LossTerm::entropy: return record_entropy(tape, z);
        case LossTerm::smoothness: return record_smoothness(tape, fw.gamma);
        case LossTerm::total: break;
      }
      return record_losses(tape, z, fw.gamma, target).total;
    };

    DTape tape;
    std::vector<ad::Var> vars;
    tape.backward(forward(tape, vars));
    std::vector<std::vector<double>> grads;
    for (ad::Var v : vars) grads.emplace_back(tape.grad(v).begin(), tape.grad(v).end());
    std::vector<ad::CheckBlock> blocks;
    for (std::size_t k = 0; k < vars.size(); ++k) blocks.push_back({params[k].name, params[k].tensor.data, grads[k]});

    ad::GradCheckOptions gopt;
    gopt.step = opt.step;
    gopt.coords_per_block = opt.coords_per_block;
    gopt.seed = opt.seed + static_cast<std::uint64_t>(term);
    gopt.abs_floor = opt.abs_floor;
    gopt.noise_floor = opt.noise_floor;
    gopt.order = opt.order;
    auto probe = [&] {
      DTape t;
      std::vector<ad::Var> v;
      const ad::Var l = forward(t, v);
      return ad::Probe{t.value(l).data[0], t.activation_signature()};
    };
    result.checks.push_back({term, ad::finite_diff_check(probe, blocks, gopt)});
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace icenet
