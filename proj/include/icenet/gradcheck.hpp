// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient verification.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "icenet/error.hpp"

namespace icenet::ad {

/// A forward evaluation. `signature` identifies the active linear region of
/// piecewise-linear ops (ReLU masks); 0 when the computation has none.
struct Probe {
  double value = 0.0;
  std::uint64_t signature = 0;
};

struct CheckBlock {
  std::string name;
  std::span<double> values;          // perturbed in place, restored afterwards
  std::span<const double> analytic;  // gradient at the unperturbed point
};

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coords_per_block = 8;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged by absolute error instead.
  double abs_floor = 1e-6;
  // The floor is raised to noise_floor * eps * |f| / step, where
  // eps * |f| / step is the size of one rounding step of f in the
  // difference quotient. 0 disables this.
  double noise_floor = 0.0;
  // 2: (f(x+h) - f(x-h)) / 2h. 4: the fourth-order five-point stencil.
  int order = 2;
};

struct CoordinateCheck {
  std::string block;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nondifferentiable = 0;
  CoordinateCheck worst;
};

inline double relative_error(double analytic, double numeric, double abs_floor) noexcept {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename F>
concept ProbeFunction = std::invocable<F&> && (std::same_as<std::invoke_result_t<F&>, Probe> ||
                                               std::convertible_to<std::invoke_result_t<F&>, double>);

/// Compares analytic gradients against central differences on a random
/// subset of each block's coordinates. Coordinates whose perturbation
/// crosses a ReLU kink (signature change) are skipped and replaced.
template <ProbeFunction F>
GradCheckReport finite_diff_check(F&& evaluate, std::span<const CheckBlock> blocks, const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0.0)) throw RangeError("finite-difference step must be > 0");
  if (opt.order != 2 && opt.order != 4) throw RangeError("finite-difference order must be 2 or 4");
  auto run = [&]() -> Probe {
    if constexpr (std::same_as<std::invoke_result_t<F&>, Probe>) {
      return evaluate();
    } else {
      return Probe{static_cast<double>(evaluate()), 0};
    }
  };

  const Probe base = run();
  const Probe again = run();
  if (base.value != again.value || base.signature != again.signature) {
    throw NumericError("non-deterministic computation: repeated forward passes disagree");
  }

  const double floor =
      std::max(opt.abs_floor, opt.noise_floor * std::numeric_limits<double>::epsilon() * std::abs(base.value) / opt.step);
  std::mt19937_64 rng(opt.seed);
  GradCheckReport report;
  for (const CheckBlock& block : blocks) {
    if (block.values.size() != block.analytic.size()) {
      throw ShapeError("gradient check block '" + block.name + "' has mismatched gradient size");
    }
    std::vector<std::size_t> order(block.values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t taken = 0;
    for (std::size_t idx : order) {
      if (taken == opt.coords_per_block) break;
      double& x = block.values[idx];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return run();
      };
      const double h = opt.step;
      bool kink = false;
      double numeric = 0.0;
      if (opt.order == 2) {
        const Probe p1 = at(h), m1 = at(-h);
        kink = p1.signature != base.signature || m1.signature != base.signature;
        numeric = (p1.value - m1.value) / (2.0 * h);
      } else {
        const Probe p2 = at(2 * h), p1 = at(h), m1 = at(-h), m2 = at(-2 * h);
        kink = p2.signature != base.signature || p1.signature != base.signature || m1.signature != base.signature ||
               m2.signature != base.signature;
        numeric = (8.0 * (p1.value - m1.value) - (p2.value - m2.value)) / (12.0 * h);
      }
      x = saved;
      if (kink) {
        ++report.skipped_nondifferentiable;
        continue;
      }
      const double analytic = block.analytic[idx];
      const double err = relative_error(analytic, numeric, floor);
      ++taken;
      ++report.checked;
      if (report.checked == 1 || !(err <= report.max_rel_error)) {
        report.max_rel_error = std::isnan(err) ? INFINITY : err;
        report.worst = CoordinateCheck{block.name, idx, analytic, numeric, err};
      }
    }
  }
  return report;
}

}  // namespace icenet::ad
