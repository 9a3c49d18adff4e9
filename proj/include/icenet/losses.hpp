// SPDX-License-Identifier: Apache-2.0
//
// Training objective: target brightness construction, the interactive
// brightness control loss, the inverse soft-histogram entropy loss, the
// gamma-map smoothness loss, and their weighted total.
//
// Each loss has a plain value+gradient form (used by tests and as the
// backward step) and a tape wrapper.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "icenet/autodiff.hpp"
#include "icenet/error.hpp"
#include "icenet/image.hpp"

namespace icenet {

inline constexpr std::size_t kHistogramBins = 256;
inline constexpr double kEntropyGuard = 1e-6;

enum class Normalization {
  min_max,        // (Y~ - min) / (max - min)
  divide_by_max,  // clamp(Y~ / Y_max, 0, 1)
};

struct TargetOptions {
  double lambda = 5.0;  // scribble strength, on the 0..255 scale
  double gamma = 5.0;   // bilateral gamma exponent
  std::size_t window = 15;
  Normalization normalization = Normalization::min_max;
};

struct HistogramOptions {
  double sigma = 10.0;  // sigmoid slope
  double delta = 1.0;   // bin width
};

struct LossWeights {
  double entropy = 10.0;
  double smoothness = 20.0;
};

struct TargetResult {
  TargetMap target;
  bool degenerate_normalization = false;
};

/// G = eta * Ybar^(1/gamma) + (1 - eta) * (1 - (1 - Ybar)^(1/gamma)).
inline double bilateral_gamma(double ybar, double eta, double gamma) noexcept {
  const double inv = 1.0 / gamma;
  const double dark = std::pow(ybar, inv);
  const double bright = 1.0 - std::pow(1.0 - ybar, inv);
  return eta * dark + (1.0 - eta) * bright;
}

/// Ybar: Y + lambda*S mapped to [0, 1]. Returns true when min == max
/// (the map is then constant 0.5).
inline bool normalize_scribbled(const LuminanceImage& y, const ScribbleMap& s, const TargetOptions& opt,
                                std::vector<double>& ybar) {
  require_same_dims("build_target", y, s);
  ybar.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) ybar[i] = y[i] + opt.lambda * static_cast<double>(s[i]);
  if (opt.normalization == Normalization::divide_by_max) {
    for (double& v : ybar) v = std::clamp(v / kYMax, 0.0, 1.0);
    return false;
  }
  const auto [lo_it, hi_it] = std::minmax_element(ybar.begin(), ybar.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(ybar.begin(), ybar.end(), 0.5);
    return true;
  }
  const double range = hi - lo;
  for (double& v : ybar) v = std::clamp((v - lo) / range, 0.0, 1.0);
  return false;
}

/// Max over a window x window neighbourhood, replicate padding (equivalent
/// to clipping the window at the border). Separable: rows, then columns.
inline std::vector<double> windowed_max(std::span<const double> values, std::size_t width, std::size_t height,
                                        std::size_t window) {
  if (window == 0 || window % 2 == 0) throw RangeError("window size must be odd and >= 1");
  const std::size_t r = window / 2;
  std::vector<double> rows(values.size()), out(values.size());
  for (std::size_t y = 0; y < height; ++y) {
    const double* src = values.data() + y * width;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t x0 = x >= r ? x - r : 0;
      const std::size_t x1 = std::min(width - 1, x + r);
      rows[y * width + x] = *std::max_element(src + x0, src + x1 + 1);
    }
  }
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t y0 = y >= r ? y - r : 0;
    const std::size_t y1 = std::min(height - 1, y + r);
    for (std::size_t x = 0; x < width; ++x) {
      double m = rows[y0 * width + x];
      for (std::size_t yy = y0 + 1; yy <= y1; ++yy) m = std::max(m, rows[yy * width + x]);
      out[y * width + x] = m;
    }
  }
  return out;
}

/// T = Y_max * max_{window}(G). T depends only on inputs and annotations,
/// so it is a constant for the optimizer.
inline TargetResult build_target(const LuminanceImage& y, const ScribbleMap& s, double eta,
                                 const TargetOptions& opt = {}) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw RangeError("exposure level must lie in [0, 1]");
  if (!(opt.gamma >= 1.0)) throw RangeError("bilateral gamma must be >= 1");
  std::vector<double> g;
  const bool degenerate = normalize_scribbled(y, s, opt, g);
  for (double& v : g) v = bilateral_gamma(v, eta, opt.gamma);
  auto m = windowed_max(g, y.width(), y.height(), opt.window);
  for (double& v : m) v *= kYMax;
  return {TargetMap(y.width(), y.height(), std::move(m)), degenerate};
}

struct ScalarGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// (1/N) sum (Z - T)^2 and its gradient in Z.
inline ScalarGrad ibc_loss(std::span<const double> z, std::span<const double> target) {
  if (z.size() != target.size()) throw ShapeError("ibc_loss: Z and T sizes differ");
  const double n = static_cast<double>(z.size());
  ScalarGrad out{0.0, std::vector<double>(z.size())};
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - target[i];
    out.value += d * d;
    out.grad[i] = 2.0 * d / n;
  }
  out.value /= n;
  return out;
}

struct SoftHistogram {
  std::array<double, kHistogramBins> bins{};
  std::size_t pixels = 0;

  double mass() const noexcept {
    double m = 0.0;
    for (double b : bins) m += b;
    return m;
  }
};

namespace detail {

// Bins farther than this from a pixel receive < exp(-300) of its mass,
// below double resolution of any bin or entropy value; they are skipped.
inline constexpr int kHistogramReach = 32;

inline void bin_range(double z, int& lo, int& hi) noexcept {
  const int c = static_cast<int>(std::floor(z));
  lo = std::max(0, c - kHistogramReach);
  hi = std::min(static_cast<int>(kHistogramBins) - 1, c + kHistogramReach + 1);
}

// kappa for offset d = i - z, evaluated on whichever side avoids cancellation.
inline double kappa(double d, const HistogramOptions& o) noexcept {
  const double hi = o.sigma * (d + o.delta / 2);
  const double lo = o.sigma * (d - o.delta / 2);
  const double k = d >= 0 ? ad::sigmoid(-lo) - ad::sigmoid(-hi) : ad::sigmoid(hi) - ad::sigmoid(lo);
  return k / o.delta;
}

inline double sigmoid_slope(double u) noexcept { return ad::sigmoid(u) * ad::sigmoid(-u); }

// d kappa / d z.
inline double kappa_dz(double d, const HistogramOptions& o) noexcept {
  const double hi = o.sigma * (d + o.delta / 2);
  const double lo = o.sigma * (d - o.delta / 2);
  return o.sigma * (sigmoid_slope(lo) - sigmoid_slope(hi)) / o.delta;
}

}  // namespace detail

/// Single-pixel contribution to bin i.
inline double soft_bin_contribution(double z, int bin, const HistogramOptions& opt = {}) noexcept {
  return detail::kappa(static_cast<double>(bin) - z, opt);
}

inline SoftHistogram soft_histogram(std::span<const double> z, const HistogramOptions& opt = {}) {
  SoftHistogram h;
  h.pixels = z.size();
  for (double v : z) {
    int lo = 0, hi = 0;
    detail::bin_range(v, lo, hi);
    for (int i = lo; i <= hi; ++i) h.bins[static_cast<std::size_t>(i)] += detail::kappa(i - v, opt);
  }
  return h;
}

/// dL/dZ from dL/dh.
inline std::vector<double> soft_histogram_backward(std::span<const double> z,
                                                   std::span<const double, kHistogramBins> grad_bins,
                                                   const HistogramOptions& opt = {}) {
  std::vector<double> gz(z.size(), 0.0);
  for (std::size_t p = 0; p < z.size(); ++p) {
    int lo = 0, hi = 0;
    detail::bin_range(z[p], lo, hi);
    double acc = 0.0;
    for (int i = lo; i <= hi; ++i) acc += grad_bins[static_cast<std::size_t>(i)] * detail::kappa_dz(i - z[p], opt);
    gz[p] = acc;
  }
  return gz;
}

/// Shannon entropy (natural log) of p_i = h(i)/N, with 0 ln 0 = 0.
inline double histogram_entropy(const SoftHistogram& h) {
  if (h.pixels == 0) throw ShapeError("histogram over zero pixels");
  const double n = static_cast<double>(h.pixels);
  double e = 0.0;
  for (double b : h.bins) {
    const double p = b / n;
    if (p > 0.0) e -= p * std::log(p);
  }
  return e;
}

/// L_ent = 1 / (entropy + guard); gradient with respect to the 256 bins.
inline ScalarGrad entropy_loss(const SoftHistogram& h) {
  const double n = static_cast<double>(h.pixels);
  const double denom = histogram_entropy(h) + kEntropyGuard;
  ScalarGrad out{1.0 / denom, std::vector<double>(kHistogramBins, 0.0)};
  const double scale = 1.0 / (n * denom * denom);
  for (std::size_t i = 0; i < kHistogramBins; ++i) {
    const double p = h.bins[i] / n;
    if (p > 0.0) out.grad[i] = (std::log(p) + 1.0) * scale;
  }
  return out;
}

/// ||grad_h Gamma||_F^2 + ||grad_v Gamma||_F^2 (forward differences, no 1/N).
inline ScalarGrad smoothness_loss(std::span<const double> gamma, std::size_t width, std::size_t height) {
  if (width < 2 || height < 2) throw ShapeError("smoothness loss needs a map of at least 2x2");
  if (gamma.size() != width * height) throw ShapeError("smoothness_loss: size does not match dimensions");
  ScalarGrad out{0.0, std::vector<double>(gamma.size(), 0.0)};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t i = y * width + x;
      if (x + 1 < width) {
        const double d = gamma[i + 1] - gamma[i];
        out.value += d * d;
        out.grad[i + 1] += 2.0 * d;
        out.grad[i] -= 2.0 * d;
      }
      if (y + 1 < height) {
        const double d = gamma[i + width] - gamma[i];
        out.value += d * d;
        out.grad[i + width] += 2.0 * d;
        out.grad[i] -= 2.0 * d;
      }
    }
  }
  return out;
}

struct LossBreakdown {
  double ibc = 0.0;
  double entropy_weighted = 0.0;
  double smoothness_weighted = 0.0;
  double total = 0.0;
};

inline LossBreakdown combine_losses(double ibc, double entropy, double smoothness, const LossWeights& w = {}) {
  LossBreakdown b;
  b.ibc = ibc;
  b.entropy_weighted = w.entropy * entropy;
  b.smoothness_weighted = w.smoothness * smoothness;
  b.total = b.ibc + b.entropy_weighted + b.smoothness_weighted;
  return b;
}

/// Non-differentiable evaluation of all three losses.
inline LossBreakdown evaluate_losses(const LuminanceImage& z, const TargetMap& target, const GammaMap& gamma,
                                     const LossWeights& w = {}, const HistogramOptions& hopt = {}) {
  require_same_dims("total_loss", z, target);
  require_same_dims("total_loss", z, gamma);
  const double ibc = ibc_loss(z.values(), target.values()).value;
  const double ent = entropy_loss(soft_histogram(z.values(), hopt)).value;
  const double smo = smoothness_loss(gamma.values(), gamma.width(), gamma.height()).value;
  return combine_losses(ibc, ent, smo, w);
}

// ---------------------------------------------------------------------------
// Tape wrappers (double only: training and gradient checks run in 64-bit)
// ---------------------------------------------------------------------------

using DTape = ad::Tape<double>;

inline ad::Var record_ibc(DTape& tape, ad::Var z, const TargetMap& target) {
  auto r = ibc_loss(tape.value(z).data, target.values());
  const std::vector<double> gz = std::move(r.grad);
  return tape.record(ad::Tensor<double>(ad::Dims{1}, std::vector<double>{r.value}), {z},
                     [z, gz](DTape& t, ad::Var self) {
                       const double g = t.grad(self)[0];
                       auto out = t.grad_mut(z);
                       for (std::size_t i = 0; i < gz.size(); ++i) out[i] += g * gz[i];
                     });
}

inline ad::Var record_entropy(DTape& tape, ad::Var z, const HistogramOptions& opt = {}) {
  const SoftHistogram h = soft_histogram(tape.value(z).data, opt);
  auto r = entropy_loss(h);
  std::array<double, kHistogramBins> gh{};
  std::copy(r.grad.begin(), r.grad.end(), gh.begin());
  return tape.record(ad::Tensor<double>(ad::Dims{1}, std::vector<double>{r.value}), {z},
                     [z, gh, opt](DTape& t, ad::Var self) {
                       const double g = t.grad(self)[0];
                       const auto gz = soft_histogram_backward(t.value(z).data, gh, opt);
                       auto out = t.grad_mut(z);
                       for (std::size_t i = 0; i < gz.size(); ++i) out[i] += g * gz[i];
                     });
}

inline ad::Var record_smoothness(DTape& tape, ad::Var gamma) {
  const auto& d = tape.dims(gamma);
  if (d.size() != 3 || d[0] != 1) throw ShapeError("smoothness expects a (1,H,W) gamma tensor");
  auto r = smoothness_loss(tape.value(gamma).data, d[2], d[1]);
  const std::vector<double> gg = std::move(r.grad);
  return tape.record(ad::Tensor<double>(ad::Dims{1}, std::vector<double>{r.value}), {gamma},
                     [gamma, gg](DTape& t, ad::Var self) {
                       const double g = t.grad(self)[0];
                       auto out = t.grad_mut(gamma);
                       for (std::size_t i = 0; i < gg.size(); ++i) out[i] += g * gg[i];
                     });
}

struct LossVars {
  ad::Var ibc;
  ad::Var entropy;
  ad::Var smoothness;
  ad::Var total;
};

inline LossVars record_losses(DTape& tape, ad::Var z, ad::Var gamma, const TargetMap& target,
                              const LossWeights& w = {}, const HistogramOptions& hopt = {}) {
  LossVars v;
  v.ibc = record_ibc(tape, z, target);
  v.entropy = record_entropy(tape, z, hopt);
  v.smoothness = record_smoothness(tape, gamma);
  v.total = tape.weighted_sum({v.ibc, v.entropy, v.smoothness}, {1.0, w.entropy, w.smoothness});
  return v;
}

/// Z = Y_max * (max(Y, floor)/Y_max)^Gamma on the tape.
inline ad::Var record_gamma_correction(DTape& tape, const LuminanceImage& y, ad::Var gamma) {
  ad::Tensor<double> base(ad::Dims{1, y.height(), y.width()}, y.values());
  return tape.pow_floor(base, gamma, kLumaFloor, kYMax);
}

}  // namespace icenet
