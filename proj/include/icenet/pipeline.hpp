// SPDX-License-Identifier: Apache-2.0
//
// End-to-end enhancement: I -> (Y, S) -> Gamma -> Z -> J.
#pragma once

#include <algorithm>
#include <limits>

#include "icenet/image.hpp"
#include "icenet/network.hpp"

namespace icenet {

struct GammaStats {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct Enhancement {
  RgbImage output;  // J, unquantized
  GammaMap gamma;
  LuminanceImage z;
  GammaStats gamma_stats;
  double mean_luma = 0.0;  // mean luminance of J
};

inline GammaStats summarize(const GammaMap& g) {
  GammaStats s{std::numeric_limits<double>::infinity(), 0.0, -std::numeric_limits<double>::infinity()};
  for (double v : g.values()) {
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    s.mean += v;
  }
  s.mean /= static_cast<double>(g.size());
  return s;
}

/// Applies a gamma map to an image. Exposed separately so callers that
/// already hold features can reuse them across exposure levels.
inline Enhancement apply_gamma(const RgbImage& input, const LuminanceImage& y, GammaMap gamma) {
  Enhancement e;
  e.z = gamma_correct(y, gamma);
  e.output = restore_color(input, y, e.z);
  e.gamma_stats = summarize(gamma);
  e.gamma = std::move(gamma);
  e.mean_luma = mean_value(rgb_to_luminance(e.output));
  return e;
}

template <typename T>
Enhancement enhance(const ModelParams<T>& params, const RgbImage& input, const ScribbleMap& scribbles, double eta) {
  require_exposure(eta);
  const LuminanceImage y = rgb_to_luminance(input);
  return apply_gamma(input, y, predict_gamma(params, y, scribbles, eta));
}

template <typename T>
Enhancement enhance(const ModelParams<T>& params, const RgbImage& input, const StrokeList& strokes, double eta) {
  return enhance(params, input, rasterize_scribbles(strokes, input.width(), input.height()), eta);
}

}  // namespace icenet
