// SPDX-License-Identifier: Apache-2.0
//
// IceNet: a seven-layer convolutional feature extractor with concatenated
// skip connections, and the adaptive gamma estimation block (two FC layers
// turning the exposure level into a driving vector, then a per-pixel inner
// product squashed to (0, 10)).
//
// Everything is templated on the scalar: double for training and gradient
// checks, float for interactive inference.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "icenet/autodiff.hpp"
#include "icenet/error.hpp"
#include "icenet/image.hpp"
#include "icenet/winograd.hpp"

namespace icenet {

inline constexpr std::size_t kConvLayers = 7;

struct NetworkConfig {
  std::size_t channels = 32;
  // Mirror skips: concat(c3,c4)->c5, concat(c2,c5)->c6, concat(c1,c6)->c7.
  // false gives a plain chain (ablation).
  bool skip_connections = true;

  bool operator==(const NetworkConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  ad::Dims dims;
};

inline std::size_t conv_input_channels(const NetworkConfig& cfg, std::size_t layer) {
  if (layer == 0) return 2;  // (Y, S)
  if (cfg.skip_connections && layer >= 4) return 2 * cfg.channels;
  return cfg.channels;
}

/// Tensor names and shapes in checkpoint order.
inline std::vector<TensorSpec> parameter_layout(const NetworkConfig& cfg = {}) {
  std::vector<TensorSpec> specs;
  const std::size_t c = cfg.channels;
  for (std::size_t l = 0; l < kConvLayers; ++l) {
    const std::string prefix = "conv" + std::to_string(l + 1);
    specs.push_back({prefix + ".weight", {c, conv_input_channels(cfg, l), 3, 3}});
    specs.push_back({prefix + ".bias", {c}});
  }
  specs.push_back({"fc1.weight", {c, 1}});
  specs.push_back({"fc1.bias", {c}});
  specs.push_back({"fc2.weight", {c, c}});
  specs.push_back({"fc2.bias", {c}});
  return specs;
}

inline std::size_t parameter_count(const NetworkConfig& cfg = {}) {
  std::size_t n = 0;
  for (const auto& s : parameter_layout(cfg)) n += ad::element_count(s.dims);
  return n;
}

template <typename T>
struct NamedTensor {
  std::string name;
  ad::Tensor<T> tensor;
  bool operator==(const NamedTensor&) const = default;
};

/// All weights and biases, stored in parameter_layout() order.
template <typename T>
class ModelParams {
 public:
  static constexpr std::size_t kFc1 = 2 * kConvLayers;
  static constexpr std::size_t kFc2 = kFc1 + 2;

  ModelParams() = default;
  ModelParams(NetworkConfig cfg, std::vector<NamedTensor<T>> tensors) : cfg_(cfg), tensors_(std::move(tensors)) {
    validate();
  }

  /// All-zero parameters.
  static ModelParams zeros(const NetworkConfig& cfg = {}) {
    std::vector<NamedTensor<T>> tensors;
    for (auto& s : parameter_layout(cfg)) tensors.push_back({s.name, ad::Tensor<T>(s.dims)});
    return ModelParams(cfg, std::move(tensors));
  }

  const NetworkConfig& config() const noexcept { return cfg_; }
  std::size_t tensor_count() const noexcept { return tensors_.size(); }
  std::vector<NamedTensor<T>>& tensors() noexcept { return tensors_; }
  const std::vector<NamedTensor<T>>& tensors() const noexcept { return tensors_; }
  const NamedTensor<T>& operator[](std::size_t i) const { return tensors_.at(i); }
  NamedTensor<T>& operator[](std::size_t i) { return tensors_.at(i); }

  const ad::Tensor<T>& conv_weight(std::size_t layer) const { return tensors_.at(2 * layer).tensor; }
  const ad::Tensor<T>& conv_bias(std::size_t layer) const { return tensors_.at(2 * layer + 1).tensor; }
  const ad::Tensor<T>& fc1_weight() const { return tensors_.at(kFc1).tensor; }
  const ad::Tensor<T>& fc1_bias() const { return tensors_.at(kFc1 + 1).tensor; }
  const ad::Tensor<T>& fc2_weight() const { return tensors_.at(kFc2).tensor; }
  const ad::Tensor<T>& fc2_bias() const { return tensors_.at(kFc2 + 1).tensor; }

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.tensor.size();
    return n;
  }

  bool all_finite() const noexcept {
    for (const auto& t : tensors_)
      for (T v : t.tensor.data)
        if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const ModelParams&) const = default;

 private:
  void validate() const {
    const auto layout = parameter_layout(cfg_);
    if (tensors_.size() != layout.size()) {
      throw ShapeError("expected " + std::to_string(layout.size()) + " parameter tensors, got " +
                       std::to_string(tensors_.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (tensors_[i].name != layout[i].name) {
        throw ShapeError("parameter " + std::to_string(i) + " should be '" + layout[i].name + "', got '" +
                         tensors_[i].name + "'");
      }
      if (tensors_[i].tensor.dims != layout[i].dims) {
        throw ShapeError("shape mismatch for tensor '" + layout[i].name + "': expected " +
                         ad::dims_to_string(layout[i].dims) + ", got " + ad::dims_to_string(tensors_[i].tensor.dims));
      }
    }
  }

  NetworkConfig cfg_;
  std::vector<NamedTensor<T>> tensors_;
};

template <typename To, typename From>
ModelParams<To> params_cast(const ModelParams<From>& p) {
  std::vector<NamedTensor<To>> out;
  out.reserve(p.tensor_count());
  for (const auto& t : p.tensors()) out.push_back({t.name, ad::tensor_cast<To>(t.tensor)});
  return ModelParams<To>(p.config(), std::move(out));
}

inline constexpr double kDefaultInitStd = 0.02;

/// Weights ~ N(0, std^2) drawn in layout order from mt19937_64(seed); biases 0.
template <typename T = double>
ModelParams<T> init_params(std::uint64_t seed, const NetworkConfig& cfg = {}, double stddev = kDefaultInitStd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  auto params = ModelParams<T>::zeros(cfg);
  for (auto& t : params.tensors()) {
    if (t.tensor.rank() == 1) continue;
    for (T& v : t.tensor.data) v = static_cast<T>(normal(rng));
  }
  return params;
}

inline void require_exposure(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw RangeError("exposure level must lie in [0, 1], got " + std::to_string(eta));
}

/// Network input (2, H, W): luminance scaled to [0, 1] and the raw scribble map.
template <typename T>
ad::Tensor<T> make_network_input(const LuminanceImage& y, const ScribbleMap& s) {
  require_same_dims("network input", y, s);
  const std::size_t hw = y.size();
  ad::Tensor<T> in(ad::Dims{2, y.height(), y.width()});
  for (std::size_t i = 0; i < hw; ++i) {
    in.data[i] = static_cast<T>(y[i] / kYMax);
    in.data[hw + i] = static_cast<T>(s[i]);
  }
  return in;
}

// Largest double strictly below the upper bound; sigmoid saturation in
// finite precision would otherwise reach 10 exactly.
inline double clamp_gamma(double g) noexcept {
  static const double hi = std::nextafter(kGammaUpper, 0.0);
  return std::clamp(g, std::numeric_limits<double>::min(), hi);
}

// ---------------------------------------------------------------------------
// Inference (no tape)
// ---------------------------------------------------------------------------

namespace detail {

// Free list of large scratch vectors shared by all threads. Fresh mappings
// cost a page fault per 4 KiB on first touch, which on full-size images is
// comparable to a convolution layer; request threads come and go.
template <typename T>
class ScratchPool {
 public:
  static ScratchPool& shared() {
    static ScratchPool pool;
    return pool;
  }

  std::vector<T> take(std::size_t n) {
    std::vector<T> v;
    {
      std::lock_guard lock(mutex_);
      if (!free_.empty()) {
        auto it = std::max_element(free_.begin(), free_.end(),
                                   [](const auto& x, const auto& y) { return x.size() < y.size(); });
        v = std::move(*it);
        free_.erase(it);
      }
    }
    if (v.size() < n) v.resize(n);
    return v;
  }

  void give(std::vector<T> v) {
    if (v.size() * sizeof(T) > kMaxRetainedBytes) return;
    std::lock_guard lock(mutex_);
    if (free_.size() < kMaxRetained) free_.push_back(std::move(v));
  }

 private:
  static constexpr std::size_t kMaxRetained = 4;
  static constexpr std::size_t kMaxRetainedBytes = std::size_t{512} << 20;
  std::mutex mutex_;
  std::vector<std::vector<T>> free_;
};

template <typename T>
class Scratch {
 public:
  explicit Scratch(std::size_t n) : data_(ScratchPool<T>::shared().take(n)) {}
  ~Scratch() { ScratchPool<T>::shared().give(std::move(data_)); }
  Scratch(const Scratch&) = delete;
  Scratch& operator=(const Scratch&) = delete;
  T* data() noexcept { return data_.data(); }

 private:
  std::vector<T> data_;
};

}  // namespace detail

/// Rows of context each side of a strip: one per 3x3 layer.
inline constexpr std::size_t kFeatureHalo = kConvLayers;
/// Activation memory per inference pass; larger images run in strips.
inline constexpr std::size_t kInferenceBudgetBytes = std::size_t{256} << 20;

/// Runs the feature extractor over horizontal strips and calls
/// sink(row0, rows, base, plane) for each; channel k of output row row0 + r
/// starts at base + k * plane + r * W. Strip rows are exact: every strip sees
/// kFeatureHalo rows of real context, or the image border.
template <typename T, typename Sink>
void for_each_feature_strip(const ModelParams<T>& p, const ad::Tensor<T>& input, Sink&& sink,
                            std::size_t budget_bytes = kInferenceBudgetBytes) {
  const NetworkConfig& cfg = p.config();
  if (input.rank() != 3 || input.dim(0) != 2) {
    throw ShapeError("feature extractor expects a (2,H,W) input, got " + ad::dims_to_string(input.dims));
  }
  const std::size_t h = input.dim(1), w = input.dim(2), c = cfg.channels;
  if (h == 0 || w == 0) return;
  const std::size_t buffers = cfg.skip_connections ? 7 : 3;
  const std::size_t row_bytes = (buffers * c + 2) * w * sizeof(T);
  const std::size_t max_rows = std::max(budget_bytes / row_bytes, 2 * kFeatureHalo + 1);
  const std::size_t step = h <= max_rows ? h : max_rows - 2 * kFeatureHalo;
  const std::size_t strip_rows = h <= max_rows ? h : max_rows;

  std::vector<ad::kernels::WinogradKernel<T>> kernels;
  for (std::size_t l = 0; l < kConvLayers; ++l) {
    kernels.push_back(ad::kernels::winograd_kernel<T>(p.conv_weight(l).data, c, conv_input_channels(cfg, l)));
  }
  const std::size_t cap = c * strip_rows * w;
  detail::Scratch<T> scratch(buffers * cap + 2 * strip_rows * w);
  T* const base = scratch.data();
  T* const in = base + buffers * cap;

  for (std::size_t r0 = 0; r0 < h; r0 += step) {
    const std::size_t r1 = std::min(h, r0 + step);
    const std::size_t i0 = r0 >= kFeatureHalo ? r0 - kFeatureHalo : 0;
    const std::size_t i1 = h == r1 ? h : std::min(h, r1 + kFeatureHalo);
    const std::size_t sh = i1 - i0, shw = sh * w, half = c * shw;
    for (std::size_t ch = 0; ch < 2; ++ch) {
      std::copy_n(input.data.data() + ch * h * w + i0 * w, shw, in + ch * shw);
    }
    auto conv = [&](std::size_t layer, const T* src, T* dst) {
      const std::size_t in_c = conv_input_channels(cfg, layer);
      ad::kernels::conv2d_winograd<T>(std::span<const T>(src, in_c * shw), sh, w, kernels[layer],
                                      p.conv_bias(layer).data, std::span<T>(dst, half), true);
    };
    T* out = nullptr;
    if (cfg.skip_connections) {
      // Each 2C region holds a concatenation; layers write straight into halves.
      T* s16 = base;
      T* s25 = base + 2 * half;
      T* s34 = base + 4 * half;
      out = base + 6 * half;
      conv(0, in, s16);          // c1
      conv(1, s16, s25);         // c2
      conv(2, s25, s34);         // c3
      conv(3, s34, s34 + half);  // c4
      conv(4, s34, s25 + half);  // c5 <- [c3, c4]
      conv(5, s25, s16 + half);  // c6 <- [c2, c5]
      conv(6, s16, out);         // c7 <- [c1, c6]
    } else {
      T* a = base;
      T* b = base + half;
      out = base + 2 * half;
      conv(0, in, a);
      for (std::size_t l = 1; l + 1 < kConvLayers; ++l) {
        conv(l, a, b);
        std::swap(a, b);
      }
      conv(kConvLayers - 1, a, out);
    }
    sink(r0, r1 - r0, static_cast<const T*>(out + (r0 - i0) * w), shw);
  }
}

/// Feature map F (C, H, W) for a network input from make_network_input().
template <typename T>
ad::Tensor<T> extract_features(const ModelParams<T>& p, const ad::Tensor<T>& input,
                               std::size_t budget_bytes = kInferenceBudgetBytes) {
  if (input.rank() != 3) {
    throw ShapeError("feature extractor expects a (2,H,W) input, got " + ad::dims_to_string(input.dims));
  }
  const std::size_t c = p.config().channels, h = input.dim(1), w = input.dim(2), hw = h * w;
  ad::Tensor<T> features(ad::Dims{c, h, w});
  for_each_feature_strip(
      p, input,
      [&](std::size_t row0, std::size_t rows, const T* f, std::size_t plane) {
        for (std::size_t k = 0; k < c; ++k) std::copy_n(f + k * plane, rows * w, features.data.data() + k * hw + row0 * w);
      },
      budget_bytes);
  return features;
}

/// w = FC2(ReLU(FC1(eta))).
template <typename T>
std::vector<T> driving_vector(const ModelParams<T>& p, double eta) {
  require_exposure(eta);
  const std::size_t c = p.config().channels;
  const std::vector<T> x{static_cast<T>(eta)};
  std::vector<T> hidden(c), w(c);
  ad::kernels::linear_forward<T>(x, p.fc1_weight().data, p.fc1_bias().data, hidden);
  ad::kernels::relu_inplace<T>(hidden);
  ad::kernels::linear_forward<T>(hidden, p.fc2_weight().data, p.fc2_bias().data, w);
  return w;
}

/// Gamma(x) = 10 * sigmoid(<F(x), w>).
template <typename T>
GammaMap gamma_map(const ad::Tensor<T>& features, std::span<const T> w) {
  if (features.rank() != 3 || features.dim(0) != w.size()) {
    throw ShapeError("gamma_map: feature channels " + ad::dims_to_string(features.dims) + " vs driving vector length " +
                     std::to_string(w.size()));
  }
  const std::size_t h = features.dim(1), wd = features.dim(2);
  std::vector<T> logits(h * wd);
  ad::kernels::inner_product_forward<T>(features.data, w.size(), w, logits);
  GammaMap gamma(wd, h);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    gamma[i] = clamp_gamma(kGammaUpper * static_cast<double>(ad::sigmoid<T>(logits[i])));
  }
  return gamma;
}

/// Gamma for one image, strip by strip, without materializing F.
template <typename T>
GammaMap predict_gamma(const ModelParams<T>& p, const LuminanceImage& y, const ScribbleMap& s, double eta,
                       std::size_t budget_bytes = kInferenceBudgetBytes) {
  const auto w = driving_vector(p, eta);
  const std::size_t width = y.width();
  GammaMap gamma(width, y.height());
  std::vector<T> logits;
  for_each_feature_strip(
      p, make_network_input<T>(y, s),
      [&](std::size_t row0, std::size_t rows, const T* f, std::size_t plane) {
        // Channel-major accumulation, as in inner_product_forward.
        logits.assign(rows * width, T(0));
        for (std::size_t k = 0; k < w.size(); ++k) {
          const T* fk = f + k * plane;
          const T wk = w[k];
          for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += wk * fk[i];
        }
        for (std::size_t i = 0; i < logits.size(); ++i) {
          gamma[row0 * width + i] = clamp_gamma(kGammaUpper * static_cast<double>(ad::sigmoid<T>(logits[i])));
        }
      },
      budget_bytes);
  return gamma;
}

// ---------------------------------------------------------------------------
// Recorded forward pass (training / gradient checks)
// ---------------------------------------------------------------------------

struct ForwardVars {
  ad::Var features;
  ad::Var driving;
  ad::Var gamma;  // (1, H, W)
};

/// One leaf per parameter tensor, in layout order.
template <typename T>
std::vector<ad::Var> bind_parameters(ad::Tape<T>& tape, const ModelParams<T>& p) {
  std::vector<ad::Var> vars;
  vars.reserve(p.tensor_count());
  for (const auto& t : p.tensors()) vars.push_back(tape.leaf(t.tensor));
  return vars;
}

template <typename T>
ad::Var record_gamma_head(ad::Tape<T>& tape, ad::Var logits) {
  ad::Tensor<T> out = tape.value(logits);
  std::vector<T> slope(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T s = ad::sigmoid(out.data[i]);
    slope[i] = static_cast<T>(kGammaUpper) * s * (T(1) - s);
    out.data[i] = static_cast<T>(clamp_gamma(kGammaUpper * static_cast<double>(s)));
  }
  return tape.record(std::move(out), {logits}, [logits, slope = std::move(slope)](ad::Tape<T>& t, ad::Var self) {
    const auto g = t.grad(self);
    auto gl = t.grad_mut(logits);
    for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i] * slope[i];
  });
}

template <typename T>
ForwardVars record_forward(ad::Tape<T>& tape, std::span<const ad::Var> params, const NetworkConfig& cfg,
                           const ad::Tensor<T>& input, double eta) {
  require_exposure(eta);
  if (params.size() != parameter_layout(cfg).size()) throw ShapeError("record_forward: wrong parameter count");
  auto layer = [&](std::size_t l, ad::Var x) { return tape.relu(tape.conv2d(x, params[2 * l], params[2 * l + 1])); };

  const ad::Var x = tape.constant(input);
  ad::Var f;
  if (cfg.skip_connections) {
    const ad::Var c1 = layer(0, x);
    const ad::Var c2 = layer(1, c1);
    const ad::Var c3 = layer(2, c2);
    const ad::Var c4 = layer(3, c3);
    const ad::Var c5 = layer(4, tape.concat(c3, c4));
    const ad::Var c6 = layer(5, tape.concat(c2, c5));
    f = layer(6, tape.concat(c1, c6));
  } else {
    f = layer(0, x);
    for (std::size_t l = 1; l < kConvLayers; ++l) f = layer(l, f);
  }

  const ad::Var e = tape.constant(ad::Tensor<T>(ad::Dims{1}, std::vector<T>{static_cast<T>(eta)}));
  const std::size_t fc1 = ModelParams<T>::kFc1, fc2 = ModelParams<T>::kFc2;
  const ad::Var hidden = tape.relu(tape.fully_connected(e, params[fc1], params[fc1 + 1]));
  const ad::Var w = tape.fully_connected(hidden, params[fc2], params[fc2 + 1]);

  const ad::Var gamma = record_gamma_head(tape, tape.inner_product(f, w));
  return {f, w, gamma};
}

template <typename T>
GammaMap to_gamma_map(const ad::Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 1) throw ShapeError("gamma tensor must be (1,H,W)");
  GammaMap g(t.dim(2), t.dim(1));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(t.data[i]);
  return g;
}

}  // namespace icenet
