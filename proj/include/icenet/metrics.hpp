// SPDX-License-Identifier: Apache-2.0
//
// PSNR and SSIM, plus the paired-dataset evaluation driver.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "icenet/error.hpp"
#include "icenet/image.hpp"
#include "icenet/image_io.hpp"
#include "icenet/personalize.hpp"
#include "icenet/pipeline.hpp"

namespace icenet {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(255^2 / MSE) over all three channels; identical images give the cap.
inline double psnr(const RgbImage& a, const RgbImage& b) {
  require_same_dims("psnr", a, b);
  if (a.size() == 0) throw ShapeError("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Rgb& p = a[i];
    const Rgb& q = b[i];
    se += (p.r - q.r) * (p.r - q.r) + (p.g - q.g) * (p.g - q.g) + (p.b - q.b) * (p.b - q.b);
  }
  const double mse = se / (3.0 * static_cast<double>(a.size()));
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(kYMax * kYMax / mse));
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = kYMax;
};

namespace detail {

inline std::vector<double> gaussian_taps(std::size_t n, double sigma) {
  std::vector<double> taps(n);
  const double mid = static_cast<double>(n - 1) / 2.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - mid;
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

// Separable weighted mean over every fully contained window.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t w, std::size_t h,
                                        const std::vector<double>& taps) {
  const std::size_t n = taps.size(), ow = w - n + 1, oh = h - n + 1;
  std::vector<double> rows(ow * h), out(ow * oh);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += taps[k] * img[y * w + x + k];
      rows[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += taps[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean Gaussian-weighted local SSIM over the windows that fit inside the image.
inline double ssim(const LuminanceImage& a, const LuminanceImage& b, const SsimOptions& opt = {}) {
  require_same_dims("ssim", a, b);
  if (opt.window == 0 || opt.window % 2 == 0) throw RangeError("ssim window must be odd");
  if (a.width() < opt.window || a.height() < opt.window) {
    throw ShapeError("ssim: image " + std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                     " is smaller than the " + std::to_string(opt.window) + "-pixel window");
  }
  const std::size_t w = a.width(), h = a.height();
  const auto taps = detail::gaussian_taps(opt.window, opt.sigma);
  std::vector<double> x(a.values().begin(), a.values().end()), y(b.values().begin(), b.values().end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = detail::filter_valid(x, w, h, taps), my = detail::filter_valid(y, w, h, taps);
  const auto sxx = detail::filter_valid(xx, w, h, taps), syy = detail::filter_valid(yy, w, h, taps);
  const auto sxy = detail::filter_valid(xy, w, h, taps);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2), c2 = std::pow(opt.k2 * opt.data_range, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

/// SSIM of the BT.601 luminance of two colour images.
inline double ssim(const RgbImage& a, const RgbImage& b, const SsimOptions& opt = {}) {
  return ssim(rgb_to_luminance(a), rgb_to_luminance(b), opt);
}

// ---------------------------------------------------------------------------
// Paired evaluation
// ---------------------------------------------------------------------------

enum class EtaPolicy { best, init };

inline std::vector<double> default_eta_sweep() {
  std::vector<double> etas;
  for (int k = 1; k <= 19; ++k) etas.push_back(k / 20.0);
  return etas;
}

struct EvalOptions {
  EtaPolicy policy = EtaPolicy::best;
  std::vector<double> sweep = default_eta_sweep();
  const ObservationStore* store = nullptr;  // init policy; empty store -> 0.5
};

struct PairMetrics {
  std::string filename;
  double eta_used = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<PairMetrics> pairs;
  std::vector<std::string> skipped;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

/// Scores one input/reference pair on the 8-bit enhanced output.
template <typename T>
PairMetrics evaluate_pair(const ModelParams<T>& params, const RgbImage& input, const RgbImage& reference,
                          const EvalOptions& opt, const std::string& name = {}) {
  require_same_dims("evaluate_pair", input, reference);
  const LuminanceImage y = rgb_to_luminance(input);
  const ScribbleMap none(input.width(), input.height());
  const auto features = extract_features(params, make_network_input<T>(y, none));
  auto score = [&](double eta) {
    const auto w = driving_vector(params, eta);
    const auto e = apply_gamma(input, y, gamma_map<T>(features, w));
    const RgbImage out = to_rgb(to_image8(e.output));
    return PairMetrics{name, eta, psnr(out, reference), ssim(out, reference)};
  };
  if (opt.policy == EtaPolicy::init) {
    static const ObservationStore empty;
    return score(initial_eta(y, opt.store ? *opt.store : empty).eta);
  }
  if (opt.sweep.empty()) throw RangeError("eta sweep is empty");
  std::optional<PairMetrics> best;
  for (double eta : opt.sweep) {
    auto m = score(eta);
    if (!best || m.psnr_db > best->psnr_db) best = m;
  }
  return *best;
}

inline void finalize_means(MetricReport& r) {
  r.mean_psnr = r.mean_ssim = 0.0;
  if (r.pairs.empty()) return;
  for (const auto& p : r.pairs) {
    r.mean_psnr += p.psnr_db;
    r.mean_ssim += p.ssim;
  }
  r.mean_psnr /= static_cast<double>(r.pairs.size());
  r.mean_ssim /= static_cast<double>(r.pairs.size());
}

/// Pairs `<dir>/input/<name>` with the file of the same stem in
/// `<dir>/reference/`. Inputs without a reference (and references of other
/// sizes or that fail to decode) are skipped with a warning.
template <typename T>
MetricReport eval_pairs(const ModelParams<T>& params, const std::filesystem::path& dir, const EvalOptions& opt = {},
                        const std::function<void(const std::string&)>& warn = {}) {
  namespace fs = std::filesystem;
  const fs::path in_dir = dir / "input", ref_dir = dir / "reference";
  if (!fs::is_directory(in_dir) || !fs::is_directory(ref_dir)) {
    throw std::runtime_error("pairs directory " + dir.string() + " needs input/ and reference/ subdirectories");
  }
  auto note = [&](const std::string& m) {
    if (warn) warn(m);
  };
  std::map<std::string, fs::path> refs;
  for (const auto& e : fs::directory_iterator(ref_dir))
    if (e.is_regular_file()) refs.emplace(e.path().stem().string(), e.path());
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_regular_file()) inputs.push_back(e.path());
  std::sort(inputs.begin(), inputs.end());

  MetricReport report;
  for (const auto& path : inputs) {
    const std::string name = path.filename().string();
    const auto it = refs.find(path.stem().string());
    if (it == refs.end()) {
      note("skipping " + name + ": no reference image");
      report.skipped.push_back(name);
      continue;
    }
    try {
      const RgbImage input = to_rgb(read_image(path));
      const RgbImage reference = to_rgb(read_image(it->second));
      if (!input.same_dims(reference)) {
        note("skipping " + name + ": reference size differs");
        report.skipped.push_back(name);
        continue;
      }
      report.pairs.push_back(evaluate_pair(params, input, reference, opt, name));
    } catch (const DecodeError& e) {
      note("skipping " + name + ": " + e.what());
      report.skipped.push_back(name);
    } catch (const ImageTooLarge& e) {
      note("skipping " + name + ": " + e.what());
      report.skipped.push_back(name);
    }
  }
  finalize_means(report);
  return report;
}

inline void write_report_csv(std::ostream& out, const MetricReport& r) {
  out << "filename,eta_used,psnr_db,ssim\n";
  out.precision(10);
  for (const auto& p : r.pairs) out << p.filename << ',' << p.eta_used << ',' << p.psnr_db << ',' << p.ssim << '\n';
}

}  // namespace icenet
