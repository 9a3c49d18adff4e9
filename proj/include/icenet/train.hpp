// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion, annotation emulation and the training loop.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <ostream>
#include <sstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "icenet/adam.hpp"
#include "icenet/checkpoint.hpp"
#include "icenet/image.hpp"
#include "icenet/image_io.hpp"
#include "icenet/losses.hpp"
#include "icenet/network.hpp"
#include "icenet/pipeline.hpp"

namespace icenet {

struct ObjectiveOptions {
  LossWeights weights;
  TargetOptions target;
  HistogramOptions histogram;
};

struct TrainConfig {
  std::filesystem::path data_dir;
  std::filesystem::path output_dir = "checkpoints";
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::size_t image_side = 512;
  std::uint64_t seed = 0;
  ObjectiveOptions objective;
  std::size_t checkpoint_interval = 10;  // in epochs
  NetworkConfig network;
  double init_std = kDefaultInitStd;

  void validate() const {
    if (epochs == 0) throw RangeError("epochs must be >= 1");
    if (batch_size == 0) throw RangeError("batch size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw RangeError("learning rate must be >= 0");
    if (image_side < 32) throw RangeError("image side must be >= 32");
    if (checkpoint_interval == 0) throw RangeError("checkpoint interval must be >= 1");
    if (!(objective.weights.entropy > 0.0) || !(objective.weights.smoothness > 0.0)) {
      throw RangeError("loss weights must be > 0");
    }
    const auto& t = objective.target;
    if (!(t.lambda > 0.0) || !(t.gamma >= 1.0) || t.window == 0 || t.window % 2 == 0) {
      throw RangeError("target options need lambda > 0, gamma >= 1 and an odd window");
    }
    if (!(objective.histogram.sigma > 0.0) || !(objective.histogram.delta > 0.0)) {
      throw RangeError("histogram sigma and delta must be > 0");
    }
    if (!(init_std > 0.0)) throw RangeError("init std must be > 0");
  }
};

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct TrainingImage {
  std::string name;
  LuminanceImage luma;
};

/// Regular files under dir, sorted by filename.
inline std::vector<std::filesystem::path> list_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

inline RgbImage load_resized(const std::filesystem::path& path, std::size_t side) {
  return resize_bilinear(to_rgb(read_image(path)), side, side);
}

inline std::vector<TrainingImage> load_dataset(const std::filesystem::path& dir, std::size_t side,
                                               const WarningSink& warn = warn_to_stderr) {
  std::vector<TrainingImage> images;
  for (const auto& path : list_files(dir)) {
    try {
      images.push_back({path.filename().string(), rgb_to_luminance(load_resized(path, side))});
    } catch (const std::exception& e) {
      if (warn) warn("skipping " + path.filename().string() + ": " + e.what());
    }
  }
  if (images.empty()) throw std::runtime_error("no decodable images in " + dir.string());
  return images;
}

// ---------------------------------------------------------------------------
// Annotation emulation
// ---------------------------------------------------------------------------

inline constexpr double kEmulatedEtaLow = 0.2;
inline constexpr double kEmulatedEtaHigh = 0.8;
inline constexpr int kEmulatedMaxStrokes = 5;
inline constexpr int kEmulatedRadius = 10;

struct EmulatedAnnotation {
  double eta = 0.5;
  int red_count = 0;   // darken
  int blue_count = 0;  // brighten
  StrokeList strokes;

  ScribbleMap rasterize(std::size_t width, std::size_t height) const {
    return rasterize_scribbles(strokes, width, height);
  }
};

inline EmulatedAnnotation emulate_annotation(std::mt19937_64& rng, std::size_t width, std::size_t height) {
  if (width < static_cast<std::size_t>(kEmulatedRadius) || height < static_cast<std::size_t>(kEmulatedRadius)) {
    throw RangeError("image must be at least as large as the scribble radius");
  }
  std::uniform_real_distribution<double> eta(kEmulatedEtaLow, kEmulatedEtaHigh);
  std::uniform_int_distribution<int> count(0, kEmulatedMaxStrokes);
  std::uniform_real_distribution<double> cx(0.0, static_cast<double>(width - 1));
  std::uniform_real_distribution<double> cy(0.0, static_cast<double>(height - 1));
  EmulatedAnnotation a;
  a.eta = eta(rng);
  a.red_count = count(rng);
  a.blue_count = count(rng);
  auto add = [&](Polarity p, int n) {
    for (int i = 0; i < n; ++i) {
      const double x = cx(rng);
      const double y = cy(rng);
      a.strokes.push_back({p, {{x, y}}, kEmulatedRadius});
    }
  };
  add(Polarity::darken, a.red_count);
  add(Polarity::brighten, a.blue_count);
  return a;
}

inline EmulatedAnnotation emulate_annotation(std::uint64_t seed, std::size_t width, std::size_t height) {
  std::mt19937_64 rng(seed);
  return emulate_annotation(rng, width, height);
}

// ---------------------------------------------------------------------------
// One sample: forward, losses, backward
// ---------------------------------------------------------------------------

/// Gradients in parameter_layout() order.
using ParamGrads = std::vector<std::vector<double>>;

struct SampleResult {
  LossBreakdown losses;
  ParamGrads grads;
  bool degenerate_target = false;
};

inline SampleResult sample_gradients(const ModelParams<double>& params, const LuminanceImage& y,
                                     const ScribbleMap& s, double eta, const ObjectiveOptions& obj = {}) {
  const TargetResult target = build_target(y, s, eta, obj.target);
  DTape tape;
  const auto vars = bind_parameters(tape, params);
  const auto fw = record_forward<double>(tape, vars, params.config(), make_network_input<double>(y, s), eta);
  const ad::Var z = record_gamma_correction(tape, y, fw.gamma);
  const LossVars lv = record_losses(tape, z, fw.gamma, target.target, obj.weights, obj.histogram);

  SampleResult r;
  r.losses = combine_losses(tape.value(lv.ibc).data[0], tape.value(lv.entropy).data[0],
                            tape.value(lv.smoothness).data[0], obj.weights);
  r.degenerate_target = target.degenerate_normalization;
  tape.backward(lv.total);
  r.grads.reserve(vars.size());
  for (ad::Var v : vars) {
    const auto g = tape.grad(v);
    r.grads.emplace_back(g.begin(), g.end());
  }
  return r;
}

inline bool finite(const LossBreakdown& b) noexcept {
  return std::isfinite(b.ibc) && std::isfinite(b.entropy_weighted) && std::isfinite(b.smoothness_weighted) &&
         std::isfinite(b.total);
}

inline std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << std::setprecision(9) << "l_ibc=" << b.ibc << " l_ent_weighted=" << b.entropy_weighted
     << " l_smo_weighted=" << b.smoothness_weighted << " total=" << b.total;
  return os.str();
}

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::size_t step, const LossBreakdown& losses)
      : NumericError("non-finite loss at batch " + std::to_string(step) + ": " + describe(losses)),
        step_(step),
        losses_(losses) {}
  std::size_t step() const noexcept { return step_; }
  const LossBreakdown& losses() const noexcept { return losses_; }

 private:
  std::size_t step_;
  LossBreakdown losses_;
};

struct TrainingSample {
  const LuminanceImage* luma = nullptr;
  ScribbleMap scribbles;
  double eta = 0.5;
};

/// Owns the parameters and optimizer state; one step() per mini-batch.
class Trainer {
 public:
  Trainer(ModelParams<double> params, double learning_rate, ObjectiveOptions objective = {})
      : params_(std::move(params)), lr_(learning_rate), objective_(objective) {}

  /// Mean loss over the batch; gradients are averaged in batch order.
  LossBreakdown step(std::span<const TrainingSample> batch) {
    if (batch.empty()) throw ShapeError("empty training batch");
    LossBreakdown mean;
    ParamGrads sum;
    for (const TrainingSample& item : batch) {
      SampleResult r = sample_gradients(params_, *item.luma, item.scribbles, item.eta, objective_);
      if (!finite(r.losses)) throw TrainingDiverged(steps_, r.losses);
      if (r.degenerate_target) ++degenerate_targets_;
      mean.ibc += r.losses.ibc;
      mean.entropy_weighted += r.losses.entropy_weighted;
      mean.smoothness_weighted += r.losses.smoothness_weighted;
      mean.total += r.losses.total;
      if (sum.empty()) {
        sum = std::move(r.grads);
      } else {
        for (std::size_t k = 0; k < sum.size(); ++k)
          for (std::size_t i = 0; i < sum[k].size(); ++i) sum[k][i] += r.grads[k][i];
      }
    }
    const double n = static_cast<double>(batch.size());
    mean.ibc /= n;
    mean.entropy_weighted /= n;
    mean.smoothness_weighted /= n;
    mean.total /= n;
    for (auto& g : sum)
      for (double& v : g) v /= n;

    std::vector<ad::ParamRef> refs;
    refs.reserve(sum.size());
    for (std::size_t k = 0; k < sum.size(); ++k) {
      refs.push_back({params_[k].name, params_[k].tensor.data, sum[k]});
    }
    ad::adam_step(refs, adam_, lr_);
    ++steps_;
    return mean;
  }

  const ModelParams<double>& params() const noexcept { return params_; }
  std::size_t steps() const noexcept { return steps_; }
  /// Samples whose normalized luminance was constant (target fixed at 0.5).
  std::size_t degenerate_targets() const noexcept { return degenerate_targets_; }

 private:
  ModelParams<double> params_;
  double lr_;
  ObjectiveOptions objective_;
  ad::AdamState adam_;
  std::size_t steps_ = 0;
  std::size_t degenerate_targets_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TraceRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossBreakdown losses;
};

inline void write_trace_header(std::ostream& os) { os << "epoch,step,l_ibc,l_ent_weighted,l_smo_weighted,total\n"; }

inline void write_trace_row(std::ostream& os, const TraceRow& r) {
  os << r.epoch << ',' << r.step << ',' << std::setprecision(17) << r.losses.ibc << ',' << r.losses.entropy_weighted
     << ',' << r.losses.smoothness_weighted << ',' << r.losses.total << '\n';
}

struct TrainHooks {
  std::function<void(const TraceRow&)> on_step;
  std::function<void(std::size_t epoch, double mean_total)> on_epoch;
  std::function<void(const std::filesystem::path&)> on_checkpoint;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<TraceRow> trace;
  std::vector<double> epoch_mean_total;
  ModelParams<double> params;
};

inline std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "icenet_epoch_%03zu.ckpt", epoch);
  return dir / name;
}

/// Trains on an in-memory dataset. Every epoch visits the images in a
/// seeded random order and draws a fresh emulated annotation per image.
inline TrainResult train_on(const std::vector<TrainingImage>& dataset, const TrainConfig& cfg,
                            const TrainHooks& hooks = {}, const WarningSink& warn = warn_to_stderr) {
  cfg.validate();
  if (dataset.empty()) throw std::runtime_error("training dataset is empty");
  std::filesystem::create_directories(cfg.output_dir);

  Trainer trainer(init_params<double>(cfg.seed, cfg.network, cfg.init_std), cfg.learning_rate, cfg.objective);
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eed5eedull);
  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    const std::size_t degenerate_before = trainer.degenerate_targets();
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<TrainingSample> batch;
      for (std::size_t j = start; j < end; ++j) {
        const LuminanceImage& y = dataset[order[j]].luma;
        const EmulatedAnnotation a = emulate_annotation(rng, y.width(), y.height());
        batch.push_back({&y, a.rasterize(y.width(), y.height()), a.eta});
      }
      const LossBreakdown l = trainer.step(batch);
      const TraceRow row{epoch, trainer.steps(), l};
      result.trace.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
      epoch_total += l.total;
      ++epoch_steps;
    }
    if (const std::size_t n = trainer.degenerate_targets() - degenerate_before; n > 0 && warn) {
      warn("epoch " + std::to_string(epoch) + ": " + std::to_string(n) +
           " sample(s) had constant luminance; their target is flat at 0.5");
    }
    const double mean = epoch_total / static_cast<double>(epoch_steps);
    result.epoch_mean_total.push_back(mean);
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean);
    if (epoch % cfg.checkpoint_interval == 0 && epoch != cfg.epochs) {
      const auto path = epoch_checkpoint_path(cfg.output_dir, epoch);
      save_checkpoint(trainer.params(), path);
      if (hooks.on_checkpoint) hooks.on_checkpoint(path);
    }
  }
  result.checkpoint = cfg.output_dir / "icenet_final.ckpt";
  save_checkpoint(trainer.params(), result.checkpoint);
  if (hooks.on_checkpoint) hooks.on_checkpoint(result.checkpoint);
  result.params = trainer.params();
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {},
                         const WarningSink& warn = warn_to_stderr) {
  cfg.validate();
  return train_on(load_dataset(cfg.data_dir, cfg.image_side, warn), cfg, hooks, warn);
}

// ---------------------------------------------------------------------------
// Exposure monotonicity
// ---------------------------------------------------------------------------

struct MonotonicityReport {
  std::vector<double> etas;
  std::vector<std::vector<double>> mean_luma;  // [image][eta]
  std::size_t pairs = 0;
  std::size_t non_decreasing = 0;  // includes ties
  std::size_t ties = 0;

  bool empty() const noexcept { return pairs == 0; }
  double non_decreasing_fraction() const noexcept {
    return pairs == 0 ? 0.0 : static_cast<double>(non_decreasing) / static_cast<double>(pairs);
  }
};

template <typename T>
MonotonicityReport evaluate_monotonicity(const ModelParams<T>& params, std::span<const RgbImage> images,
                                         std::span<const double> etas) {
  if (!std::is_sorted(etas.begin(), etas.end())) throw RangeError("exposure list must be sorted ascending");
  for (double e : etas) require_exposure(e);
  MonotonicityReport rep;
  rep.etas.assign(etas.begin(), etas.end());
  for (const RgbImage& img : images) {
    const LuminanceImage y = rgb_to_luminance(img);
    const auto features = extract_features(params, make_network_input<T>(y, ScribbleMap(y.width(), y.height())));
    std::vector<double> curve;
    for (double e : etas) {
      const auto w = driving_vector(params, e);
      curve.push_back(apply_gamma(img, y, gamma_map<T>(features, w)).mean_luma);
    }
    for (std::size_t i = 1; i < curve.size(); ++i) {
      ++rep.pairs;
      if (curve[i] >= curve[i - 1]) ++rep.non_decreasing;
      if (curve[i] == curve[i - 1]) ++rep.ties;
    }
    rep.mean_luma.push_back(std::move(curve));
  }
  return rep;
}

}  // namespace icenet
