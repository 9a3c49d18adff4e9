// SPDX-License-Identifier: Apache-2.0
//
// Image containers and the per-pixel pipeline around the gamma map:
// luminance extraction, scribble rasterization, gamma correction and
// ratio-preserving color restoration.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "icenet/error.hpp"

namespace icenet {

inline constexpr double kYMax = 255.0;
// Luminance floor used inside pow() and as the divisor in color restoration.
inline constexpr double kLumaFloor = 1.0;
inline constexpr double kGammaUpper = 10.0;

/// Row-major W x H grid. The tag keeps luminance, gamma and target maps
/// from being passed for one another.
template <typename Value, typename Tag>
class Grid {
 public:
  using value_type = Value;

  Grid() = default;
  Grid(std::size_t width, std::size_t height, Value fill = Value{})
      : width_(width), height_(height), data_(width * height, fill) {
    if (width == 0 || height == 0) throw ShapeError("image dimensions must be >= 1");
  }
  Grid(std::size_t width, std::size_t height, std::vector<Value> data)
      : width_(width), height_(height), data_(std::move(data)) {
    if (width == 0 || height == 0) throw ShapeError("image dimensions must be >= 1");
    if (data_.size() != width * height) throw ShapeError("grid data size does not match dimensions");
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Value& at(std::size_t x, std::size_t y) { return data_[y * width_ + x]; }
  const Value& at(std::size_t x, std::size_t y) const { return data_[y * width_ + x]; }
  Value& operator[](std::size_t i) { return data_[i]; }
  const Value& operator[](std::size_t i) const { return data_[i]; }

  std::vector<Value>& values() noexcept { return data_; }
  const std::vector<Value>& values() const noexcept { return data_; }

  template <typename OtherValue, typename OtherTag>
  bool same_dims(const Grid<OtherValue, OtherTag>& other) const noexcept {
    return width_ == other.width() && height_ == other.height();
  }

  bool operator==(const Grid&) const = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<Value> data_;
};

struct Rgb {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
  bool operator==(const Rgb&) const = default;
};

struct RgbTag {};
struct LuminanceTag {};
struct ScribbleTag {};
struct GammaTag {};
struct TargetTag {};

using RgbImage = Grid<Rgb, RgbTag>;
using LuminanceImage = Grid<double, LuminanceTag>;
using ScribbleMap = Grid<std::int8_t, ScribbleTag>;
using GammaMap = Grid<double, GammaTag>;
using TargetMap = Grid<double, TargetTag>;

/// 8-bit interleaved RGB, the encode/decode representation.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // width * height * 3
  bool operator==(const Image8&) const = default;
};

enum class Polarity : std::int8_t { darken = -1, brighten = 1 };

struct StrokePoint {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const StrokePoint&) const = default;
};

struct Stroke {
  Polarity polarity = Polarity::brighten;
  std::vector<StrokePoint> points;
  int radius = 10;
  bool operator==(const Stroke&) const = default;
};

using StrokeList = std::vector<Stroke>;

template <typename Value, typename Tag>
void require_same_dims(const char* what, const auto& a, const Grid<Value, Tag>& b) {
  if (!a.same_dims(b)) {
    throw ShapeError(std::string(what) + ": dimension mismatch (" + std::to_string(a.width()) + "x" +
                     std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                     std::to_string(b.height()) + ")");
  }
}

// BT.601 full-range luma.
inline double luma(const Rgb& p) noexcept { return 0.299 * p.r + 0.587 * p.g + 0.114 * p.b; }

inline LuminanceImage rgb_to_luminance(const RgbImage& rgb) {
  LuminanceImage y(rgb.width(), rgb.height());
  for (std::size_t i = 0; i < rgb.size(); ++i) y[i] = std::clamp(luma(rgb[i]), 0.0, kYMax);
  return y;
}

/// Union of disks of `radius` around every stroke point. Later strokes win
/// where disks overlap; coordinates are clamped to the image.
inline ScribbleMap rasterize_scribbles(const StrokeList& strokes, std::size_t width, std::size_t height) {
  ScribbleMap map(width, height, std::int8_t{0});
  const double max_x = static_cast<double>(width - 1);
  const double max_y = static_cast<double>(height - 1);
  for (const Stroke& stroke : strokes) {
    if (stroke.radius < 1) throw RangeError("stroke radius must be >= 1");
    const auto value = static_cast<std::int8_t>(stroke.polarity);
    const double r = stroke.radius;
    const double r2 = r * r;
    for (const StrokePoint& p : stroke.points) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw RangeError("stroke point is not finite");
      const double cx = std::clamp(p.x, 0.0, max_x);
      const double cy = std::clamp(p.y, 0.0, max_y);
      const auto y0 = static_cast<std::size_t>(std::max(0.0, std::ceil(cy - r)));
      const auto y1 = static_cast<std::size_t>(std::min(max_y, std::floor(cy + r)));
      const auto x0 = static_cast<std::size_t>(std::max(0.0, std::ceil(cx - r)));
      const auto x1 = static_cast<std::size_t>(std::min(max_x, std::floor(cx + r)));
      for (std::size_t y = y0; y <= y1; ++y) {
        const double dy = static_cast<double>(y) - cy;
        for (std::size_t x = x0; x <= x1; ++x) {
          const double dx = static_cast<double>(x) - cx;
          if (dx * dx + dy * dy <= r2) map.at(x, y) = value;
        }
      }
    }
  }
  return map;
}

inline void validate_gamma(const GammaMap& gamma) {
  for (double g : gamma.values()) {
    if (!(g > 0.0 && g < kGammaUpper)) throw RangeError("gamma value outside (0, 10): " + std::to_string(g));
  }
}

/// Z = Y_max * (max(Y, floor) / Y_max)^Gamma, per pixel.
inline LuminanceImage gamma_correct(const LuminanceImage& y, const GammaMap& gamma) {
  require_same_dims("gamma_correct", y, gamma);
  validate_gamma(gamma);
  LuminanceImage z(y.width(), y.height());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double base = std::max(y[i], kLumaFloor) / kYMax;
    z[i] = kYMax * std::pow(base, gamma[i]);
  }
  return z;
}

/// J = (Z / max(Y, floor)) * I, clamped to [0, Y_max].
inline RgbImage restore_color(const RgbImage& input, const LuminanceImage& y, const LuminanceImage& z) {
  require_same_dims("restore_color", input, y);
  require_same_dims("restore_color", input, z);
  RgbImage out(input.width(), input.height());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double scale = z[i] / std::max(y[i], kLumaFloor);
    const Rgb& p = input[i];
    out[i] = Rgb{std::clamp(p.r * scale, 0.0, kYMax), std::clamp(p.g * scale, 0.0, kYMax),
                 std::clamp(p.b * scale, 0.0, kYMax)};
  }
  return out;
}

// Round-half-up to 8 bits.
inline std::uint8_t quantize(double v) noexcept {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, kYMax));
}

inline Image8 to_image8(const RgbImage& rgb) {
  Image8 out{rgb.width(), rgb.height(), std::vector<std::uint8_t>(rgb.size() * 3)};
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    out.rgb[3 * i + 0] = quantize(rgb[i].r);
    out.rgb[3 * i + 1] = quantize(rgb[i].g);
    out.rgb[3 * i + 2] = quantize(rgb[i].b);
  }
  return out;
}

inline RgbImage to_rgb(const Image8& img) {
  if (img.rgb.size() != img.width * img.height * 3) throw ShapeError("Image8 buffer size mismatch");
  RgbImage out(img.width, img.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = Rgb{static_cast<double>(img.rgb[3 * i]), static_cast<double>(img.rgb[3 * i + 1]),
                 static_cast<double>(img.rgb[3 * i + 2])};
  }
  return out;
}

template <typename Tag>
double mean_value(const Grid<double, Tag>& g) {
  double sum = 0.0;
  for (double v : g.values()) sum += v;
  return sum / static_cast<double>(g.size());
}

/// Bilinear resampling with half-pixel centers (edge samples clamp).
inline RgbImage resize_bilinear(const RgbImage& src, std::size_t width, std::size_t height) {
  RgbImage dst(width, height);
  const double sx = static_cast<double>(src.width()) / static_cast<double>(width);
  const double sy = static_cast<double>(src.height()) / static_cast<double>(height);
  const auto max_x = static_cast<double>(src.width() - 1);
  const auto max_y = static_cast<double>(src.height() - 1);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      auto lerp2 = [&](auto channel) {
        const double top = (1 - wx) * channel(src.at(x0, y0)) + wx * channel(src.at(x1, y0));
        const double bot = (1 - wx) * channel(src.at(x0, y1)) + wx * channel(src.at(x1, y1));
        return (1 - wy) * top + wy * bot;
      };
      dst.at(x, y) = Rgb{lerp2([](const Rgb& p) { return p.r; }), lerp2([](const Rgb& p) { return p.g; }),
                         lerp2([](const Rgb& p) { return p.b; })};
    }
  }
  return dst;
}

}  // namespace icenet
