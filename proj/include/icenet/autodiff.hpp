// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over a small, fixed primitive set.
//
// A Tape records one forward pass. Every recorded node owns its value and a
// lazily allocated gradient buffer; backward() walks nodes in reverse
// creation order, so gradient accumulation order is fixed and a given
// input produces bit-identical gradients run to run.
//
// The raw kernels (conv2d_forward & co.) are usable without a tape, which is
// how the inference path runs in float.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "icenet/error.hpp"

namespace icenet::ad {

using Dims = std::vector<std::size_t>;

inline std::size_t element_count(const Dims& dims) noexcept {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_to_string(const Dims& dims) {
  std::string s = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + ")";
}

/// Dense row-major tensor. Feature maps are (C, H, W), vectors (N).
template <typename T>
struct Tensor {
  Dims dims;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Dims d, T fill = T{}) : dims(std::move(d)), data(element_count(dims), fill) {}
  Tensor(Dims d, std::vector<T> values) : dims(std::move(d)), data(std::move(values)) {
    if (data.size() != element_count(dims)) throw ShapeError("tensor data does not match dims " + dims_to_string(dims));
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return dims.size(); }
  std::size_t dim(std::size_t i) const { return dims.at(i); }

  bool operator==(const Tensor&) const = default;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.dims, std::vector<To>(t.data.begin(), t.data.end()));
}

template <typename T>
inline T sigmoid(T x) noexcept {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

namespace kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// Pixels per im2col tile; keeps the column buffer cache-resident.
inline constexpr std::size_t kTilePixels = 2048;

inline std::size_t tile_rows(std::size_t width) { return std::max<std::size_t>(1, kTilePixels / width); }

/// Columns for output rows [y0, y1): row index (c*9 + ky*3 + kx), column
/// index (y - y0)*W + x, zero outside the image.
template <typename T>
void im2col_rows(const T* input, std::size_t channels, std::size_t height, std::size_t width, std::size_t y0,
                 std::size_t y1, T* cols) {
  const std::size_t n = (y1 - y0) * width;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = input + c * height * width;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * n;
        for (std::size_t y = y0; y < y1; ++y) {
          T* dst = row + (y - y0) * width;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + width, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * width;
          if (kx == 0) {
            dst[0] = T(0);
            std::copy(src, src + width - 1, dst + 1);
          } else if (kx == 1) {
            std::copy(src, src + width, dst);
          } else {
            std::copy(src + 1, src + width, dst);
            dst[width - 1] = T(0);
          }
        }
      }
    }
  }
}

/// 3x3 convolution, stride 1, zero padding 1.
/// weight: (out_c, in_c, 3, 3); bias: out_c or empty; output: (out_c, H, W).
template <typename T>
void conv2d_forward(std::span<const T> input, std::size_t in_c, std::size_t height, std::size_t width,
                    std::span<const T> weight, std::span<const T> bias, std::size_t out_c, std::span<T> output) {
  const std::size_t hw = height * width;
  const std::size_t k = in_c * 9;
  const std::size_t rows = tile_rows(width);
  std::vector<T> cols(k * rows * width);
  ConstMatrixMap<T> w(weight.data(), static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(k));
  MatrixMap<T> out(output.data(), static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(hw));
  for (std::size_t y0 = 0; y0 < height; y0 += rows) {
    const std::size_t y1 = std::min(height, y0 + rows);
    const std::size_t n = (y1 - y0) * width;
    im2col_rows(input.data(), in_c, height, width, y0, y1, cols.data());
    ConstMatrixMap<T> c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    auto block = out.middleCols(static_cast<Eigen::Index>(y0 * width), static_cast<Eigen::Index>(n));
    block.noalias() = w * c;
  }
  if (!bias.empty()) {
    for (std::size_t o = 0; o < out_c; ++o) {
      T* plane = output.data() + o * hw;
      const T b = bias[o];
      for (std::size_t i = 0; i < hw; ++i) plane[i] += b;
    }
  }
}

/// Kernel for the input gradient: swap in/out channels and rotate 180 degrees.
template <typename T>
std::vector<T> transpose_flip_kernel(std::span<const T> weight, std::size_t out_c, std::size_t in_c) {
  std::vector<T> flipped(weight.size());
  for (std::size_t o = 0; o < out_c; ++o)
    for (std::size_t i = 0; i < in_c; ++i)
      for (std::size_t t = 0; t < 9; ++t) flipped[(i * out_c + o) * 9 + (8 - t)] = weight[(o * in_c + i) * 9 + t];
  return flipped;
}

/// Accumulates dL/dinput, dL/dweight, dL/dbias given dL/doutput.
/// Any of the gradient spans may be empty to skip that term.
template <typename T>
void conv2d_backward(std::span<const T> input, std::size_t in_c, std::size_t height, std::size_t width,
                     std::span<const T> weight, std::size_t out_c, std::span<const T> grad_output,
                     std::span<T> grad_input, std::span<T> grad_weight, std::span<T> grad_bias) {
  const std::size_t hw = height * width;
  if (!grad_bias.empty()) {
    for (std::size_t o = 0; o < out_c; ++o) {
      const T* g = grad_output.data() + o * hw;
      T acc = T(0);
      for (std::size_t i = 0; i < hw; ++i) acc += g[i];
      grad_bias[o] += acc;
    }
  }
  if (!grad_weight.empty()) {
    const std::size_t k = in_c * 9;
    const std::size_t rows = tile_rows(width);
    std::vector<T> cols(k * rows * width);
    MatrixMap<T> gw(grad_weight.data(), static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(k));
    ConstMatrixMap<T> go(grad_output.data(), static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(hw));
    for (std::size_t y0 = 0; y0 < height; y0 += rows) {
      const std::size_t y1 = std::min(height, y0 + rows);
      const std::size_t n = (y1 - y0) * width;
      im2col_rows(input.data(), in_c, height, width, y0, y1, cols.data());
      ConstMatrixMap<T> c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
      gw.noalias() += go.middleCols(static_cast<Eigen::Index>(y0 * width), static_cast<Eigen::Index>(n)) * c.transpose();
    }
  }
  if (!grad_input.empty()) {
    const std::vector<T> flipped = transpose_flip_kernel(weight, out_c, in_c);
    std::vector<T> tmp(in_c * hw);
    conv2d_forward<T>(grad_output, out_c, height, width, flipped, {}, in_c, tmp);
    for (std::size_t i = 0; i < tmp.size(); ++i) grad_input[i] += tmp[i];
  }
}

/// y = W x + b, W: (out, in).
template <typename T>
void linear_forward(std::span<const T> x, std::span<const T> weight, std::span<const T> bias, std::span<T> y) {
  const std::size_t out = y.size();
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < out; ++o) {
    T acc = bias.empty() ? T(0) : bias[o];
    for (std::size_t i = 0; i < in; ++i) acc += weight[o * in + i] * x[i];
    y[o] = acc;
  }
}

template <typename T>
void relu_inplace(std::span<T> v) noexcept {
  for (T& x : v) x = x > T(0) ? x : T(0);
}

/// Per-pixel <F(x), w>: features (C, H*W) against a length-C vector.
template <typename T>
void inner_product_forward(std::span<const T> features, std::size_t channels, std::span<const T> vec,
                           std::span<T> out) {
  const std::size_t hw = out.size();
  std::fill(out.begin(), out.end(), T(0));
  for (std::size_t c = 0; c < channels; ++c) {
    const T* f = features.data() + c * hw;
    const T w = vec[c];
    for (std::size_t i = 0; i < hw; ++i) out[i] += w * f[i];
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct Var {
  std::size_t index = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf that accumulates a gradient (network parameters, test probes).
  Var leaf(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  /// Records a node with a caller-supplied backward step. The step reads
  /// grad(result) and accumulates into its parents via grad_mut().
  Var record(Tensor<T> value, std::initializer_list<Var> parents, std::function<void(Tape&, Var)> backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).requires_grad;
    const Var out = push(std::move(value), needs, nullptr);
    if (needs) {
      node(out).backward = [out, fn = std::move(backward)](Tape& tape) { fn(tape, out); };
    }
    return out;
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const Dims& dims(Var v) const { return node(v).value.dims; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() target with respect to v (zeros if v
  /// did not influence it).
  std::span<const T> grad(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  std::span<T> grad_mut(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  void backward(Var loss) {
    if (node(loss).value.size() != 1) throw ShapeError("backward() target must be a scalar");
    for (Node& n : nodes_) n.grad.clear();
    grad_mut(loss)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  /// FNV-1a over every ReLU activity mask recorded so far. Two passes with
  /// equal signatures lie in the same linear region of all ReLUs.
  std::uint64_t activation_signature() const noexcept { return signature_; }

  std::size_t node_count() const noexcept { return nodes_.size(); }

  // --- primitives -------------------------------------------------------

  Var conv2d(Var x, Var weight, Var bias) {
    const Dims& xd = dims(x);
    const Dims& wd = dims(weight);
    if (xd.size() != 3) throw ShapeError("conv2d input must be (C,H,W), got " + dims_to_string(xd));
    if (wd.size() != 4 || wd[2] != 3 || wd[3] != 3 || wd[1] != xd[0]) {
      throw ShapeError("conv2d weight " + dims_to_string(wd) + " incompatible with input " + dims_to_string(xd));
    }
    if (dims(bias) != Dims{wd[0]}) throw ShapeError("conv2d bias must have " + std::to_string(wd[0]) + " entries");
    const std::size_t in_c = xd[0], h = xd[1], w = xd[2], out_c = wd[0];
    Tensor<T> out(Dims{out_c, h, w});
    kernels::conv2d_forward<T>(value(x).data, in_c, h, w, value(weight).data, value(bias).data, out_c, out.data);
    return record(std::move(out), {x, weight, bias}, [x, weight, bias, in_c, h, w, out_c](Tape& t, Var self) {
      std::span<T> gx = t.requires_grad(x) ? t.grad_mut(x) : std::span<T>{};
      std::span<T> gw = t.requires_grad(weight) ? t.grad_mut(weight) : std::span<T>{};
      std::span<T> gb = t.requires_grad(bias) ? t.grad_mut(bias) : std::span<T>{};
      kernels::conv2d_backward<T>(t.value(x).data, in_c, h, w, t.value(weight).data, out_c, t.grad(self), gx, gw, gb);
    });
  }

  Var fully_connected(Var x, Var weight, Var bias) {
    const Dims& xd = dims(x);
    const Dims& wd = dims(weight);
    if (xd.size() != 1 || wd.size() != 2 || wd[1] != xd[0] || dims(bias) != Dims{wd[0]}) {
      throw ShapeError("fully_connected: weight " + dims_to_string(wd) + ", input " + dims_to_string(xd) +
                       ", bias " + dims_to_string(dims(bias)));
    }
    const std::size_t in = wd[1], out_n = wd[0];
    Tensor<T> out(Dims{out_n});
    kernels::linear_forward<T>(value(x).data, value(weight).data, value(bias).data, out.data);
    return record(std::move(out), {x, weight, bias}, [x, weight, bias, in, out_n](Tape& t, Var self) {
      const auto g = t.grad(self);
      if (t.requires_grad(bias)) {
        auto gb = t.grad_mut(bias);
        for (std::size_t o = 0; o < out_n; ++o) gb[o] += g[o];
      }
      if (t.requires_grad(weight)) {
        auto gw = t.grad_mut(weight);
        const auto& xv = t.value(x).data;
        for (std::size_t o = 0; o < out_n; ++o)
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += g[o] * xv[i];
      }
      if (t.requires_grad(x)) {
        auto gx = t.grad_mut(x);
        const auto& wv = t.value(weight).data;
        for (std::size_t o = 0; o < out_n; ++o)
          for (std::size_t i = 0; i < in; ++i) gx[i] += g[o] * wv[o * in + i];
      }
    });
  }

  Var relu(Var x) {
    Tensor<T> out = value(x);
    kernels::relu_inplace<T>(out.data);
    std::uint64_t h = signature_ ^ 0x9e3779b97f4a7c15ull;
    for (T v : value(x).data) {
      h ^= v > T(0) ? 1u : 0u;
      h *= 0x100000001b3ull;
    }
    signature_ = h;
    return record(std::move(out), {x}, [x](Tape& t, Var self) {
      const auto g = t.grad(self);
      const auto& xv = t.value(x).data;
      auto gx = t.grad_mut(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T(0)) gx[i] += g[i];
    });
  }

  Var sigmoid(Var x) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v = ad::sigmoid(v);
    return record(std::move(out), {x}, [x](Tape& t, Var self) {
      const auto g = t.grad(self);
      const auto& y = t.value(self).data;
      auto gx = t.grad_mut(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }

  /// Concatenation along the channel axis of two (C,H,W) tensors.
  Var concat(Var a, Var b) {
    const Dims& ad = dims(a);
    const Dims& bd = dims(b);
    if (ad.size() != 3 || bd.size() != 3 || ad[1] != bd[1] || ad[2] != bd[2]) {
      throw ShapeError("concat: incompatible " + dims_to_string(ad) + " and " + dims_to_string(bd));
    }
    Tensor<T> out(Dims{ad[0] + bd[0], ad[1], ad[2]});
    const std::size_t na = value(a).size();
    std::copy(value(a).data.begin(), value(a).data.end(), out.data.begin());
    std::copy(value(b).data.begin(), value(b).data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(na));
    return record(std::move(out), {a, b}, [a, b, na](Tape& t, Var self) {
      const auto g = t.grad(self);
      if (t.requires_grad(a)) {
        auto ga = t.grad_mut(a);
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (t.requires_grad(b)) {
        auto gb = t.grad_mut(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
      }
    });
  }

  /// Per-pixel inner product of (C,H,W) features with a length-C vector -> (1,H,W).
  Var inner_product(Var features, Var vec) {
    const Dims& fd = dims(features);
    if (fd.size() != 3 || dims(vec) != Dims{fd[0]}) {
      throw ShapeError("inner_product: features " + dims_to_string(fd) + " vs vector " + dims_to_string(dims(vec)));
    }
    const std::size_t c = fd[0], hw = fd[1] * fd[2];
    Tensor<T> out(Dims{1, fd[1], fd[2]});
    kernels::inner_product_forward<T>(value(features).data, c, value(vec).data, out.data);
    return record(std::move(out), {features, vec}, [features, vec, c, hw](Tape& t, Var self) {
      const auto g = t.grad(self);
      const auto& f = t.value(features).data;
      const auto& w = t.value(vec).data;
      if (t.requires_grad(vec)) {
        auto gw = t.grad_mut(vec);
        for (std::size_t k = 0; k < c; ++k) {
          T acc = T(0);
          for (std::size_t i = 0; i < hw; ++i) acc += g[i] * f[k * hw + i];
          gw[k] += acc;
        }
      }
      if (t.requires_grad(features)) {
        auto gf = t.grad_mut(features);
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t i = 0; i < hw; ++i) gf[k * hw + i] += g[i] * w[k];
      }
    });
  }

  /// scale * (max(base, floor) / scale)^exponent with a constant base.
  Var pow_floor(const Tensor<T>& base, Var exponent, T floor, T scale) {
    if (base.size() != value(exponent).size()) throw ShapeError("pow_floor: base and exponent sizes differ");
    Tensor<T> out(dims(exponent));
    std::vector<T> log_base(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      const T b = std::max(base.data[i], floor) / scale;
      log_base[i] = std::log(b);
      out.data[i] = scale * std::pow(b, value(exponent).data[i]);
    }
    return record(std::move(out), {exponent}, [exponent, lb = std::move(log_base)](Tape& t, Var self) {
      const auto g = t.grad(self);
      const auto& z = t.value(self).data;
      auto ge = t.grad_mut(exponent);
      for (std::size_t i = 0; i < g.size(); ++i) ge[i] += g[i] * z[i] * lb[i];
    });
  }

  Var affine(Var x, T scale, T shift) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v = scale * v + shift;
    return record(std::move(out), {x}, [x, scale](Tape& t, Var self) {
      const auto g = t.grad(self);
      auto gx = t.grad_mut(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
    });
  }

  Var sum(Var x) {
    T acc = T(0);
    for (T v : value(x).data) acc += v;
    return record(Tensor<T>(Dims{1}, std::vector<T>{acc}), {x}, [x](Tape& t, Var self) {
      const T g = t.grad(self)[0];
      for (T& gx : t.grad_mut(x)) gx += g;
    });
  }

  Var mean(Var x) {
    const T n = static_cast<T>(value(x).size());
    T acc = T(0);
    for (T v : value(x).data) acc += v;
    return record(Tensor<T>(Dims{1}, std::vector<T>{acc / n}), {x}, [x, n](Tape& t, Var self) {
      const T g = t.grad(self)[0] / n;
      for (T& gx : t.grad_mut(x)) gx += g;
    });
  }

  /// Weighted sum of scalars: sum_i weights[i] * terms[i].
  Var weighted_sum(std::vector<Var> terms, std::vector<T> weights) {
    if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
    T acc = T(0);
    bool needs = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (value(terms[i]).size() != 1) throw ShapeError("weighted_sum terms must be scalars");
      acc += weights[i] * value(terms[i]).data[0];
      needs = needs || requires_grad(terms[i]);
    }
    const Var out = push(Tensor<T>(Dims{1}, std::vector<T>{acc}), needs, nullptr);
    if (needs) {
      node(out).backward = [out, terms = std::move(terms), weights = std::move(weights)](Tape& t) {
        const T g = t.grad(out)[0];
        for (std::size_t i = 0; i < terms.size(); ++i)
          if (t.requires_grad(terms[i])) t.grad_mut(terms[i])[0] += weights[i] * g;
      };
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.index >= nodes_.size()) throw std::out_of_range("tape variable out of range");
    return nodes_[v.index];
  }
  const Node& node(Var v) const {
    if (v.index >= nodes_.size()) throw std::out_of_range("tape variable out of range");
    return nodes_[v.index];
  }

  std::vector<Node> nodes_;
  std::uint64_t signature_ = 0xcbf29ce484222325ull;
};

}  // namespace icenet::ad
