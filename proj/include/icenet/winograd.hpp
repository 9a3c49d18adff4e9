// SPDX-License-Identifier: Apache-2.0
//
// Winograd F(4x4, 3x3) convolution, stride 1, zero padding 1. Same result
// as kernels::conv2d_forward up to rounding, with 36 multiplies per 4x4
// output tile instead of 144.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "icenet/autodiff.hpp"

namespace icenet::ad::kernels {

inline constexpr std::size_t kWinogradTile = 6;
inline constexpr std::size_t kWinogradPoints = kWinogradTile * kWinogradTile;
inline constexpr std::size_t kWinogradOut = 4;

/// Transformed 3x3 kernels, layout [36][out_c][in_c].
template <typename T>
struct WinogradKernel {
  std::size_t out_c = 0;
  std::size_t in_c = 0;
  std::vector<T> u;
};

/// U = G g G^T, interpolation points 0, +-1, +-2 and infinity.
template <typename T>
WinogradKernel<T> winograd_kernel(std::span<const T> weight, std::size_t out_c, std::size_t in_c) {
  static constexpr double G[6][3] = {{1.0 / 4, 0, 0},
                                     {-1.0 / 6, -1.0 / 6, -1.0 / 6},
                                     {-1.0 / 6, 1.0 / 6, -1.0 / 6},
                                     {1.0 / 24, 1.0 / 12, 1.0 / 6},
                                     {1.0 / 24, -1.0 / 12, 1.0 / 6},
                                     {0, 0, 1}};
  WinogradKernel<T> k{out_c, in_c, std::vector<T>(kWinogradPoints * out_c * in_c)};
  const std::size_t plane = out_c * in_c;
  for (std::size_t o = 0; o < out_c; ++o) {
    for (std::size_t i = 0; i < in_c; ++i) {
      const T* g = weight.data() + (o * in_c + i) * 9;
      double gg[6][3];
      for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 3; ++c)
          gg[r][c] = G[r][0] * double(g[c]) + G[r][1] * double(g[3 + c]) + G[r][2] * double(g[6 + c]);
      for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 6; ++c)
          k.u[static_cast<std::size_t>(r * 6 + c) * plane + o * in_c + i] =
              static_cast<T>(gg[r][0] * G[c][0] + gg[r][1] * G[c][1] + gg[r][2] * G[c][2]);
    }
  }
  return k;
}

namespace detail {

// One 64-byte SIMD register of T.
template <typename T>
struct Simd {
  typedef T type __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 64 / sizeof(T);
};

template <typename T>
inline typename Simd<T>::type simd_load(const T* p) noexcept {
  typename Simd<T>::type v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <typename T>
inline void simd_store(T* p, typename Simd<T>::type v) noexcept {
  std::memcpy(p, &v, sizeof v);
}

// Vertical B^T pass: six rows of length n in, six rows out.
template <typename T>
inline void winograd_input_cols(const T* __restrict d, T* __restrict out, std::size_t ld, std::size_t n) {
  const T* __restrict d0 = d;
  const T* __restrict d1 = d + ld;
  const T* __restrict d2 = d + 2 * ld;
  const T* __restrict d3 = d + 3 * ld;
  const T* __restrict d4 = d + 4 * ld;
  const T* __restrict d5 = d + 5 * ld;
  T* __restrict o0 = out;
  T* __restrict o1 = out + ld;
  T* __restrict o2 = out + 2 * ld;
  T* __restrict o3 = out + 3 * ld;
  T* __restrict o4 = out + 4 * ld;
  T* __restrict o5 = out + 5 * ld;
  for (std::size_t x = 0; x < n; ++x) {
    o0[x] = T(4) * d0[x] - T(5) * d2[x] + d4[x];
    o1[x] = d3[x] + d4[x] - T(4) * (d1[x] + d2[x]);
    o2[x] = d4[x] - d3[x] + T(4) * (d1[x] - d2[x]);
    o3[x] = d4[x] - d2[x] + T(2) * (d3[x] - d1[x]);
    o4[x] = d4[x] - d2[x] + T(2) * (d1[x] - d3[x]);
    o5[x] = T(4) * d1[x] - T(5) * d3[x] + d5[x];
  }
}

template <typename T>
struct SimdMask {
  using lane = std::conditional_t<sizeof(T) == 4, std::int32_t, std::int64_t>;
  typedef lane type __attribute__((vector_size(64)));
};

// Lanes 2i + phase of the concatenation (a, b).
template <typename T>
inline typename Simd<T>::type simd_pick(typename Simd<T>::type a, typename Simd<T>::type b, int phase) noexcept {
  typename SimdMask<T>::type mask;
  for (std::size_t i = 0; i < Simd<T>::lanes; ++i) mask[i] = static_cast<typename SimdMask<T>::lane>(2 * i + phase);
  return __builtin_shuffle(a, b, mask);
}

// Splits a source row into the four column phases of the padded row
// (padded column x = source column + 1).
template <typename T>
inline void winograd_split_row(const T* __restrict src, std::size_t width, std::size_t pw, T* __restrict p0,
                               T* __restrict p1, T* __restrict p2, T* __restrict p3) {
  constexpr std::size_t L = Simd<T>::lanes;
  // Padded columns 4t .. 4t+3 are source columns 4t-1 .. 4t+2.
  const std::size_t full = width >= 3 ? (width - 3) / 4 + 1 : 0;  // t with 4t+2 < width
  std::size_t t = 1;
  for (; t + L <= full; t += L) {
    const T* q = src + 4 * t - 1;
    const auto a = simd_load(q), b = simd_load(q + L), c = simd_load(q + 2 * L), d = simd_load(q + 3 * L);
    const auto ab0 = simd_pick<T>(a, b, 0), ab1 = simd_pick<T>(a, b, 1);
    const auto cd0 = simd_pick<T>(c, d, 0), cd1 = simd_pick<T>(c, d, 1);
    simd_store(p0 + t, simd_pick<T>(ab0, cd0, 0));
    simd_store(p2 + t, simd_pick<T>(ab0, cd0, 1));
    simd_store(p1 + t, simd_pick<T>(ab1, cd1, 0));
    simd_store(p3 + t, simd_pick<T>(ab1, cd1, 1));
  }
  for (; t < full; ++t) {
    const T* q = src + 4 * t - 1;
    p0[t] = q[0];
    p1[t] = q[1];
    p2[t] = q[2];
    p3[t] = q[3];
  }
  T* phase[4] = {p0, p1, p2, p3};
  const std::size_t tail = std::max<std::size_t>(full, 1);
  for (T* ph : phase) {
    ph[0] = T(0);
    std::fill(ph + tail, ph + pw, T(0));
  }
  for (std::size_t x = 1; x <= std::min<std::size_t>(width, 3); ++x) phase[x & 3][0] = src[x - 1];
  for (std::size_t x = std::max<std::size_t>(4 * full, 4); x <= width; ++x) phase[x & 3][x >> 2] = src[x - 1];
}

// Horizontal B^T pass over one phase-split row; e0..e5 receive the six
// transformed values of each tile.
template <typename T>
inline void winograd_input_row(const T* __restrict p0, const T* __restrict p1, const T* __restrict p2,
                               const T* __restrict p3, std::size_t n, T* __restrict e0, T* __restrict e1,
                               T* __restrict e2, T* __restrict e3, T* __restrict e4, T* __restrict e5) {
  for (std::size_t t = 0; t < n; ++t) {
    const T d0 = p0[t], d1 = p1[t], d2 = p2[t], d3 = p3[t], d4 = p0[t + 1], d5 = p1[t + 1];
    e0[t] = T(4) * d0 - T(5) * d2 + d4;
    e1[t] = d3 + d4 - T(4) * (d1 + d2);
    e2[t] = d4 - d3 + T(4) * (d1 - d2);
    e3[t] = d4 - d2 + T(2) * (d3 - d1);
    e4[t] = d4 - d2 + T(2) * (d1 - d3);
    e5[t] = T(4) * d1 - T(5) * d3 + d5;
  }
}

// Horizontal A^T pass for one output row; t holds six planes with stride ld.
template <typename T>
inline void winograd_output_row(const T* __restrict t, std::size_t ld, std::size_t width, T bias, bool relu,
                                T* __restrict row) {
  const T* a0 = t;
  const T* a1 = t + ld;
  const T* a2 = t + 2 * ld;
  const T* a3 = t + 3 * ld;
  const T* a4 = t + 4 * ld;
  const T* a5 = t + 5 * ld;
  const T lo = relu ? T(0) : -std::numeric_limits<T>::infinity();
  auto tile = [&](std::size_t j, T* out) {
    const T s12 = a1[j] + a2[j], d12 = a1[j] - a2[j], s34 = a3[j] + a4[j], d34 = a3[j] - a4[j];
    out[0] = std::max(a0[j] + s12 + s34 + bias, lo);
    out[1] = std::max(d12 + T(2) * d34 + bias, lo);
    out[2] = std::max(s12 + T(4) * s34 + bias, lo);
    out[3] = std::max(d12 + T(8) * d34 + a5[j] + bias, lo);
  };
  const std::size_t full = width / 4;
  for (std::size_t j = 0; j < full; ++j) tile(j, row + 4 * j);
  if (full * 4 < width) {
    T out[4];
    tile(full, out);
    for (std::size_t k = 0; 4 * full + k < width; ++k) row[4 * full + k] = out[k];
  }
}

// Rows [o0, o0 + Rows) of m = u v, two registers of columns at a time.
// Columns are processed up to n rounded up to 2 * lanes; the caller pads.
template <std::size_t Rows, typename T>
inline void winograd_gemm_rows(const T* __restrict u, std::size_t in_c, const T* __restrict v, T* __restrict m,
                               std::size_t ld, std::size_t n, std::size_t o0) {
  using V = typename Simd<T>::type;
  constexpr std::size_t L = Simd<T>::lanes;
  for (std::size_t j = 0; j < n; j += 2 * L) {
    V acc[Rows][2] = {};
    for (std::size_t c = 0; c < in_c; ++c) {
      const V x0 = simd_load(v + c * ld + j), x1 = simd_load(v + c * ld + j + L);
#pragma GCC unroll 8
      for (std::size_t i = 0; i < Rows; ++i) {
        const T w = u[(o0 + i) * in_c + c];
        acc[i][0] += w * x0;
        acc[i][1] += w * x1;
      }
    }
#pragma GCC unroll 8
    for (std::size_t i = 0; i < Rows; ++i) {
      simd_store(m + (o0 + i) * ld + j, acc[i][0]);
      simd_store(m + (o0 + i) * ld + j + L, acc[i][1]);
    }
  }
}

// m (out_c x n, row stride ld) = u (out_c x in_c, dense) * v (in_c x n, row stride ld).
template <typename T>
inline void winograd_gemm(const T* u, std::size_t out_c, std::size_t in_c, const T* v, T* m, std::size_t ld,
                          std::size_t n) {
  const std::size_t blocked = out_c / 8 * 8;
  for (std::size_t o = 0; o < blocked; o += 8) winograd_gemm_rows<8>(u, in_c, v, m, ld, n, o);
  for (std::size_t o = blocked; o < out_c; ++o) winograd_gemm_rows<1>(u, in_c, v, m, ld, n, o);
}

}  // namespace detail

// Tiles per GEMM batch; batches hold whole tile rows.
inline constexpr std::size_t kWinogradChunk = 128;

template <typename T>
void conv2d_winograd(std::span<const T> input, std::size_t height, std::size_t width, const WinogradKernel<T>& k,
                     std::span<const T> bias, std::span<T> output, bool relu = false) {
  constexpr std::size_t R = kWinogradTile, P = kWinogradPoints, O = kWinogradOut;
  const std::size_t in_c = k.in_c, out_c = k.out_c, hw = height * width;
  const std::size_t tiles_x = (width + O - 1) / O, tiles_y = (height + O - 1) / O;
  const std::size_t band = std::max<std::size_t>(1, kWinogradChunk / tiles_x);  // tile rows per batch
  // Row stride of the V and M buffers, padded off powers of two to avoid
  // cache set conflicts between the 36 planes.
  // The GEMM runs over whole register pairs, so round up to a multiple of 32.
  const std::size_t chunk = (std::min(band, tiles_y) * tiles_x + 31) / 32 * 32 + 16;
  // Padded rows are stored split by column phase (x mod 4) so the horizontal
  // transform reads contiguous memory.
  const std::size_t pw = tiles_x + 1, prow = O * pw;
  std::vector<T> v(P * in_c * chunk), m(P * out_c * chunk), at(4 * R * chunk);
  std::vector<T> rows(R * prow), bd(R * prow);
  const std::size_t uplane = out_c * in_c;

  for (std::size_t ty0 = 0; ty0 < tiles_y; ty0 += band) {
    const std::size_t ty1 = std::min(tiles_y, ty0 + band);
    const std::size_t n = (ty1 - ty0) * tiles_x;
    for (std::size_t c = 0; c < in_c; ++c) {
      const T* plane = input.data() + c * hw;
      for (std::size_t ty = ty0; ty < ty1; ++ty) {
        // Six zero-padded source rows starting at image row 4*ty - 1.
        for (std::size_t r = 0; r < R; ++r) {
          T* dst = rows.data() + r * prow;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(O * ty + r) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + prow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * width;
          detail::winograd_split_row(src, width, pw, dst, dst + pw, dst + 2 * pw, dst + 3 * pw);
        }
        detail::winograd_input_cols(rows.data(), bd.data(), prow, prow);
        const std::size_t j0 = (ty - ty0) * tiles_x;
        for (std::size_t i = 0; i < R; ++i) {
          const T* p0 = bd.data() + i * prow;
          T* e = v.data() + (c * P + i * R) * chunk + j0;
          const std::size_t es = chunk;
          detail::winograd_input_row(p0, p0 + pw, p0 + 2 * pw, p0 + 3 * pw, tiles_x, e, e + es, e + 2 * es, e + 3 * es,
                                     e + 4 * es, e + 5 * es);
        }
      }
    }
    for (std::size_t p = 0; p < P; ++p) {
      detail::winograd_gemm(k.u.data() + p * uplane, out_c, in_c, v.data() + p * chunk, m.data() + p * chunk, P * chunk,
                            n);
    }
    // Output transform Y = A^T M A, A^T = [[1,1,1,1,1,0],[0,1,-1,2,-2,0],[0,1,1,4,4,0],[0,1,-1,8,-8,1]].
    for (std::size_t o = 0; o < out_c; ++o) {
      const T* mo = m.data() + o * P * chunk;
      const std::size_t ps = chunk;
      for (std::size_t q = 0; q < R; ++q) {
        const T* a0 = mo + q * ps;
        const T* a1 = a0 + R * ps;
        const T* a2 = a1 + R * ps;
        const T* a3 = a2 + R * ps;
        const T* a4 = a3 + R * ps;
        const T* a5 = a4 + R * ps;
        T* t0 = at.data() + q * chunk;
        T* t1 = t0 + R * chunk;
        T* t2 = t1 + R * chunk;
        T* t3 = t2 + R * chunk;
        for (std::size_t j = 0; j < n; ++j) {
          const T s12 = a1[j] + a2[j], d12 = a1[j] - a2[j], s34 = a3[j] + a4[j], d34 = a3[j] - a4[j];
          t0[j] = a0[j] + s12 + s34;
          t1[j] = d12 + T(2) * d34;
          t2[j] = s12 + T(4) * s34;
          t3[j] = d12 + T(8) * d34 + a5[j];
        }
      }
      T* plane = output.data() + o * hw;
      const T b = bias.empty() ? T(0) : bias[o];
      for (std::size_t ty = ty0; ty < ty1; ++ty) {
        for (std::size_t r = 0; r < O && O * ty + r < height; ++r) {
          const T* t = at.data() + r * R * chunk + (ty - ty0) * tiles_x;
          detail::winograd_output_row(t, chunk, width, b, relu, plane + (O * ty + r) * width);
        }
      }
    }
  }
}

}  // namespace icenet::ad::kernels
