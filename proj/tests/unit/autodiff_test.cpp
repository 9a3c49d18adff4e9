// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "icenet/adam.hpp"
#include "icenet/autodiff.hpp"
#include "icenet/gradcheck.hpp"
#include "icenet/winograd.hpp"

namespace icenet::ad {
namespace {

Tensor<double> random_tensor(Dims dims, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(dims));
  for (double& v : t.data) v = u(rng);
  return t;
}

// Direct six-loop convolution, zero padding 1.
std::vector<double> brute_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t ic = x.dim(0), h = x.dim(1), wd = x.dim(2), oc = w.dim(0);
  std::vector<double> out(oc * h * wd, 0.0);
  for (std::size_t o = 0; o < oc; ++o)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < wd; ++xx) {
        double acc = b.data[o];
        for (std::size_t c = 0; c < ic; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const long sy = static_cast<long>(y) + ky - 1, sx = static_cast<long>(xx) + kx - 1;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(wd)) continue;
              acc += w.data[((o * ic + c) * 3 + ky) * 3 + kx] * x.data[(c * h + sy) * wd + sx];
            }
        out[(o * h + y) * wd + xx] = acc;
      }
  return out;
}

TEST(Primitives, ReluForwardBackward) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor<double>({3}, {-2.0, 0.0, 1.5}));
  const Var y = tape.relu(x);
  EXPECT_EQ(tape.value(y).data, (std::vector<double>{0.0, 0.0, 1.5}));
  tape.backward(tape.sum(y));
  const auto g = tape.grad(x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(Primitives, SigmoidAtZero) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor<double>({1}, {0.0}));
  const Var y = tape.sigmoid(x);
  EXPECT_DOUBLE_EQ(tape.value(y).data[0], 0.5);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 0.25);
}

TEST(Primitives, ConvOnesKernelCenterAndCorner) {
  Tape<double> tape;
  const Var x = tape.constant(Tensor<double>({1, 3, 3}, 1.0));
  const Var w = tape.leaf(Tensor<double>({1, 1, 3, 3}, 1.0));
  const Var b = tape.leaf(Tensor<double>({1}, 0.0));
  const auto& out = tape.value(tape.conv2d(x, w, b)).data;
  EXPECT_DOUBLE_EQ(out[4], 9.0);
  EXPECT_DOUBLE_EQ(out[0], 4.0);
  EXPECT_DOUBLE_EQ(out[2], 4.0);
  EXPECT_DOUBLE_EQ(out[6], 4.0);
  EXPECT_DOUBLE_EQ(out[8], 4.0);
  EXPECT_DOUBLE_EQ(out[1], 6.0);
}

TEST(Primitives, ConvMatchesBruteForce) {
  std::mt19937_64 rng(11);
  // Width 70 > tile width splits rows across several im2col tiles.
  const std::vector<std::array<std::size_t, 4>> shapes{{2, 3, 5, 7}, {4, 2, 40, 70}, {1, 1, 1, 1}};
  for (auto [ic, oc, h, w] : shapes) {
    const auto x = random_tensor({ic, h, w}, rng);
    const auto wt = random_tensor({oc, ic, 3, 3}, rng);
    const auto b = random_tensor({oc}, rng);
    std::vector<double> out(oc * h * w);
    kernels::conv2d_forward<double>(x.data, ic, h, w, wt.data, b.data, oc, out);
    const auto ref = brute_conv(x, wt, b);
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(Primitives, WinogradMatchesDirectConvolution) {
  std::mt19937_64 rng(12);
  // Sizes off multiples of 4 exercise partial tiles; the tall and the wide
  // image each span several transform batches.
  const std::vector<std::array<std::size_t, 4>> shapes{
      {2, 3, 5, 7}, {3, 4, 30, 41}, {1, 2, 1, 1}, {2, 2, 2, 3}, {1, 2, 601, 6}, {2, 2, 9, 530}};
  for (auto [ic, oc, h, w] : shapes) {
    const auto x = random_tensor({ic, h, w}, rng);
    const auto wt = random_tensor({oc, ic, 3, 3}, rng);
    const auto b = random_tensor({oc}, rng);
    std::vector<double> out(oc * h * w, -7.0);
    kernels::conv2d_winograd<double>(x.data, h, w, kernels::winograd_kernel<double>(wt.data, oc, ic), b.data, out);
    const auto ref = brute_conv(x, wt, b);
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], ref[i], 1e-12) << h << "x" << w << " @" << i;
  }
}

TEST(Primitives, IdentityKernelIsIdentity) {
  std::mt19937_64 rng(5);
  const std::size_t c = 3, h = 6, w = 9;
  const auto x = random_tensor({c, h, w}, rng);
  Tensor<double> k({c, c, 3, 3}, 0.0);
  for (std::size_t i = 0; i < c; ++i) k.data[(i * c + i) * 9 + 4] = 1.0;
  std::vector<double> out(x.size());
  kernels::conv2d_forward<double>(x.data, c, h, w, k.data, {}, c, out);
  EXPECT_EQ(out, x.data);
}

TEST(Primitives, ShapeErrors) {
  Tape<double> tape;
  const Var x = tape.constant(Tensor<double>({2, 4, 4}));
  const Var w = tape.leaf(Tensor<double>({3, 1, 3, 3}));
  const Var b = tape.leaf(Tensor<double>({3}));
  EXPECT_THROW(tape.conv2d(x, w, b), ShapeError);
  const Var v = tape.leaf(Tensor<double>({3}));
  EXPECT_THROW(tape.inner_product(x, v), ShapeError);
  EXPECT_THROW(tape.concat(x, tape.constant(Tensor<double>({1, 4, 5}))), ShapeError);
  EXPECT_THROW(tape.fully_connected(v, tape.leaf(Tensor<double>({2, 2})), tape.leaf(Tensor<double>({2}))), ShapeError);
  EXPECT_THROW(tape.backward(v), ShapeError);
}

// Builds sum(a * op(inputs)) with random projection weights a so every
// output element influences the checked scalar.
struct PrimitiveCase {
  const char* name;
  std::vector<Tensor<double>> leaves;
  std::function<Var(Tape<double>&, const std::vector<Var>&)> build;
};

TEST(Primitives, EveryPrimitivePassesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::vector<PrimitiveCase> cases;
  cases.push_back({"conv2d",
                   {random_tensor({3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2]); }});
  cases.push_back({"fully_connected",
                   {random_tensor({5}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.fully_connected(v[0], v[1], v[2]); }});
  cases.push_back({"relu", {random_tensor({2, 4, 4}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.relu(v[0]); }});
  cases.push_back({"sigmoid", {random_tensor({2, 3, 3}, rng, -4, 4)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.sigmoid(v[0]); }});
  cases.push_back({"concat", {random_tensor({2, 3, 4}, rng), random_tensor({1, 3, 4}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.concat(v[0], v[1]); }});
  cases.push_back({"inner_product", {random_tensor({4, 3, 5}, rng), random_tensor({4}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.inner_product(v[0], v[1]); }});
  const auto base = random_tensor({1, 4, 4}, rng, 0.0, 255.0);
  cases.push_back({"pow_floor", {random_tensor({1, 4, 4}, rng, 0.2, 3.0)},
                   [base](Tape<double>& t, const std::vector<Var>& v) { return t.pow_floor(base, v[0], 1.0, 255.0); }});
  cases.push_back({"affine", {random_tensor({6}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.affine(v[0], -2.5, 0.75); }});
  cases.push_back({"mean", {random_tensor({7}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return t.mean(v[0]); }});

  for (auto& c : cases) {
    SCOPED_TRACE(c.name);
    std::vector<Tensor<double>> values = c.leaves;
    std::vector<double> projection;
    auto forward = [&](Tape<double>& tape) {
      std::vector<Var> vars;
      for (auto& t : values) vars.push_back(tape.leaf(t));
      const Var out = c.build(tape, vars);
      if (projection.empty()) {
        std::mt19937_64 prng(99);
        std::uniform_real_distribution<double> u(-1, 1);
        projection.resize(tape.value(out).size());
        for (double& p : projection) p = u(prng);
      }
      const Var weighted = tape.record(
          Tensor<double>({1}, std::vector<double>{[&] {
            double s = 0;
            for (std::size_t i = 0; i < projection.size(); ++i) s += projection[i] * tape.value(out).data[i];
            return s;
          }()}),
          {out}, [out, p = projection](Tape<double>& t, Var self) {
            const double g = t.grad(self)[0];
            auto go = t.grad_mut(out);
            for (std::size_t i = 0; i < p.size(); ++i) go[i] += g * p[i];
          });
      return std::make_pair(vars, weighted);
    };

    Tape<double> tape;
    auto [vars, loss] = forward(tape);
    tape.backward(loss);
    std::vector<std::vector<double>> grads;
    for (Var v : vars) grads.emplace_back(tape.grad(v).begin(), tape.grad(v).end());
    std::vector<CheckBlock> blocks;
    for (std::size_t i = 0; i < values.size(); ++i) blocks.push_back({std::to_string(i), values[i].data, grads[i]});

    GradCheckOptions opt;
    opt.coords_per_block = 1000;
    const auto report = finite_diff_check(
        [&] {
          Tape<double> t;
          auto [vs, l] = forward(t);
          return Probe{t.value(l).data[0], t.activation_signature()};
        },
        blocks, opt);
    EXPECT_LT(report.max_rel_error, 1e-4) << report.worst.block << "[" << report.worst.index << "]";
    EXPECT_GT(report.checked, 0u);
  }
}

TEST(GradCheck, SquareAtThree) {
  std::vector<double> theta{3.0};
  std::vector<double> grad{6.0};
  std::vector<CheckBlock> blocks{{"theta", theta, grad}};
  const auto r = finite_diff_check([&] { return theta[0] * theta[0]; }, blocks);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_EQ(theta[0], 3.0);
}

TEST(GradCheck, ReluKinkIsExcluded) {
  // x sits exactly on the kink; the perturbed passes change the mask.
  std::vector<double> x{0.0, 2.0};
  std::vector<double> grad{1.0, 1.0};
  std::vector<CheckBlock> blocks{{"x", x, grad}};
  GradCheckOptions opt;
  opt.coords_per_block = 2;
  const auto r = finite_diff_check(
      [&] {
        Tape<double> t;
        const Var v = t.leaf(Tensor<double>({2}, x));
        return Probe{t.value(t.sum(t.relu(v))).data[0], t.activation_signature()};
      },
      blocks, opt);
  EXPECT_EQ(r.skipped_nondifferentiable, 1u);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, DetectsNonDeterminism) {
  std::vector<double> x{1.0};
  std::vector<double> g{0.0};
  std::vector<CheckBlock> blocks{{"x", x, g}};
  int calls = 0;
  EXPECT_THROW(finite_diff_check([&] { return static_cast<double>(++calls); }, blocks), NumericError);
}

TEST(GradCheck, ReportsWrongGradient) {
  std::vector<double> theta{2.0};
  std::vector<double> grad{5.0};  // true value 4
  std::vector<CheckBlock> blocks{{"theta", theta, grad}};
  const auto r = finite_diff_check([&] { return theta[0] * theta[0]; }, blocks);
  EXPECT_NEAR(r.max_rel_error, 0.2, 1e-6);
  EXPECT_EQ(r.worst.block, "theta");
}

TEST(GradCheck, FivePointStencilIsExactOnQuartics) {
  std::vector<double> x{1.5};
  std::vector<double> grad{4.0 * 1.5 * 1.5 * 1.5};
  std::vector<CheckBlock> blocks{{"x", x, grad}};
  GradCheckOptions opt;
  opt.step = 0.1;
  auto quartic = [&] { return x[0] * x[0] * x[0] * x[0]; };
  // Central difference of x^4 is 4x^3 + 4xh^2.
  EXPECT_NEAR(finite_diff_check(quartic, blocks, opt).max_rel_error, 0.06 / 13.56, 1e-9);
  opt.order = 4;
  EXPECT_LT(finite_diff_check(quartic, blocks, opt).max_rel_error, 1e-12);
  opt.order = 3;
  EXPECT_THROW(finite_diff_check(quartic, blocks, opt), RangeError);
}

TEST(GradCheck, NoiseFloorTracksFunctionScale) {
  // The slope is far below what a difference quotient of a value near 1e4
  // can resolve.
  std::vector<double> x{0.5};
  std::vector<double> grad{1e-9};
  std::vector<CheckBlock> blocks{{"x", x, grad}};
  auto f = [&] { return 1e4 + 1e-9 * x[0]; };
  GradCheckOptions opt;
  EXPECT_GT(finite_diff_check(f, blocks, opt).max_rel_error, 1e-4);
  opt.noise_floor = 1e5;
  EXPECT_LT(finite_diff_check(f, blocks, opt).max_rel_error, 1e-4);
}

TEST(Adam, ZeroGradientKeepsParams) {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.0, 0.0};
  AdamState st;
  const std::vector<ParamRef> refs{{"p", p, g}};
  adam_step(refs, st, 1e-3);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, FirstStepIsLearningRate) {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState st;
  const std::vector<ParamRef> refs{{"p", p, g}};
  adam_step(refs, st, 1e-3);
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps).
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientSteadyState) {
  std::vector<double> p{0.0};
  std::vector<double> g{-0.37};
  AdamState st;
  const std::vector<ParamRef> refs{{"p", p, g}};
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 5000; ++i) {
    adam_step(refs, st, 1e-3);
    step = p[0] - prev;
    prev = p[0];
  }
  // m_hat -> g and v_hat -> g^2, so the step -> lr * sign(-g).
  EXPECT_NEAR(step, 1e-3, 1e-9);
}

TEST(Adam, RejectsNonFiniteGradient) {
  std::vector<double> a{1.0}, b{2.0};
  std::vector<double> ga{0.5}, gb{NAN};
  AdamState st;
  const std::vector<ParamRef> refs{{"a", a, ga}, {"b", b, gb}};
  try {
    adam_step(refs, st, 1e-3);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.param(), "b");
  }
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(st.t, 0u);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor<double>({2}, {1.0, 2.0}));
  const Var y = tape.weighted_sum({tape.sum(x), tape.sum(tape.affine(x, 3.0, 0.0))}, {1.0, 1.0});
  tape.backward(y);
  EXPECT_EQ(tape.grad(x)[0], 4.0);
  EXPECT_EQ(tape.grad(x)[1], 4.0);
}

}  // namespace
}  // namespace icenet::ad
