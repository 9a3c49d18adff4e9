// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "icenet/personalize.hpp"

namespace icenet {
namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("icenet_pers_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<Observation> on_parabola(double a, double b, double c, std::initializer_list<double> ys) {
  std::vector<Observation> obs;
  for (double y : ys) obs.push_back({y, (a * y + b) * y + c});
  return obs;
}

TEST(MeanLuminance, Basics) {
  EXPECT_EQ(mean_luminance(LuminanceImage(5, 4, 42.0)), 42.0);
  LuminanceImage two(2, 1);
  two[0] = 0.0;
  two[1] = 255.0;
  EXPECT_EQ(mean_luminance(two), 127.5);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 255.0);
  LuminanceImage y(17, 9);
  long double sum = 0;
  for (auto& v : y.values()) {
    v = u(rng);
    sum += v;
  }
  EXPECT_NEAR(mean_luminance(y), static_cast<double>(sum / y.size()), 1e-9);
}

TEST(Fit, ExactParabolaRecovered) {
  const auto obs = on_parabola(0.001, 0.0, 0.3, {3.0, 8.0, 17.0, 24.0});
  const auto f = fit_quadratic(obs);
  EXPECT_FALSE(f.degenerate);
  EXPECT_NEAR(f.a, 0.001, 1e-9);
  EXPECT_NEAR(f.b, 0.0, 1e-9);
  EXPECT_NEAR(f.c, 0.3, 1e-9);
}

TEST(Fit, ConstantExposure) {
  std::vector<Observation> obs{{10, 0.5}, {60, 0.5}, {120, 0.5}, {200, 0.5}, {250, 0.5}};
  const auto f = fit_quadratic(obs);
  EXPECT_NEAR(f.a, 0.0, 1e-12);
  EXPECT_NEAR(f.b, 0.0, 1e-12);
  EXPECT_NEAR(f.c, 0.5, 1e-12);
}

TEST(Fit, MatchesQrOracleAndIsGridOptimal) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uy(0.0, 255.0);
  std::normal_distribution<double> noise(0.0, 0.03);
  std::vector<Observation> obs;
  for (int i = 0; i < 100; ++i) {
    const double y = uy(rng);
    const double eta = -8e-6 * y * y + 0.004 * y + 0.2 + noise(rng);
    obs.push_back({y, std::clamp(eta, 0.0, 1.0)});
  }
  const auto f = fit_quadratic(obs);

  Eigen::MatrixXd a(obs.size(), 3);
  Eigen::VectorXd rhs(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    a(i, 0) = obs[i].y * obs[i].y;
    a(i, 1) = obs[i].y;
    a(i, 2) = 1.0;
    rhs(i) = obs[i].eta;
  }
  const Eigen::Vector3d ref = a.colPivHouseholderQr().solve(rhs);
  EXPECT_NEAR(f.a, ref(0), 1e-12);
  EXPECT_NEAR(f.b, ref(1), 1e-10);
  EXPECT_NEAR(f.c, ref(2), 1e-9);

  const double best = fit_residual(f, obs);
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j)
      for (int k = -3; k <= 3; ++k) {
        const QuadraticFit cand{f.a + i * 1e-7, f.b + j * 1e-5, f.c + k * 1e-3};
        EXPECT_LE(best, fit_residual(cand, obs) + 1e-15);
      }
}

TEST(Fit, GateAndDegenerateCases) {
  const auto three = on_parabola(0.0, 0.001, 0.2, {10, 20, 30});
  EXPECT_THROW(fit_quadratic(three), PersonalizationUnavailable);

  std::vector<Observation> same_y{{80, 0.2}, {80, 0.4}, {80, 0.6}, {80, 0.9}};
  const auto f = fit_quadratic(same_y);
  EXPECT_TRUE(f.degenerate);
  EXPECT_EQ(f.a, 0.0);
  EXPECT_EQ(f.b, 0.0);
  EXPECT_NEAR(f.c, 0.525, 1e-15);

  // Two distinct luminances determine a line, not a parabola.
  std::vector<Observation> two_y{{50, 0.2}, {50, 0.4}, {150, 0.6}, {150, 0.8}};
  const auto g = fit_quadratic(two_y);
  EXPECT_TRUE(g.degenerate);
  EXPECT_EQ(g.a, 0.0);
  EXPECT_NEAR(g(50), 0.3, 1e-12);
  EXPECT_NEAR(g(150), 0.7, 1e-12);
}

TEST(InitialEta, FallbackFitAndClamp) {
  ObservationStore store;
  auto r = initial_eta(100.0, store);
  EXPECT_EQ(r.eta, 0.5);
  EXPECT_FALSE(r.personalized);
  for (double y : {10.0, 50.0, 90.0}) store.append({y, 0.42});
  EXPECT_FALSE(initial_eta(100.0, store).personalized);
  store.append({200.0, 0.42});
  r = initial_eta(LuminanceImage(4, 4, 33.0), store);
  EXPECT_TRUE(r.personalized);
  EXPECT_NEAR(r.eta, 0.42, 1e-12);
  EXPECT_EQ(r.mean_luma, 33.0);

  // This parabola reaches 1.3 at y = 255.
  ObservationStore steep;
  for (const auto& o : on_parabola(1.3 / (255.0 * 255.0), 0.0, 0.0, {30, 90, 150, 200})) steep.append(o);
  EXPECT_NEAR(fit_quadratic(steep)(255.0), 1.3, 1e-9);
  EXPECT_EQ(initial_eta(255.0, steep).eta, 1.0);
}

TEST(InitialEta, AlwaysInUnitInterval) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uy(0.0, 255.0), ue(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    ObservationStore store;
    const int m = 4 + trial % 5;
    for (int i = 0; i < m; ++i) store.append({uy(rng), ue(rng)});
    for (int k = 0; k < 10; ++k) {
      const double e = initial_eta(uy(rng), store).eta;
      ASSERT_GE(e, 0.0);
      ASSERT_LE(e, 1.0);
    }
  }
}

TEST(Store, FileRoundTripIsExact) {
  TempDir dir;
  const auto file = dir.path / "profiles" / "alice.tsv";
  auto store = ObservationStore::open(file);
  EXPECT_EQ(store.size(), 0u);
  const std::vector<Observation> values{{0.1 + 0.2, 1.0 / 3.0}, {std::numbers::pi, 0.0}, {255.0, 1.0}, {1e-300, 0.5}};
  for (const auto& o : values) store.append(o);
  const auto reopened = ObservationStore::open(file);
  ASSERT_EQ(reopened.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) EXPECT_EQ(reopened.items()[i], values[i]);

  const auto copy = dir.path / "copy.tsv";
  reopened.save(copy);
  const auto again = ObservationStore::open(copy);
  EXPECT_TRUE(std::equal(again.items().begin(), again.items().end(), values.begin(), values.end()));
}

TEST(Store, RejectsBadLinesAndValues) {
  TempDir dir;
  const auto file = dir.path / "bad.tsv";
  std::ofstream(file) << "10\t0.5\n12 0.4\n";
  try {
    ObservationStore::open(file);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos);
  }
  std::ofstream(file, std::ios::trunc) << "10\t1.5\n";
  EXPECT_THROW(ObservationStore::open(file), FormatError);
  std::ofstream(file, std::ios::trunc) << "10\tabc\n";
  EXPECT_THROW(ObservationStore::open(file), FormatError);

  ObservationStore mem;
  EXPECT_THROW(mem.append({300.0, 0.5}), RangeError);
  EXPECT_THROW(mem.append({10.0, -0.1}), RangeError);
  EXPECT_THROW(mem.append({10.0, std::nan("")}), RangeError);
  EXPECT_EQ(mem.size(), 0u);
}

}  // namespace
}  // namespace icenet
