// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "icenet/metrics.hpp"

namespace icenet {
namespace {

namespace fs = std::filesystem;

LuminanceImage pattern(std::size_t w, std::size_t h, auto f) {
  LuminanceImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.at(x, y) = f(static_cast<double>(x), static_cast<double>(y));
  return img;
}

double texture(double x, double y) {
  return std::fmod(x * 37 + y * 91 + std::fmod(x * y, 23.0), 256.0);
}
double ripple(double x, double y) { return std::clamp(std::fmod(x * 5 + y * 3, 11.0) - 5.0, -255.0, 255.0); }
double wave(double x, double y) { return 128 + 60 * std::sin(x / 4.0) * std::cos(y / 5.0); }

RgbImage gray(const LuminanceImage& y) {
  RgbImage img(y.width(), y.height());
  for (std::size_t i = 0; i < y.size(); ++i) img[i] = {y[i], y[i], y[i]};
  return img;
}

TEST(Psnr, ClosedForms) {
  RgbImage a(8, 6, Rgb{10, 20, 30}), b(8, 6, Rgb{11, 21, 31});
  EXPECT_NEAR(psnr(a, b), 48.13, 0.01);
  EXPECT_DOUBLE_EQ(psnr(a, b), 20.0 * std::log10(255.0));
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_EQ(psnr(RgbImage(4, 4, Rgb{0, 0, 0}), RgbImage(4, 4, Rgb{255, 255, 255})), 0.0);
  EXPECT_THROW(psnr(a, RgbImage(6, 8)), ShapeError);
}

TEST(Psnr, Symmetric) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 255);
  RgbImage a(13, 12), b(13, 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = {u(rng), u(rng), u(rng)};
    b[i] = {u(rng), u(rng), u(rng)};
  }
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  // Contracted multiply-adds may round the two orders differently.
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
}

TEST(Ssim, IdenticalIsExactlyOne) {
  const auto t = pattern(32, 24, texture);
  EXPECT_EQ(ssim(t, t), 1.0);
  EXPECT_EQ(ssim(gray(t), gray(t)), 1.0);
}

TEST(Ssim, MatchesReferenceImplementation) {
  // Oracle: skimage.metrics.structural_similarity with gaussian_weights,
  // sigma 1.5, use_sample_covariance=False, data_range 255.
  const auto a = pattern(32, 24, texture);
  const auto neg = pattern(32, 24, [](double x, double y) { return 255 - texture(x, y); });
  const auto noisy = pattern(32, 24, [](double x, double y) { return std::clamp(texture(x, y) + ripple(x, y), 0.0, 255.0); });
  EXPECT_NEAR(ssim(a, neg), -0.9837837893566526, 1e-12);
  EXPECT_NEAR(ssim(a, noisy), 0.9991079488711967, 1e-12);

  const auto w = pattern(32, 24, wave);
  const auto wneg = pattern(32, 24, [](double x, double y) { return 255 - wave(x, y); });
  const auto wnoisy = pattern(32, 24, [](double x, double y) { return std::clamp(wave(x, y) + ripple(x, y), 0.0, 255.0); });
  EXPECT_NEAR(ssim(w, wneg), -0.6183312289647742, 1e-12);
  EXPECT_LT(ssim(w, wneg), 0.5);
  EXPECT_NEAR(ssim(w, wnoisy), 0.9725032588399437, 1e-12);
}

TEST(Ssim, ConstantImagesReduceToLuminanceTerm) {
  const double m1 = 100.0, m2 = 140.0, c1 = std::pow(0.01 * 255, 2);
  const double expected = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
  EXPECT_NEAR(ssim(LuminanceImage(16, 16, m1), LuminanceImage(16, 16, m2)), expected, 1e-12);
}

TEST(Ssim, RejectsSmallImages) {
  EXPECT_THROW(ssim(LuminanceImage(10, 20), LuminanceImage(10, 20)), ShapeError);
  EXPECT_NO_THROW(ssim(LuminanceImage(11, 11, 3.0), LuminanceImage(11, 11, 3.0)));
}

// Zero convolutions except a unit bias on the last layer, so F = 1, and an
// fc2 bias giving <F, w> = -ln 9, i.e. Gamma = 10 * sigmoid(-ln 9) = 1.
ModelParams<float> identity_model() {
  auto p = ModelParams<float>::zeros();
  for (float& b : p[2 * kConvLayers - 1].tensor.data) b = 1.0f;
  for (float& b : p[ModelParams<float>::kFc2 + 1].tensor.data) b = static_cast<float>(-std::log(9.0) / 32.0);
  return p;
}

Image8 scene(std::size_t w, std::size_t h, int seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(5, 120);
  Image8 img{w, h, {}};
  for (std::size_t i = 0; i < w * h * 3; ++i) img.rgb.push_back(static_cast<std::uint8_t>(u(rng)));
  return img;
}

struct PairsDir {
  fs::path root;
  PairsDir() {
    root = fs::temp_directory_path() / ("icenet_pairs_" + std::to_string(std::random_device{}()));
    fs::create_directories(root / "input");
    fs::create_directories(root / "reference");
  }
  ~PairsDir() { fs::remove_all(root); }
};

TEST(Eval, IdentityModelOnSelfReferenceHitsCap) {
  const auto model = identity_model();
  const RgbImage img = to_rgb(scene(24, 20, 1));
  const auto g = predict_gamma(model, rgb_to_luminance(img), ScribbleMap(24, 20), 0.5);
  EXPECT_NEAR(summarize(g).mean, 1.0, 1e-5);
  EvalOptions opt;
  const auto m = evaluate_pair(model, img, img, opt, "x");
  EXPECT_EQ(m.psnr_db, 100.0);
  EXPECT_EQ(m.ssim, 1.0);
}

TEST(Eval, DirectoryDriverMeansSkipsAndCsv) {
  PairsDir dir;
  const auto model = params_cast<float>(init_params<double>(7));
  for (int k = 0; k < 3; ++k) {
    const std::string name = "img" + std::to_string(k);
    write_image(dir.root / "input" / (name + ".png"), scene(16, 16, k));
    write_image(dir.root / "reference" / (name + ".png"), scene(16, 16, 10 + k));
  }
  write_image(dir.root / "input" / "orphan.png", scene(16, 16, 99));
  std::vector<std::string> warnings;
  const auto r = eval_pairs(model, dir.root, EvalOptions{}, [&](const std::string& w) { warnings.push_back(w); });
  ASSERT_EQ(r.pairs.size(), 3u);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0], "orphan.png");
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_EQ(r.mean_psnr, (r.pairs[0].psnr_db + r.pairs[1].psnr_db + r.pairs[2].psnr_db) / 3.0);
  EXPECT_EQ(r.mean_ssim, (r.pairs[0].ssim + r.pairs[1].ssim + r.pairs[2].ssim) / 3.0);
  EXPECT_EQ(r.pairs[0].filename, "img0.png");

  // The best-eta search is a maximum over a set containing any fixed eta.
  EvalOptions init;
  init.policy = EtaPolicy::init;
  const auto ri = eval_pairs(model, dir.root, init);
  EXPECT_GE(r.mean_psnr, ri.mean_psnr);
  for (const auto& p : ri.pairs) EXPECT_EQ(p.eta_used, 0.5);

  EvalOptions fine;
  fine.sweep.clear();
  for (int k = 1; k <= 39; ++k) fine.sweep.push_back(k / 40.0);  // contains every k / 20
  EXPECT_GE(eval_pairs(model, dir.root, fine).mean_psnr, r.mean_psnr);

  std::ostringstream csv;
  write_report_csv(csv, r);
  std::istringstream lines(csv.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, "filename,eta_used,psnr_db,ssim");
  EXPECT_EQ(first.rfind("img0.png,", 0), 0u);
}

TEST(Eval, MissingLayoutIsAnError) {
  EXPECT_THROW(eval_pairs(identity_model(), fs::temp_directory_path() / "icenet_no_such_dir"), std::runtime_error);
}

}  // namespace
}  // namespace icenet
