// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "icenet/service.hpp"

namespace icenet {
namespace {

namespace fs = std::filesystem;

Image8 scene(std::size_t w, std::size_t h, int seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(10, 140);
  Image8 img{w, h, {}};
  for (std::size_t i = 0; i < w * h * 3; ++i) img.rgb.push_back(static_cast<std::uint8_t>(u(rng)));
  return img;
}

std::string as_string(const std::vector<std::uint8_t>& b) { return {b.begin(), b.end()}; }

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("icenet_service_" + std::to_string(std::random_device{}()));
    fs::create_directories(root_);
    save_checkpoint(init_params<double>(5), root_ / "model.ckpt");
  }
  void TearDown() override {
    if (server_) {
      server_->stop();
      thread_.join();
    }
    fs::remove_all(root_);
  }

  ServiceConfig config(bool with_model = true) const {
    ServiceConfig cfg;
    if (with_model) cfg.checkpoint = root_ / "model.ckpt";
    cfg.profile_dir = root_ / "profiles";
    return cfg;
  }

  httplib::Client start(ServiceConfig cfg) {
    service_ = std::make_unique<Service>(std::move(cfg));
    server_ = std::make_unique<httplib::Server>();
    service_->mount(*server_);
    const int port = server_->bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(30, 0);
    return cli;
  }

  std::string create(httplib::Client& cli, const Image8& img) {
    const auto res = cli.Post("/sessions", as_string(encode_png(img)), "image/png");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    return Json::parse(res->body).at("id").get<std::string>();
  }

  fs::path root_;
  std::unique_ptr<Service> service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

TEST_F(ServiceTest, HealthReportsCheckpoint) {
  auto cli = start(config());
  auto res = cli.Get("/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const Json j = Json::parse(res->body);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["checkpoint"], (root_ / "model.ckpt").string());
}

TEST_F(ServiceTest, UploadEnhanceRoundTrip) {
  auto cli = start(config());
  const Image8 img = scene(40, 30, 1);
  auto res = cli.Post("/sessions", as_string(encode_png(img)), "image/png");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const Json created = Json::parse(res->body);
  EXPECT_EQ(created["width"], 40);
  EXPECT_EQ(created["height"], 30);
  EXPECT_EQ(created["eta_init"], 0.5);
  EXPECT_EQ(created["personalized"], false);
  const std::string id = created["id"];
  EXPECT_EQ(id.size(), 32u);

  const std::string body = R"({"eta": 0.6, "strokes": [{"polarity": "brighten", "points": [[5, 5], [20, 8]], "radius": 4}]})";
  res = cli.Post("/sessions/" + id + "/enhance", body, "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const Json out = Json::parse(res->body);
  const Image8 png = decode_image(base64_decode(out["image_png_base64"].get<std::string>()));
  EXPECT_EQ(png.width, 40u);
  EXPECT_EQ(png.height, 30u);
  const double gmin = out["gamma"]["min"], gmean = out["gamma"]["mean"], gmax = out["gamma"]["max"];
  EXPECT_GT(gmin, 0.0);
  EXPECT_LE(gmin, gmean);
  EXPECT_LE(gmean, gmax);
  EXPECT_LT(gmax, 10.0);
  EXPECT_NEAR(out["mean_luma"].get<double>(), mean_value(rgb_to_luminance(to_rgb(png))), 0.5);

  // Same inputs, same bytes.
  const auto again = cli.Post("/sessions/" + id + "/enhance", body, "application/json");
  ASSERT_TRUE(again);
  EXPECT_EQ(Json::parse(again->body)["image_png_base64"], out["image_png_base64"]);

  // And the library gives the same picture as the wire.
  const auto model = load_checkpoint(root_ / "model.ckpt");
  const auto local = enhance(model, to_rgb(img), parse_strokes(Json::parse(body)["strokes"].dump()), 0.6);
  EXPECT_EQ(to_image8(local.output).rgb, png.rgb);

  res = cli.Get("/sessions/" + id);
  ASSERT_TRUE(res);
  const Json state = Json::parse(res->body);
  EXPECT_EQ(state["last_eta"], 0.6);
  EXPECT_EQ(state["strokes"].size(), 1u);
}

TEST_F(ServiceTest, AlternativeUploadEncodings) {
  auto cli = start(config());
  const auto png = encode_png(scene(16, 12, 2));
  httplib::MultipartFormDataItems items = {{"image", as_string(png), "a.png", "image/png"},
                                           {"profile", "alice", "", ""}};
  auto res = cli.Post("/sessions", items);
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const std::string id = Json::parse(res->body)["id"];
  EXPECT_EQ(Json::parse(cli.Get("/sessions/" + id)->body)["profile"], "alice");

  res = cli.Post("/sessions", Json{{"image_base64", base64_encode(png)}}.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(Json::parse(res->body)["width"], 16);
}

TEST_F(ServiceTest, ErrorStatuses) {
  auto cli = start(config());
  auto res = cli.Post("/sessions", "definitely not an image", "application/octet-stream");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 415);
  EXPECT_TRUE(Json::parse(res->body).contains("error"));

  res = cli.Post("/sessions", R"({"image_base64": "@@@@"})", "application/json");
  EXPECT_EQ(res->status, 415);
  res = cli.Post("/sessions", R"({"profile": "x"})", "application/json");
  EXPECT_EQ(res->status, 422);

  Image8 huge{4097, 1, std::vector<std::uint8_t>(4097 * 3, 7)};
  res = cli.Post("/sessions", as_string(encode_png(huge)), "image/png");
  EXPECT_EQ(res->status, 413);

  const std::string id = create(cli, scene(12, 12, 3));
  EXPECT_EQ(cli.Post("/sessions/nope/enhance", R"({"eta": 0.5})", "application/json")->status, 404);
  EXPECT_EQ(cli.Get("/sessions/nope")->status, 404);
  EXPECT_EQ(cli.Post("/sessions/" + id + "/enhance", R"({"eta": 1.5})", "application/json")->status, 422);
  EXPECT_EQ(cli.Post("/sessions/" + id + "/enhance", R"({"eta": "0.5"})", "application/json")->status, 422);
  EXPECT_EQ(cli.Post("/sessions/" + id + "/enhance", R"({"eta": 0.5, "strokes": [{}]})", "application/json")->status,
            422);
  EXPECT_EQ(cli.Post("/sessions/" + id + "/enhance", "{", "application/json")->status, 422);
  EXPECT_EQ(cli.Post("/sessions/" + id + "/commit", R"({"eta": -0.1})", "application/json")->status, 422);

  EXPECT_EQ(cli.Delete("/sessions/" + id)->status, 200);
  EXPECT_EQ(cli.Delete("/sessions/" + id)->status, 404);
  EXPECT_EQ(cli.Post("/sessions/" + id + "/enhance", R"({"eta": 0.5})", "application/json")->status, 404);
}

TEST_F(ServiceTest, NoCheckpointMeans503) {
  auto cli = start(config(false));
  EXPECT_EQ(Json::parse(cli.Get("/healthz")->body)["checkpoint"], "");
  const std::string id = create(cli, scene(12, 12, 4));
  const auto res = cli.Post("/sessions/" + id + "/enhance", R"({"eta": 0.5})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 503);
}

TEST_F(ServiceTest, CommitsActivatePersonalization) {
  auto cli = start(config());
  const Json expected_active[] = {false, false, false, true};
  for (int k = 0; k < 4; ++k) {
    const std::string id = create(cli, scene(12, 12, 10 + k));
    const auto res = cli.Post("/sessions/" + id + "/commit", Json{{"eta", 0.2 + 0.1 * k}}.dump(), "application/json");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    const Json j = Json::parse(res->body);
    EXPECT_EQ(j["m"], k + 1);
    EXPECT_EQ(j["active"], expected_active[k]);
  }
  const auto res = cli.Post("/sessions", as_string(encode_png(scene(12, 12, 20))), "image/png");
  const Json created = Json::parse(res->body);
  EXPECT_EQ(created["personalized"], true);
  const double eta = created["eta_init"];
  EXPECT_GE(eta, 0.0);
  EXPECT_LE(eta, 1.0);
  // Observations persist in the profile directory.
  EXPECT_EQ(ObservationStore::open(root_ / "profiles" / "default.tsv").size(), 4u);
}

TEST_F(ServiceTest, ProfileNamesAreValidated) {
  EXPECT_TRUE(valid_profile_name("user_01-b"));
  EXPECT_FALSE(valid_profile_name("../etc"));
  EXPECT_FALSE(valid_profile_name(""));
  Service svc(config());
  EXPECT_EQ(svc.create_session(encode_png(scene(8, 8, 1)), "a/b").status, 422);
}

TEST_F(ServiceTest, SessionsAreIsolated) {
  Service svc(config());
  const std::string a = svc.create_session(encode_png(scene(16, 16, 1))).body["id"];
  const std::string b = svc.create_session(encode_png(scene(16, 16, 1))).body["id"];
  EXPECT_NE(a, b);
  const auto plain = svc.enhance(b, R"({"eta": 0.5})");
  ASSERT_EQ(svc.enhance(a, R"({"eta": 0.5, "strokes": [{"polarity": "darken", "points": [[8, 8]], "radius": 6}]})").status,
            200);
  EXPECT_EQ(svc.enhance(b, R"({"eta": 0.5})").body["image_png_base64"], plain.body["image_png_base64"]);
  EXPECT_TRUE(svc.get_session(b).body["strokes"].empty());
  EXPECT_EQ(svc.session_count(), 2u);
}

TEST(ServiceConfigTest, ReadsEnvironment) {
  ::setenv(kCheckpointEnv, "/tmp/x.ckpt", 1);
  ::setenv(kProfileDirEnv, "/tmp/profiles", 1);
  const auto cfg = config_from_env();
  ::unsetenv(kCheckpointEnv);
  ::unsetenv(kProfileDirEnv);
  EXPECT_EQ(cfg.checkpoint, "/tmp/x.ckpt");
  EXPECT_EQ(cfg.profile_dir, "/tmp/profiles");
  EXPECT_TRUE(config_from_env().checkpoint.empty());
}

}  // namespace
}  // namespace icenet
