// SPDX-License-Identifier: Apache-2.0
//
// Session-oriented HTTP interface: upload an image, request enhancements
// with exposure and strokes, record the exposure finally chosen.
#pragma once

#include <array>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <thread>

#include "icenet/checkpoint.hpp"
#include "icenet/codec.hpp"
#include "icenet/image_io.hpp"
#include "icenet/personalize.hpp"
#include "icenet/pipeline.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include <httplib.h>

namespace icenet {

inline constexpr const char* kCheckpointEnv = "ICENET_CHECKPOINT";
inline constexpr const char* kProfileDirEnv = "ICENET_PROFILE_DIR";
inline constexpr const char* kDefaultProfile = "default";

struct ServiceConfig {
  std::filesystem::path checkpoint;  // empty: enhancement answers 503
  std::filesystem::path profile_dir = "profiles";  // empty: observations kept in memory only
  std::size_t max_side = kDefaultMaxSide;
  std::size_t max_body_bytes = std::size_t{256} << 20;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t threads = 4;
};

/// Fills checkpoint and profile directory from the environment when set.
inline ServiceConfig config_from_env(ServiceConfig cfg = {}) {
  if (const char* ck = std::getenv(kCheckpointEnv); ck && *ck) cfg.checkpoint = ck;
  if (const char* pd = std::getenv(kProfileDirEnv); pd && *pd) cfg.profile_dir = pd;
  return cfg;
}

struct ApiResponse {
  int status = 200;
  Json body = Json::object();
};

inline ApiResponse api_error(int status, const std::string& message) { return {status, Json{{"error", message}}}; }

inline bool valid_profile_name(const std::string& name) {
  static const std::regex re("[A-Za-z0-9_-]{1,64}");
  return std::regex_match(name, re);
}

struct Session {
  std::string id;
  std::string profile;
  RgbImage image;
  LuminanceImage luma;
  double mean_luma = 0.0;
  InitialEta eta_init;
  std::chrono::system_clock::time_point created;

  std::mutex mutex;  // serializes requests within the session
  std::optional<double> last_eta;
  StrokeList last_strokes;
  std::vector<std::uint8_t> last_png;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    if (!cfg_.checkpoint.empty()) model_ = load_checkpoint(cfg_.checkpoint);
  }

  const ServiceConfig& config() const noexcept { return cfg_; }
  bool has_model() const noexcept { return model_.has_value(); }

  ApiResponse health() const {
    return {200, Json{{"status", "ok"}, {"checkpoint", model_ ? cfg_.checkpoint.string() : std::string()}}};
  }

  ApiResponse create_session(std::span<const std::uint8_t> image_bytes, const std::string& profile = kDefaultProfile) {
    if (!valid_profile_name(profile)) return api_error(422, "profile name must match [A-Za-z0-9_-]{1,64}");
    Image8 img;
    try {
      img = decode_image(image_bytes, cfg_.max_side);
    } catch (const ImageTooLarge& e) {
      return api_error(413, e.what());
    } catch (const DecodeError& e) {
      return api_error(415, e.what());
    }
    auto s = std::make_shared<Session>();
    s->id = new_id();
    s->profile = profile;
    s->image = to_rgb(img);
    s->luma = rgb_to_luminance(s->image);
    s->mean_luma = mean_luminance(s->luma);
    s->created = std::chrono::system_clock::now();
    {
      std::lock_guard lock(stores_mutex_);
      s->eta_init = initial_eta(s->mean_luma, store_for(profile));
    }
    {
      std::lock_guard lock(sessions_mutex_);
      sessions_.emplace(s->id, s);
    }
    return {200, Json{{"id", s->id},
                      {"width", img.width},
                      {"height", img.height},
                      {"eta_init", s->eta_init.eta},
                      {"personalized", s->eta_init.personalized}}};
  }

  ApiResponse get_session(const std::string& id) {
    const auto s = find(id);
    if (!s) return api_error(404, "unknown session " + id);
    std::lock_guard lock(s->mutex);
    Json j{{"id", s->id},
           {"width", s->image.width()},
           {"height", s->image.height()},
           {"profile", s->profile},
           {"eta_init", s->eta_init.eta},
           {"personalized", s->eta_init.personalized},
           {"mean_luma", s->mean_luma},
           {"created_at", iso8601(s->created)},
           {"last_eta", s->last_eta ? Json(*s->last_eta) : Json(nullptr)},
           {"strokes", strokes_to_json(s->last_strokes)}};
    return {200, std::move(j)};
  }

  /// Body {"eta": number, "strokes": [...]}; strokes may be omitted.
  ApiResponse enhance(const std::string& id, std::string_view body) {
    const auto s = find(id);
    if (!s) return api_error(404, "unknown session " + id);
    double eta = 0.0;
    StrokeList strokes;
    try {
      const Json j = Json::parse(body);
      eta = parse_eta(j);
      if (j.contains("strokes")) strokes = strokes_from_json(j.at("strokes"));
    } catch (const Json::exception& e) {
      return api_error(422, std::string("malformed request: ") + e.what());
    } catch (const FormatError& e) {
      return api_error(422, e.what());
    } catch (const RangeError& e) {
      return api_error(422, e.what());
    }
    if (!model_) return api_error(503, "no checkpoint loaded (set " + std::string(kCheckpointEnv) + ")");

    std::lock_guard lock(s->mutex);
    const auto t0 = std::chrono::steady_clock::now();
    const Enhancement e = icenet::enhance(*model_, s->image, strokes, eta);
    auto png = encode_png(to_image8(e.output), kPngFastLevel);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    Json j{{"image_png_base64", base64_encode(png)},
           {"gamma", {{"min", e.gamma_stats.min}, {"mean", e.gamma_stats.mean}, {"max", e.gamma_stats.max}}},
           {"mean_luma", e.mean_luma},
           {"elapsed_ms", ms}};
    s->last_eta = eta;
    s->last_strokes = std::move(strokes);
    s->last_png = std::move(png);
    return {200, std::move(j)};
  }

  /// Body {"eta": number}; records (mean luminance, eta) for the session's profile.
  ApiResponse commit(const std::string& id, std::string_view body) {
    const auto s = find(id);
    if (!s) return api_error(404, "unknown session " + id);
    double eta = 0.0;
    try {
      eta = parse_eta(Json::parse(body));
    } catch (const Json::exception& e) {
      return api_error(422, std::string("malformed request: ") + e.what());
    } catch (const RangeError& e) {
      return api_error(422, e.what());
    }
    std::lock_guard lock(stores_mutex_);
    ObservationStore& store = store_for(s->profile);
    store.append({s->mean_luma, eta});
    return {200, Json{{"m", store.size()}, {"active", store.personalization_active()}}};
  }

  ApiResponse delete_session(const std::string& id) {
    std::lock_guard lock(sessions_mutex_);
    if (sessions_.erase(id) == 0) return api_error(404, "unknown session " + id);
    return {200, Json{{"deleted", id}}};
  }

  std::size_t session_count() const {
    std::lock_guard lock(sessions_mutex_);
    return sessions_.size();
  }

  /// Registers the HTTP routes on `server`.
  void mount(httplib::Server& server) {
    auto reply = [](httplib::Response& res, const ApiResponse& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/healthz", [=, this](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
    server.Post("/sessions", [=, this](const httplib::Request& req, httplib::Response& res) {
      reply(res, create_from_request(req));
    });
    server.Get(R"(/sessions/([^/]+))", [=, this](const httplib::Request& req, httplib::Response& res) {
      reply(res, get_session(req.matches[1]));
    });
    server.Delete(R"(/sessions/([^/]+))", [=, this](const httplib::Request& req, httplib::Response& res) {
      reply(res, delete_session(req.matches[1]));
    });
    server.Post(R"(/sessions/([^/]+)/enhance)", [=, this](const httplib::Request& req, httplib::Response& res) {
      reply(res, enhance(req.matches[1], req.body));
    });
    server.Post(R"(/sessions/([^/]+)/commit)", [=, this](const httplib::Request& req, httplib::Response& res) {
      reply(res, commit(req.matches[1], req.body));
    });
    server.set_exception_handler([=](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      reply(res, api_error(500, what));
    });
    server.set_payload_max_length(cfg_.max_body_bytes);
  }

  /// Multipart (file field "image", optional field "profile"), JSON
  /// {"image_base64", "profile"}, or a raw image body.
  ApiResponse create_from_request(const httplib::Request& req) {
    std::string profile = kDefaultProfile;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) return api_error(422, "multipart upload needs an \"image\" part");
      if (req.has_file("profile")) profile = req.get_file_value("profile").content;
      const auto& part = req.get_file_value("image").content;
      return create_session(as_bytes(part), profile);
    }
    const std::string type = req.get_header_value("Content-Type");
    if (type.rfind("application/json", 0) == 0) {
      std::vector<std::uint8_t> bytes;
      try {
        const Json j = Json::parse(req.body);
        if (!j.is_object() || !j.contains("image_base64") || !j["image_base64"].is_string()) {
          return api_error(422, "JSON upload needs a string field \"image_base64\"");
        }
        if (j.contains("profile")) profile = j.at("profile").get<std::string>();
        bytes = base64_decode(j["image_base64"].get<std::string>());
      } catch (const Json::exception& e) {
        return api_error(422, std::string("malformed request: ") + e.what());
      } catch (const FormatError& e) {
        return api_error(415, e.what());
      }
      return create_session(bytes, profile);
    }
    return create_session(as_bytes(req.body), profile);
  }

 private:
  static std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
  }

  static double parse_eta(const Json& j) {
    if (!j.is_object() || !j.contains("eta") || !j.at("eta").is_number()) {
      throw RangeError("request needs a numeric \"eta\"");
    }
    const double eta = j.at("eta").get<double>();
    if (!(eta >= 0.0 && eta <= 1.0)) throw RangeError("eta must lie in [0, 1]");
    return eta;
  }

  static std::string iso8601(std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    std::array<char, 32> buf{};
    std::strftime(buf.data(), buf.size(), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf.data();
  }

  std::string new_id() {
    std::lock_guard lock(id_mutex_);
    std::array<char, 33> buf{};
    std::snprintf(buf.data(), buf.size(), "%016llx%016llx", static_cast<unsigned long long>(id_rng_()),
                  static_cast<unsigned long long>(id_rng_()));
    return buf.data();
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  // Caller holds stores_mutex_.
  ObservationStore& store_for(const std::string& profile) {
    auto it = stores_.find(profile);
    if (it == stores_.end()) {
      ObservationStore store =
          cfg_.profile_dir.empty() ? ObservationStore{} : ObservationStore::open(cfg_.profile_dir / (profile + ".tsv"));
      it = stores_.emplace(profile, std::move(store)).first;
    }
    return it->second;
  }

  ServiceConfig cfg_;
  std::optional<ModelParams<float>> model_;

  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex stores_mutex_;
  std::map<std::string, ObservationStore> stores_;
  std::mutex id_mutex_;
  std::mt19937_64 id_rng_{std::random_device{}()};
};

/// Blocks serving `service` until the server is stopped.
inline bool run_service(Service& service, httplib::Server& server) {
  const auto& cfg = service.config();
  const std::size_t threads = std::max<std::size_t>(1, cfg.threads);
  server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  service.mount(server);
  return server.listen(cfg.host, cfg.port);
}

}  // namespace icenet
