// SPDX-License-Identifier: Apache-2.0
//
// Wire formats shared by the service and the CLI: the stroke JSON schema
// and base64.
#pragma once

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "icenet/error.hpp"
#include "icenet/image.hpp"

namespace icenet {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Strokes: [{"polarity": "darken"|"brighten", "points": [[x, y], ...], "radius": int}]
// ---------------------------------------------------------------------------

inline const char* polarity_name(Polarity p) noexcept { return p == Polarity::darken ? "darken" : "brighten"; }

inline Json strokes_to_json(const StrokeList& strokes) {
  Json arr = Json::array();
  for (const Stroke& s : strokes) {
    Json pts = Json::array();
    for (const auto& p : s.points) pts.push_back({p.x, p.y});
    arr.push_back({{"polarity", polarity_name(s.polarity)}, {"points", std::move(pts)}, {"radius", s.radius}});
  }
  return arr;
}

/// Accepts the stroke array itself or an object holding it under "strokes".
inline StrokeList strokes_from_json(const Json& j) {
  const Json* arr = &j;
  if (j.is_object()) {
    if (!j.contains("strokes")) throw FormatError("stroke document has no \"strokes\" array");
    arr = &j.at("strokes");
  }
  if (!arr->is_array()) throw FormatError("strokes must be a JSON array");
  StrokeList out;
  for (std::size_t i = 0; i < arr->size(); ++i) {
    const Json& s = (*arr)[i];
    const std::string where = "stroke " + std::to_string(i);
    if (!s.is_object()) throw FormatError(where + " is not an object");
    Stroke stroke;
    const auto pol = s.find("polarity");
    if (pol == s.end() || !pol->is_string()) throw FormatError(where + ": missing polarity");
    if (*pol == "darken") {
      stroke.polarity = Polarity::darken;
    } else if (*pol == "brighten") {
      stroke.polarity = Polarity::brighten;
    } else {
      throw FormatError(where + ": polarity must be \"darken\" or \"brighten\"");
    }
    const auto rad = s.find("radius");
    if (rad != s.end()) {
      if (!rad->is_number_integer()) throw FormatError(where + ": radius must be an integer");
      const auto r = rad->get<std::int64_t>();
      if (r < 1 || r > std::numeric_limits<int>::max()) throw FormatError(where + ": radius must be >= 1");
      stroke.radius = static_cast<int>(r);
    }
    const auto pts = s.find("points");
    if (pts == s.end() || !pts->is_array()) throw FormatError(where + ": missing points array");
    for (const Json& p : *pts) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw FormatError(where + ": points must be [x, y] number pairs");
      }
      const StrokePoint pt{p[0].get<double>(), p[1].get<double>()};
      if (!std::isfinite(pt.x) || !std::isfinite(pt.y)) throw FormatError(where + ": point is not finite");
      stroke.points.push_back(pt);
    }
    out.push_back(std::move(stroke));
  }
  return out;
}

inline StrokeList parse_strokes(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("stroke JSON: ") + e.what());
  }
  return strokes_from_json(j);
}

// ---------------------------------------------------------------------------
// Base64 (RFC 4648, padded), backed by libcrypto.
// ---------------------------------------------------------------------------

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text)
    if (c != '\n' && c != '\r' && c != ' ' && c != '\t') clean.push_back(c);
  if (clean.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  if (clean.empty()) return out;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw FormatError("invalid base64");
  // EVP_DecodeBlock keeps the zero bytes that padding stands for.
  std::size_t pad = 0;
  if (clean.back() == '=') ++pad;
  if (clean.size() >= 2 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace icenet
