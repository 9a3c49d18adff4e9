// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include "icenet/codec.hpp"

namespace icenet {
namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

TEST(Base64, Rfc4648Vectors) {
  const std::pair<const char*, const char*> cases[] = {
      {"", ""},         {"f", "Zg=="},         {"fo", "Zm8="},        {"foo", "Zm9v"},
      {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"},
  };
  for (const auto& [plain, coded] : cases) {
    EXPECT_EQ(base64_encode(bytes_of(plain)), coded);
    EXPECT_EQ(base64_decode(coded), bytes_of(plain)) << coded;
  }
}

TEST(Base64, RoundTripsBinaryAndIgnoresLineBreaks) {
  std::mt19937 rng(3);
  for (std::size_t n = 0; n < 70; ++n) {
    std::vector<std::uint8_t> data(n);
    for (auto& b : data) b = static_cast<std::uint8_t>(rng());
    const std::string text = base64_encode(data);
    EXPECT_EQ(base64_decode(text), data);
    std::string wrapped;
    for (std::size_t i = 0; i < text.size(); ++i) {
      wrapped.push_back(text[i]);
      if (i % 16 == 15) wrapped += "\r\n";
    }
    EXPECT_EQ(base64_decode(wrapped), data);
  }
}

TEST(Base64, RejectsMalformedInput) {
  EXPECT_THROW(base64_decode("abc"), FormatError);
  EXPECT_THROW(base64_decode("ab!d"), FormatError);
  EXPECT_THROW(base64_decode("Zm9v\x80g=="), FormatError);
}

TEST(StrokeJson, RoundTrip) {
  StrokeList strokes(2);
  strokes[0].polarity = Polarity::darken;
  strokes[0].radius = 3;
  strokes[0].points = {{1.5, 2.0}, {10.0, 12.25}};
  strokes[1].points = {{0.0, 0.0}};
  const StrokeList back = parse_strokes(strokes_to_json(strokes).dump());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].polarity, Polarity::darken);
  EXPECT_EQ(back[0].radius, 3);
  ASSERT_EQ(back[0].points.size(), 2u);
  EXPECT_EQ(back[0].points[1].x, 10.0);
  EXPECT_EQ(back[0].points[1].y, 12.25);
  EXPECT_EQ(back[1].polarity, Polarity::brighten);
  EXPECT_EQ(back[1].radius, 10);
}

TEST(StrokeJson, AcceptsWrappedDocumentAndDefaultRadius) {
  const auto s = parse_strokes(R"({"strokes": [{"polarity": "brighten", "points": [[4, 5]]}]})");
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].radius, 10);
  EXPECT_EQ(s[0].points[0].x, 4.0);
  EXPECT_TRUE(parse_strokes("[]").empty());
}

TEST(StrokeJson, RejectsMalformedDocuments) {
  const char* bad[] = {
      "{",
      "{}",
      "42",
      R"([1])",
      R"([{"points": [[1, 2]]}])",
      R"([{"polarity": "up", "points": [[1, 2]]}])",
      R"([{"polarity": "darken"}])",
      R"([{"polarity": "darken", "points": [[1]]}])",
      R"([{"polarity": "darken", "points": [["a", 2]]}])",
      R"([{"polarity": "darken", "points": [[1, 2]], "radius": 0}])",
      R"([{"polarity": "darken", "points": [[1, 2]], "radius": 2.5}])",
  };
  for (const char* doc : bad) EXPECT_THROW(parse_strokes(doc), FormatError) << doc;
}

}  // namespace
}  // namespace icenet
