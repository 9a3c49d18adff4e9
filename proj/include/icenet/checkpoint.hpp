// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   "ICENET01"                      8-byte magic
//   u32 record count
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//               float32 values (IEEE-754 LE, row-major)
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "icenet/error.hpp"
#include "icenet/image_io.hpp"
#include "icenet/network.hpp"

namespace icenet {

inline constexpr char kCheckpointMagic[9] = "ICENET01";

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const auto b = take(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    const auto b = take(4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const noexcept { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<T>& params) {
  if (!params.all_finite()) throw NumericError("refusing to save non-finite parameters");
  detail::ByteWriter out;
  out.bytes(kCheckpointMagic, 8);
  out.u32(static_cast<std::uint32_t>(params.tensor_count()));
  for (const auto& t : params.tensors()) {
    out.u16(static_cast<std::uint16_t>(t.name.size()));
    out.bytes(t.name.data(), t.name.size());
    out.u8(static_cast<std::uint8_t>(t.tensor.rank()));
    for (std::size_t d : t.tensor.dims) out.u32(static_cast<std::uint32_t>(d));
    for (T v : t.tensor.data) out.f32(static_cast<float>(v));
  }
  return std::move(out.buffer());
}

/// Parses and validates against the architecture implied by cfg.
inline ModelParams<float> parse_checkpoint(std::span<const std::uint8_t> bytes, const NetworkConfig& cfg = {}) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(std::string("bad checkpoint magic: expected \"") + kCheckpointMagic + "\"");
  }
  in.take(8);
  const std::uint32_t count = in.u32();
  const auto layout = parameter_layout(cfg);
  if (count != layout.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, architecture expects " +
                      std::to_string(layout.size()));
  }
  std::vector<NamedTensor<float>> tensors;
  tensors.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint16_t name_len = in.u16();
    const auto name_bytes = in.take(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint8_t rank = in.u8();
    ad::Dims dims(rank);
    for (auto& d : dims) d = in.u32();
    if (name != layout[k].name) {
      throw FormatError("checkpoint tensor " + std::to_string(k) + " is '" + name + "', expected '" + layout[k].name + "'");
    }
    if (dims != layout[k].dims) {
      throw ShapeError("shape mismatch for tensor '" + name + "': expected " + ad::dims_to_string(layout[k].dims) +
                       ", checkpoint has " + ad::dims_to_string(dims));
    }
    std::vector<float> values(ad::element_count(dims));
    for (float& v : values) v = in.f32();
    tensors.push_back({std::move(name), ad::Tensor<float>(std::move(dims), std::move(values))});
  }
  if (!in.at_end()) throw FormatError("trailing bytes after last checkpoint tensor");
  return ModelParams<float>(cfg, std::move(tensors));
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(params);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  write_file_bytes(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg = {}) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  return parse_checkpoint(bytes, cfg);
}

}  // namespace icenet
