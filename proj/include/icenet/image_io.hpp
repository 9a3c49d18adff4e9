// SPDX-License-Identifier: Apache-2.0
//
// 8-bit PNG / JPEG codecs on top of libpng and libjpeg.
#pragma once

#include <cctype>
#include <csetjmp>
#include <cstdlib>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "icenet/error.hpp"
#include "icenet/image.hpp"

namespace icenet {

inline constexpr std::size_t kDefaultMaxSide = 4096;

enum class ImageFormat { png, jpeg, unknown };

inline ImageFormat sniff_format(std::span<const std::uint8_t> bytes) noexcept {
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return ImageFormat::png;
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return ImageFormat::jpeg;
  return ImageFormat::unknown;
}

namespace detail {

inline void check_side(std::size_t w, std::size_t h, std::size_t max_side) {
  if (w == 0 || h == 0) throw DecodeError("image has zero extent");
  if (w > max_side || h > max_side) {
    throw ImageTooLarge("image " + std::to_string(w) + "x" + std::to_string(h) + " exceeds cap " +
                        std::to_string(max_side) + "x" + std::to_string(max_side));
  }
}

inline Image8 decode_png(std::span<const std::uint8_t> bytes, std::size_t max_side) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DecodeError(std::string("png: ") + image.message);
  }
  try {
    check_side(image.width, image.height, max_side);
  } catch (...) {
    png_image_free(&image);
    throw;
  }
  image.format = PNG_FORMAT_RGB;
  Image8 out{image.width, image.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(image))};
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw DecodeError("png: " + msg);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit_to_jump(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Only trivially destructible locals live across setjmp here.
inline bool decode_jpeg_raw(std::span<const std::uint8_t> bytes, std::size_t max_side, Image8& out,
                            char* message, bool& too_large) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager jerr;
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit_to_jump;
  jerr.message[0] = '\0';
  if (setjmp(jerr.jump)) {
    std::strncpy(message, jerr.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.image_width > max_side || cinfo.image_height > max_side) {
    out.width = cinfo.image_width;
    out.height = cinfo.image_height;
    too_large = true;
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.rgb.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

inline Image8 decode_jpeg(std::span<const std::uint8_t> bytes, std::size_t max_side) {
  Image8 out;
  char message[JMSG_LENGTH_MAX] = {0};
  bool too_large = false;
  if (!decode_jpeg_raw(bytes, max_side, out, message, too_large)) {
    if (too_large) check_side(out.width, out.height, max_side);
    throw DecodeError(std::string("jpeg: ") + message);
  }
  check_side(out.width, out.height, max_side);
  return out;
}

inline bool encode_jpeg_raw(const Image8& img, int quality, unsigned char** buffer, unsigned long* size,
                            char* message) {
  jpeg_compress_struct cinfo;
  JpegErrorManager jerr;
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit_to_jump;
  if (setjmp(jerr.jump)) {
    std::strncpy(message, jerr.message, JMSG_LENGTH_MAX);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, buffer, size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(img.rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

}  // namespace detail

/// Decodes PNG or JPEG (sniffed from magic bytes) into 8-bit RGB.
/// Throws ImageTooLarge before the full decode when a side exceeds max_side.
inline Image8 decode_image(std::span<const std::uint8_t> bytes, std::size_t max_side = kDefaultMaxSide) {
  switch (sniff_format(bytes)) {
    case ImageFormat::png:
      return detail::decode_png(bytes, max_side);
    case ImageFormat::jpeg:
      return detail::decode_jpeg(bytes, max_side);
    case ImageFormat::unknown:
      break;
  }
  throw DecodeError("payload is neither PNG nor JPEG");
}

namespace detail {

inline void png_append(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

inline void png_flush_noop(png_structp) {}

inline void png_raise(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

inline void png_ignore_warning(png_structp, png_const_charp) {}

// No C++ objects with destructors live in this frame, so longjmp is safe.
inline bool encode_png_raw(const Image8& img, int level, std::vector<std::uint8_t>& out, std::string& error) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_raise, png_ignore_warning);
  if (!png) {
    error = "out of memory";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    if (error.empty()) error = "out of memory";
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, &out, png_append, png_flush_noop);
  png_set_compression_level(png, level);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.rgb.data() + y * img.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

inline constexpr int kPngDefaultLevel = 6;
inline constexpr int kPngFastLevel = 1;

/// zlib `level` in [0, 9]; the pixels decode identically at any level.
inline std::vector<std::uint8_t> encode_png(const Image8& img, int level = kPngDefaultLevel) {
  if (img.width == 0 || img.height == 0 || img.rgb.size() != img.width * img.height * 3) {
    throw ShapeError("png encode: image buffer does not match its dimensions");
  }
  if (level < 0 || level > 9) throw RangeError("png compression level must lie in [0, 9]");
  std::vector<std::uint8_t> out;
  out.reserve(img.rgb.size() / 2 + 1024);
  std::string error;
  if (!detail::encode_png_raw(img, level, out, error)) throw DecodeError("png encode: " + error);
  return out;
}

inline std::vector<std::uint8_t> encode_jpeg(const Image8& img, int quality = 95) {
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  char message[JMSG_LENGTH_MAX] = {0};
  const bool ok = detail::encode_jpeg_raw(img, quality, &buffer, &size, message);
  std::vector<std::uint8_t> out;
  if (ok) out.assign(buffer, buffer + size);
  std::free(buffer);
  if (!ok) throw DecodeError(std::string("jpeg encode: ") + message);
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline Image8 read_image(const std::filesystem::path& path, std::size_t max_side = kDefaultMaxSide) {
  const auto bytes = read_file_bytes(path);
  return decode_image(bytes, max_side);
}

/// Encoder chosen from the extension: .jpg/.jpeg -> JPEG, anything else PNG.
inline void write_image(const std::filesystem::path& path, const Image8& img) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".jpg" || ext == ".jpeg") {
    write_file_bytes(path, encode_jpeg(img));
  } else {
    write_file_bytes(path, encode_png(img));
  }
}

}  // namespace icenet
