#include "pgsgan/png_io.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "pgsgan/error.hpp"

namespace pgsgan::png {

namespace {

struct WriteBuffer {
  std::vector<std::uint8_t> bytes;
};

void write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.insert(buf->bytes.end(), data, data + len);
}

void flush_cb(png_structp) {}

struct ReadBuffer {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void read_cb(png_structp png, png_bytep out, png_size_t len) {
  auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(png));
  if (buf->offset + len > buf->bytes.size()) {
    png_error(png, "truncated PNG stream");
  }
  std::memcpy(out, buf->bytes.data() + buf->offset, len);
  buf->offset += len;
}

[[noreturn]] void error_cb(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void warning_cb(png_structp, png_const_charp) {}

std::vector<std::uint8_t> encode(const Raster& r, int color_type, int expected_channels) {
  if (r.channels != expected_channels || r.width <= 0 || r.height <= 0 ||
      r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels) {
    throw DataError("png encode: raster does not match the requested color type");
  }
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, error_cb, warning_cb);
  if (!png) throw DataError("png encode: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  WriteBuffer buf;
  std::vector<png_color> palette;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png encode: " + err);
  }
  png_set_write_fn(png, &buf, write_cb, flush_cb);
  png_set_IHDR(png, info, r.width, r.height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    palette.resize(256);
    for (int i = 0; i < 256; ++i) {
      png_byte v = static_cast<png_byte>(i == 0 ? 0 : i == 1 ? 128 : i == 2 ? 255 : i);
      palette[i] = {v, v, v};
    }
    png_set_PLTE(png, info, palette.data(), 256);
  }
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
  for (int y = 0; y < r.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(r.pixels.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buf.bytes);
}

}  // namespace

std::vector<std::uint8_t> encode_gray(const Raster& r) { return encode(r, PNG_COLOR_TYPE_GRAY, 1); }
std::vector<std::uint8_t> encode_rgb(const Raster& r) { return encode(r, PNG_COLOR_TYPE_RGB, 3); }
std::vector<std::uint8_t> encode_indexed(const Raster& r) { return encode(r, PNG_COLOR_TYPE_PALETTE, 1); }

Raster decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw DataError("png decode: not a PNG stream");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, error_cb, warning_cb);
  if (!png) throw DataError("png decode: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  ReadBuffer buf{bytes, 0};
  Raster out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png decode: " + err);
  }
  png_set_read_fn(png, &buf, read_cb);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_set_packing(png);
  } else if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(out.width) * out.channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png decode: unsupported sample layout");
  }
  out.pixels.resize(stride * out.height);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file", path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed", path.string());
}

}  // namespace pgsgan::png
