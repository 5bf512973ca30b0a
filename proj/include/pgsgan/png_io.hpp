#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace pgsgan::png {

// 8-bit raster, interleaved channels. For paletted files `channels == 1` and
// the values are palette indices.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

std::vector<std::uint8_t> encode_gray(const Raster& r);
std::vector<std::uint8_t> encode_rgb(const Raster& r);
// Writes indices with a fixed palette (index 0 black, 1 mid grey, 2 white,
// others a ramp) so the file is both viewable and exact.
std::vector<std::uint8_t> encode_indexed(const Raster& r);

// Throws DataError on malformed input. Paletted images decode to their
// indices; 16-bit samples are reduced to 8 bits.
Raster decode(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace pgsgan::png
