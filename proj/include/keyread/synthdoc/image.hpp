#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "keyread/numcore/errors.hpp"

namespace keyread::synthdoc {

// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct Box {
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;

  int height() const { return row1 - row0; }
  int width() const { return col1 - col0; }
  bool contains(int r, int c) const { return r >= row0 && r < row1 && c >= col0 && c < col1; }
  bool overlaps(const Box& o) const { return row0 < o.row1 && o.row0 < row1 && col0 < o.col1 && o.col0 < col1; }
  bool operator==(const Box&) const = default;
};

inline Box merge(const Box& a, const Box& b) {
  return {std::min(a.row0, b.row0), std::min(a.col0, b.col0), std::max(a.row1, b.row1), std::max(a.col1, b.col1)};
}

// Grayscale raster with intensities in [0, 1]; ink is 1, paper is 0.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {
    require(h > 0 && w > 0, "image extents must be positive");
  }

  float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const GrayImage&) const = default;
};

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Raw 8-bit raster as stored in a binary PGM.
struct PgmRaster {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bytes;
};

inline std::string pgm_header(int height, int width) {
  return "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
}

inline void write_pgm(const std::filesystem::path& path, const PgmRaster& raster) {
  require(raster.bytes.size() == static_cast<std::size_t>(raster.height) * raster.width, "pgm: raster size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::string header = pgm_header(raster.height, raster.width);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(raster.bytes.data()), static_cast<std::streamsize>(raster.bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline PgmRaster read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) ++pos;
    if (start == pos) throw ParseError(path.string() + ": malformed PGM header, expected " + what, 0);
    return std::stoi(data.substr(start, pos - start));
  };
  if (data.size() < 2 || data[0] != 'P' || data[1] != '5') {
    throw ParseError(path.string() + ": not a binary PGM (missing P5 magic)", 0);
  }
  pos = 2;
  PgmRaster r;
  r.width = read_int("width");
  r.height = read_int("height");
  const int maxval = read_int("maxval");
  if (r.width <= 0 || r.height <= 0) throw ParseError(path.string() + ": non-positive PGM extents", 0);
  if (maxval != 255) throw ParseError(path.string() + ": only maxval 255 is supported", 0);
  if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos]))) {
    throw ParseError(path.string() + ": malformed PGM header terminator", 0);
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(r.width) * r.height;
  if (data.size() - pos < n) throw ParseError(path.string() + ": truncated PGM payload", 0);
  r.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return r;
}

inline void write_image(const std::filesystem::path& path, const GrayImage& img) {
  PgmRaster r{img.height, img.width, {}};
  r.bytes.reserve(img.pixels.size());
  for (float v : img.pixels) r.bytes.push_back(quantize(v));
  write_pgm(path, r);
}

inline GrayImage read_image(const std::filesystem::path& path) {
  const PgmRaster r = read_pgm(path);
  GrayImage img(r.height, r.width);
  for (std::size_t i = 0; i < r.bytes.size(); ++i) img.pixels[i] = static_cast<float>(r.bytes[i]) / 255.0f;
  return img;
}

}  // namespace keyread::synthdoc
