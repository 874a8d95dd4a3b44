#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "keyread/synthdoc/image.hpp"

namespace keyread::cli {

// Sums per-step H'×W' attention grids, min-max scales to 0..255 (a constant
// map becomes all zeros) and upsamples by nearest neighbour to the image.
inline synthdoc::PgmRaster export_attention_map(const std::vector<std::vector<float>>& grids, int mem_height,
                                                int mem_width, int height, int width) {
  require(!grids.empty(), "export_attention_map: no attention steps");
  require(height % mem_height == 0 && width % mem_width == 0 && height / mem_height == width / mem_width,
          "export_attention_map: image extents must be an integer multiple of the memory grid");
  const std::size_t cells = static_cast<std::size_t>(mem_height) * mem_width;
  std::vector<double> sum(cells, 0.0);
  for (const auto& g : grids) {
    require(g.size() == cells, "export_attention_map: grid size mismatch");
    for (std::size_t i = 0; i < cells; ++i) sum[i] += g[i];
  }
  const auto [lo, hi] = std::minmax_element(sum.begin(), sum.end());
  const double range = *hi - *lo;
  std::vector<std::uint8_t> level(cells, 0);
  if (range > 0.0)
    for (std::size_t i = 0; i < cells; ++i)
      level[i] = static_cast<std::uint8_t>(std::lround(255.0 * (sum[i] - *lo) / range));
  const int scale = height / mem_height;
  synthdoc::PgmRaster r{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      r.bytes[static_cast<std::size_t>(y) * width + x] =
          level[static_cast<std::size_t>(y / scale) * mem_width + x / scale];
  return r;
}

}  // namespace keyread::cli
