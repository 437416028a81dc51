#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dswp/tensor.hpp"

namespace dswp {

/// Per-pixel class ids, row-major.
struct LabelMap {
  int h = 0, w = 0;
  std::vector<uint8_t> labels;

  uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
};

using Rgb8 = std::array<uint8_t, 3>;

/// 8-bit RGB PNG -> [3,H,W] tensor in [0,1]. Gray and palette files are
/// expanded to RGB on read.
Tensor load_png_rgb(const std::string& path);
/// Clamp to [0,1], quantize to 8-bit, write RGB PNG. Deterministic bytes.
void save_png_rgb(const std::string& path, const Tensor& img);

/// Binary mask [1,H,W] with values {0,1}; any channel value > 127 counts as 1.
Tensor load_png_mask(const std::string& path);
void save_png_mask(const std::string& path, const Tensor& mask);  // 8-bit gray 0/255

/// Label maps travel as indexed (palette) PNGs; the palette must have one
/// distinct color per class. Reading maps palette colors back to ids.
void save_png_indexed(const std::string& path, const LabelMap& map,
                      const std::vector<Rgb8>& palette);
LabelMap load_png_indexed(const std::string& path, const std::vector<Rgb8>& palette);

/// Images side by side with a 2-px white separator; all must share H and W.
Tensor compose_grid(const std::vector<Tensor>& images);

}  // namespace dswp
