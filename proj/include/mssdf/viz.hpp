#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>

#include "mssdf/image.hpp"
#include "mssdf/io/png.hpp"
#include "mssdf/masking.hpp"

namespace mssdf {

/// Renders an image with masked patches filled gray and substituted patches
/// outlined in red. Pixel values are min-max scaled to the 8-bit range.
inline io::Image8 render_mask_overlay(const ModalityImage& image, const MaskMap& mask,
                                      std::span<const int> substituted = {}) {
  require(mask.rows() == image.grid_rows() && mask.cols() == image.grid_cols(), "overlay: mask/grid mismatch");
  const auto px = image.pixels();
  const auto [lo_it, hi_it] = std::minmax_element(px.begin(), px.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  const int p = image.patch_size();

  io::Image8 out{image.width(), image.height(), 3, {}};
  out.data.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      auto* dst = &out.data[(static_cast<std::size_t>(y) * out.width + x) * 3];
      const auto pos = static_cast<std::size_t>((y / p) * image.grid_cols() + x / p);
      for (int c = 0; c < 3; ++c) {
        const double v = image.at(y, x, std::min(c, image.channels() - 1));
        const double s = range > 0 ? (v - lo) / range : 0.0;
        dst[c] = mask.masked(pos) ? 128 : static_cast<std::uint8_t>(std::lround(255.0 * s));
      }
    }
  }
  for (int pos : substituted) {
    const int y0 = (pos / image.grid_cols()) * p;
    const int x0 = (pos % image.grid_cols()) * p;
    for (int y = y0; y < y0 + p; ++y) {
      for (int x = x0; x < x0 + p; ++x) {
        if (y != y0 && y != y0 + p - 1 && x != x0 && x != x0 + p - 1) continue;
        auto* dst = &out.data[(static_cast<std::size_t>(y) * out.width + x) * 3];
        dst[0] = 255;
        dst[1] = 0;
        dst[2] = 0;
      }
    }
  }
  return out;
}

inline std::filesystem::path mask_png_path(const std::filesystem::path& dir, const std::string& stem, Modality m) {
  return dir / (stem + "_mask_" + std::string(to_string(m)) + ".png");
}

inline void write_mask_png(const std::filesystem::path& path, const ModalityImage& image, const MaskMap& mask,
                           std::span<const int> substituted = {}) {
  io::write_png(path.string(), render_mask_overlay(image, mask, substituted));
}

}  // namespace mssdf
