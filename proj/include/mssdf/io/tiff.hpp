#pragma once

#include <tiffio.h>

#include <memory>
#include <string>
#include <vector>

#include "mssdf/error.hpp"

namespace mssdf::io {

/// Single-band float32 raster.
struct FloatRaster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> data;
};

namespace detail {
struct TiffCloser {
  void operator()(TIFF* t) const noexcept {
    if (t != nullptr) TIFFClose(t);
  }
};
using TiffHandle = std::unique_ptr<TIFF, TiffCloser>;

inline void silence_tiff_warnings() {
  static const bool once = [] {
    TIFFSetWarningHandler(nullptr);
    TIFFSetErrorHandler(nullptr);
    return true;
  }();
  (void)once;
}
}  // namespace detail

/// Reads a strip- or scanline-organized float32 TIFF. `channels` reports the
/// samples-per-pixel of the file; data holds band-interleaved samples.
inline FloatRaster read_float_tiff(const std::string& path) {
  detail::silence_tiff_warnings();
  detail::TiffHandle tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw RuntimeError("cannot open TIFF '" + path + "'");
  uint32_t w = 0, h = 0;
  uint16_t spp = 1, bps = 0, fmt = SAMPLEFORMAT_UINT;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &fmt);
  if (bps != 32 || fmt != SAMPLEFORMAT_IEEEFP)
    throw RuntimeError("TIFF '" + path + "' is not 32-bit float");
  FloatRaster out;
  out.width = static_cast<int>(w);
  out.height = static_cast<int>(h);
  out.channels = spp;
  out.data.resize(static_cast<std::size_t>(w) * h * spp);
  const auto line = static_cast<std::size_t>(TIFFScanlineSize(tif.get()));
  if (line != static_cast<std::size_t>(w) * spp * sizeof(float))
    throw RuntimeError("TIFF '" + path + "' has an unsupported layout");
  for (uint32_t y = 0; y < h; ++y) {
    if (TIFFReadScanline(tif.get(), out.data.data() + static_cast<std::size_t>(y) * w * spp, y, 0) < 0)
      throw RuntimeError("TIFF '" + path + "' is truncated or corrupt at row " + std::to_string(y));
  }
  return out;
}

inline void write_float_tiff(const std::string& path, const FloatRaster& r) {
  require(r.data.size() == static_cast<std::size_t>(r.width) * r.height * r.channels, "TIFF buffer size mismatch");
  detail::silence_tiff_warnings();
  detail::TiffHandle tif(TIFFOpen(path.c_str(), "w"));
  if (!tif) throw RuntimeError("cannot create TIFF '" + path + "'");
  TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<uint32_t>(r.width));
  TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<uint32_t>(r.height));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, static_cast<uint16_t>(r.channels));
  TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, static_cast<uint16_t>(32));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLEFORMAT, static_cast<uint16_t>(SAMPLEFORMAT_IEEEFP));
  TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, static_cast<uint16_t>(PLANARCONFIG_CONTIG));
  TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, static_cast<uint16_t>(PHOTOMETRIC_MINISBLACK));
  TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, static_cast<uint32_t>(1));
  std::vector<float> row(static_cast<std::size_t>(r.width) * r.channels);
  for (int y = 0; y < r.height; ++y) {
    std::copy_n(r.data.begin() + static_cast<std::ptrdiff_t>(row.size()) * y, row.size(), row.begin());
    if (TIFFWriteScanline(tif.get(), row.data(), static_cast<uint32_t>(y), 0) < 0)
      throw RuntimeError("failed writing TIFF '" + path + "'");
  }
}

}  // namespace mssdf::io
