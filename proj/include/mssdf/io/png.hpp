#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mssdf/error.hpp"

namespace mssdf::io {

/// 8-bit raster, channel-interleaved (1 = gray, 3 = RGB, 4 = RGBA).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> data;
};

inline png_uint_32 png_format(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw InvalidArgument("PNG supports 1, 3 or 4 channels, got " + std::to_string(channels));
  }
}

/// Reads any PNG, converting to the requested channel count.
inline Image8 read_png(const std::string& path, int channels = 3) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0)
    throw RuntimeError("cannot read PNG '" + path + "': " + image.message);
  image.format = png_format(channels);
  Image8 out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.channels = channels;
  out.data.resize(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr) == 0) {
    std::string msg = image.message;
    png_image_free(&image);
    throw RuntimeError("cannot decode PNG '" + path + "': " + msg);
  }
  return out;
}

inline void write_png(const std::string& path, const Image8& img) {
  require(img.data.size() == static_cast<std::size_t>(img.width) * img.height * img.channels,
          "PNG buffer size mismatch");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = png_format(img.channels);
  if (png_image_write_to_file(&image, path.c_str(), 0, img.data.data(), 0, nullptr) == 0)
    throw RuntimeError("cannot write PNG '" + path + "': " + image.message);
}

}  // namespace mssdf::io
