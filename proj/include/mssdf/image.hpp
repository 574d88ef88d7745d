#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mssdf/error.hpp"

namespace mssdf {

enum class Modality : int { Rgb = 0, Other = 1 };

inline std::string_view to_string(Modality m) noexcept {
  return m == Modality::Rgb ? "rgb" : "other";
}

/// Row-major 2D grid over the patch lattice of an image.
template <class T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols), data_(checked_size(rows, cols), fill) {}
  Grid(int rows, int cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == checked_size(rows, cols), "grid data size ", data_.size(), " does not match ", rows,
            "x", cols);
  }

  [[nodiscard]] int rows() const noexcept { return rows_; }
  [[nodiscard]] int cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::span<T> values() noexcept { return data_; }
  [[nodiscard]] std::span<const T> values() const noexcept { return data_; }

  template <class U>
  [[nodiscard]] bool same_shape(const Grid<U>& other) const noexcept {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  static std::size_t checked_size(int rows, int cols) {
    require(rows >= 0 && cols >= 0, "grid dimensions must be non-negative");
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

/// Pixel raster (H x W x C, channel-interleaved) tagged with its modality.
class ModalityImage {
 public:
  ModalityImage() = default;

  ModalityImage(int height, int width, int channels, Modality modality, int patch_size = 16)
      : height_(height), width_(width), channels_(channels), patch_size_(patch_size), modality_(modality) {
    require(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
    pixels_.assign(static_cast<std::size_t>(height) * width * channels, 0.0);
  }

  ModalityImage(int height, int width, int channels, std::vector<double> pixels, Modality modality,
                int patch_size = 16)
      : height_(height),
        width_(width),
        channels_(channels),
        patch_size_(patch_size),
        modality_(modality),
        pixels_(std::move(pixels)) {
    require(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
    require(pixels_.size() == static_cast<std::size_t>(height) * width * channels,
            "pixel buffer size does not match ", height, "x", width, "x", channels);
  }

  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] int channels() const noexcept { return channels_; }
  [[nodiscard]] int patch_size() const noexcept { return patch_size_; }
  [[nodiscard]] Modality modality() const noexcept { return modality_; }
  void set_modality(Modality m) noexcept { modality_ = m; }
  void set_patch_size(int p) noexcept { patch_size_ = p; }

  [[nodiscard]] int grid_rows() const noexcept { return height_ / patch_size_; }
  [[nodiscard]] int grid_cols() const noexcept { return width_ / patch_size_; }
  [[nodiscard]] int num_patches() const noexcept { return grid_rows() * grid_cols(); }

  double& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
  [[nodiscard]] double at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

  /// Equal-weight channel mean.
  [[nodiscard]] double luminance(int y, int x) const {
    const std::size_t base = index(y, x, 0);
    double sum = 0.0;
    for (int c = 0; c < channels_; ++c) sum += pixels_[base + c];
    return sum / channels_;
  }

  [[nodiscard]] std::span<double> pixels() noexcept { return pixels_; }
  [[nodiscard]] std::span<const double> pixels() const noexcept { return pixels_; }

  /// Checks patch divisibility and finiteness; throws InvalidArgument.
  void validate() const {
    require(height_ > 0 && width_ > 0 && channels_ > 0, "empty image");
    require(patch_size_ > 0, "patch size must be positive");
    require(height_ % patch_size_ == 0 && width_ % patch_size_ == 0, "image ", height_, "x", width_,
            " is not divisible by patch size ", patch_size_);
    for (double v : pixels_) require(std::isfinite(v), "image contains non-finite pixel values");
  }

  friend bool operator==(const ModalityImage&, const ModalityImage&) = default;

 private:
  [[nodiscard]] std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  int patch_size_ = 16;
  Modality modality_ = Modality::Rgb;
  std::vector<double> pixels_;
};

/// Pixel-aligned RGB / other-modality pair.
struct ModalityPair {
  ModalityImage rgb;
  ModalityImage other;
  std::string pair_id;
  std::optional<int> label;

  void validate() const {
    rgb.validate();
    other.validate();
    require(rgb.height() == other.height() && rgb.width() == other.width(), "pair ", pair_id,
            ": modalities are not the same size");
    require(rgb.patch_size() == other.patch_size(), "pair ", pair_id, ": patch sizes differ");
  }

  friend bool operator==(const ModalityPair&, const ModalityPair&) = default;
};

}  // namespace mssdf
