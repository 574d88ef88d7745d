#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mssdf/error.hpp"
#include "mssdf/image.hpp"
#include "mssdf/rng.hpp"

namespace mssdf {

/// Per-patch information scores (nonnegative).
class InfoScoreMap : public Grid<double> {
 public:
  using Grid<double>::Grid;
};

/// True marks a MASKED patch (hidden from the student).
class MaskMap : public Grid<std::uint8_t> {
 public:
  using Grid<std::uint8_t>::Grid;

  [[nodiscard]] bool masked(std::size_t i) const { return (*this)[i] != 0; }
  void set(std::size_t i, bool m) { (*this)[i] = m ? 1 : 0; }

  [[nodiscard]] std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count_if(values().begin(), values().end(), [](auto v) { return v != 0; }));
  }
  [[nodiscard]] double masked_fraction() const {
    return size() == 0 ? 0.0 : static_cast<double>(masked_count()) / static_cast<double>(size());
  }
  [[nodiscard]] std::vector<int> masked_positions() const { return positions(true); }
  [[nodiscard]] std::vector<int> visible_positions() const { return positions(false); }

 private:
  [[nodiscard]] std::vector<int> positions(bool want_masked) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (masked(i) == want_masked) out.push_back(static_cast<int>(i));
    return out;
  }
};

struct MaskProbabilityMap {
  Grid<double> probs;
  double q20 = 0.0;
  double q80 = 0.0;
};

struct SubstitutionSchedule {
  double rho_start = 0.1;
  double rho_step = 0.1;
  int epochs_per_step = 10;
  double rho_max = 0.7;

  void validate() const {
    require(rho_start >= 0.0 && rho_start <= rho_max && rho_max <= 1.0, "substitution schedule requires 0 <= ",
            "rho_start <= rho_max <= 1");
    require(rho_step >= 0.0, "rho_step must be nonnegative");
    require(epochs_per_step >= 1, "epochs_per_step must be >= 1");
  }
};

/// Relative weights of the gradient and variance terms of the patch score.
struct InfoScoreWeights {
  double gradient = 1.0;
  double variance = 1.0;
};

/// Sobel gradient magnitude of the luminance field, replicate-padded.
inline Grid<double> gradient_magnitude(const ModalityImage& image) {
  require(image.height() > 0 && image.width() > 0, "empty image");
  for (double v : image.pixels()) require(std::isfinite(v), "image contains non-finite pixel values");

  const int h = image.height();
  const int w = image.width();
  Grid<double> lum(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) lum(y, x) = image.luminance(y, x);

  auto px = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return lum(y, x);
  };

  Grid<double> out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
      out(y, x) = std::hypot(gx, gy);
    }
  }
  return out;
}

/// Mean gradient magnitude plus population luminance variance, per patch.
inline InfoScoreMap patch_info_score(const ModalityImage& image, InfoScoreWeights weights = {}) {
  image.validate();
  const Grid<double> grad = gradient_magnitude(image);
  const int p = image.patch_size();
  const double n = static_cast<double>(p) * p;

  InfoScoreMap scores(image.grid_rows(), image.grid_cols());
  for (int r = 0; r < scores.rows(); ++r) {
    for (int c = 0; c < scores.cols(); ++c) {
      double grad_sum = 0.0;
      double lum_sum = 0.0;
      for (int y = r * p; y < (r + 1) * p; ++y) {
        for (int x = c * p; x < (c + 1) * p; ++x) {
          grad_sum += grad(y, x);
          lum_sum += image.luminance(y, x);
        }
      }
      const double mean = lum_sum / n;
      double sq = 0.0;
      for (int y = r * p; y < (r + 1) * p; ++y) {
        for (int x = c * p; x < (c + 1) * p; ++x) {
          const double d = image.luminance(y, x) - mean;
          sq += d * d;
        }
      }
      scores(r, c) = weights.gradient * (grad_sum / n) + weights.variance * (sq / n);
    }
  }
  return scores;
}

inline InfoScoreMap fuse_info_scores(const InfoScoreMap& rgb, const InfoScoreMap& other) {
  require(rgb.same_shape(other), "fuse_info_scores: shape mismatch ", rgb.rows(), "x", rgb.cols(), " vs ",
          other.rows(), "x", other.cols());
  InfoScoreMap out(rgb.rows(), rgb.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rgb[i] + other[i];
  return out;
}

/// Linear-interpolation quantile of an ascending-sorted sample, q in [0, 1].
inline double sorted_quantile(std::span<const double> sorted, double q) {
  require(!sorted.empty(), "quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline constexpr double kLowInfoMaskProb = 0.8;
inline constexpr double kMidInfoMaskProb = 0.5;
inline constexpr double kHighInfoMaskProb = 0.3;

/// Maps fused scores to masking probabilities using Q20/Q80 of all scores pooled
/// over the batch. Scores equal to a quantile fall in the middle bucket.
inline std::vector<MaskProbabilityMap> assign_mask_probabilities(std::span<const InfoScoreMap> batch) {
  require(!batch.empty(), "assign_mask_probabilities: empty batch");
  std::vector<double> pooled;
  for (const auto& s : batch) {
    for (double v : s.values()) {
      require(std::isfinite(v), "assign_mask_probabilities: non-finite score");
      pooled.push_back(v);
    }
  }
  require(!pooled.empty(), "assign_mask_probabilities: batch has no patches");
  std::sort(pooled.begin(), pooled.end());
  const double q20 = sorted_quantile(pooled, 0.2);
  const double q80 = sorted_quantile(pooled, 0.8);

  std::vector<MaskProbabilityMap> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    MaskProbabilityMap m{Grid<double>(s.rows(), s.cols()), q20, q80};
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < q20)
        m.probs[i] = kLowInfoMaskProb;
      else if (s[i] > q80)
        m.probs[i] = kHighInfoMaskProb;
      else
        m.probs[i] = kMidInfoMaskProb;
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Uniform-probability map (the random-masking ablation).
inline MaskProbabilityMap uniform_mask_probabilities(int rows, int cols, double p) {
  require(p >= 0.0 && p <= 1.0, "mask probability must lie in [0,1]");
  return MaskProbabilityMap{Grid<double>(rows, cols, p), p, p};
}

/// Independent Bernoulli draw per patch, row-major order.
inline MaskMap sample_masks(const Grid<double>& probs, std::uint64_t seed) {
  Rng rng(seed);
  MaskMap mask(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    require(probs[i] >= 0.0 && probs[i] <= 1.0, "mask probability out of [0,1]");
    mask.set(i, rng.uniform() < probs[i]);
  }
  return mask;
}

inline MaskMap sample_masks(const MaskProbabilityMap& probs, std::uint64_t seed) {
  return sample_masks(probs.probs, seed);
}

inline double substitution_probability(int epoch, const SubstitutionSchedule& sched = {}) {
  require(epoch >= 0, "epoch must be nonnegative");
  sched.validate();
  const double steps = std::floor(static_cast<double>(epoch) / sched.epochs_per_step);
  const double rho = std::min(sched.rho_start + sched.rho_step * steps, sched.rho_max);
  // Snapped to a 1e-12 lattice: 0.1 + 0.1*2 reports 0.3.
  return std::round(rho * 1e12) / 1e12;
}

struct SubstitutionResult {
  ModalityImage image;
  std::vector<int> substituted;  // target patch positions that were replaced
  std::vector<int> sources;      // masked patch each target was copied from
};

inline void copy_patch(const ModalityImage& src, int src_pos, ModalityImage& dst, int dst_pos) {
  const int p = src.patch_size();
  const int cols = src.grid_cols();
  const int sy = (src_pos / cols) * p, sx = (src_pos % cols) * p;
  const int dy = (dst_pos / cols) * p, dx = (dst_pos % cols) * p;
  for (int y = 0; y < p; ++y)
    for (int x = 0; x < p; ++x)
      for (int c = 0; c < src.channels(); ++c) dst.at(dy + y, dx + x, c) = src.at(sy + y, sx + x, c);
}

/// Replaces each unmasked patch of the other-modality image, with probability
/// rho, by the content of a patch drawn uniformly from that image's masked set.
inline SubstitutionResult cross_modal_substitution(const ModalityImage& image, const MaskMap& mask, double rho,
                                                   std::uint64_t seed) {
  require(rho >= 0.0 && rho <= 1.0, "substitution probability ", rho, " outside [0,1]");
  require(image.modality() == Modality::Other, "cross-modal substitution applies to the other-modality stream");
  image.validate();
  require(mask.rows() == image.grid_rows() && mask.cols() == image.grid_cols(),
          "mask shape does not match the image patch grid");

  SubstitutionResult result{image, {}, {}};
  const std::vector<int> masked = mask.masked_positions();
  if (rho == 0.0 || masked.empty()) return result;

  Rng rng(seed);
  for (std::size_t pos = 0; pos < mask.size(); ++pos) {
    if (mask.masked(pos)) continue;
    if (!rng.bernoulli(rho)) continue;
    const int src = masked[rng.below(masked.size())];
    copy_patch(image, src, result.image, static_cast<int>(pos));
    result.substituted.push_back(static_cast<int>(pos));
    result.sources.push_back(src);
  }
  return result;
}

inline ModalityImage apply_cross_modal_substitution(const ModalityImage& image, const MaskMap& mask, double rho,
                                                    std::uint64_t seed) {
  return cross_modal_substitution(image, mask, rho, seed).image;
}

/// A position stays masked after fusion only if it is masked in both modalities.
inline MaskMap fuse_masks(const MaskMap& rgb, const MaskMap& other) {
  require(rgb.same_shape(other), "fuse_masks: shape mismatch");
  MaskMap out(rgb.rows(), rgb.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.set(i, rgb.masked(i) && other.masked(i));
  return out;
}

}  // namespace mssdf
