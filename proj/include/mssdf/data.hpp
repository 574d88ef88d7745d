#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mssdf/error.hpp"
#include "mssdf/image.hpp"
#include "mssdf/io/png.hpp"
#include "mssdf/io/tiff.hpp"
#include "mssdf/rng.hpp"

namespace mssdf {

// ---------------------------------------------------------------------------
// Preprocessing.

inline ModalityImage replicate_dsm_channels(const ModalityImage& dsm) {
  require(dsm.channels() == 1, "replicate_dsm_channels expects a single-channel raster, got ", dsm.channels(),
          " channels");
  ModalityImage out(dsm.height(), dsm.width(), 3, dsm.modality(), dsm.patch_size());
  for (int y = 0; y < dsm.height(); ++y)
    for (int x = 0; x < dsm.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = dsm.at(y, x, 0);
  return out;
}

/// (x - mean) / std per channel.
inline ModalityImage normalize(const ModalityImage& image, std::span<const double> mean, std::span<const double> std) {
  require(mean.size() == static_cast<std::size_t>(image.channels()) && std.size() == mean.size(),
          "normalize: expected ", image.channels(), " statistics per vector");
  for (double s : std) require(s > 0.0 && std::isfinite(s), "normalize: std must be positive");
  ModalityImage out = image;
  auto px = out.pixels();
  const auto c = static_cast<std::size_t>(image.channels());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = (px[i] - mean[i % c]) / std[i % c];
  return out;
}

inline ModalityImage denormalize(const ModalityImage& image, std::span<const double> mean,
                                 std::span<const double> std) {
  require(mean.size() == static_cast<std::size_t>(image.channels()) && std.size() == mean.size(),
          "denormalize: expected ", image.channels(), " statistics per vector");
  ModalityImage out = image;
  auto px = out.pixels();
  const auto c = static_cast<std::size_t>(image.channels());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = px[i] * std[i % c] + mean[i % c];
  return out;
}

/// Rescales a single-tile height raster to [0, 1]; a flat tile maps to zeros.
inline ModalityImage minmax_scale(const ModalityImage& image) {
  auto px = image.pixels();
  const auto [lo, hi] = std::minmax_element(px.begin(), px.end());
  ModalityImage out = image;
  const double range = *hi - *lo;
  for (auto& v : out.pixels()) v = range > 0.0 ? (v - *lo) / range : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic aligned pairs.

struct SyntheticOptions {
  int patch_size = 16;
  /// Per-primitive brightness spread; color carries only a weak class tint.
  double intensity_jitter = 0.25;
  double class_tint = 0.06;
  /// Amplitude of the zero-mean surface pattern that each class paints on its footprint.
  double texture_amplitude = 0.12;
  double pixel_noise = 0.01;
};

namespace detail {

/// Low-frequency field: a few random plane waves.
struct SmoothField {
  std::array<double, 3> fx{}, fy{}, phase{}, amp{};

  SmoothField(Rng& rng, int size, double amplitude) {
    for (int i = 0; i < 3; ++i) {
      fx[i] = rng.uniform(-1.5, 1.5) * 2.0 * std::numbers::pi / size;
      fy[i] = rng.uniform(-1.5, 1.5) * 2.0 * std::numbers::pi / size;
      phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      amp[i] = amplitude * rng.uniform(0.3, 1.0) / 3.0;
    }
  }

  [[nodiscard]] double operator()(int y, int x) const {
    double v = 0.0;
    for (int i = 0; i < 3; ++i) v += amp[i] * std::sin(fx[i] * x + fy[i] * y + phase[i]);
    return v;
  }
};

struct Primitive {
  int cls = 0;
  // Footprint membership and relative height in [0, 1] at (y, x); negative when outside.
  std::function<double(int, int)> profile;
  std::array<double, 3> color{};
  double height = 0.0;
  int phase = 0;
  double texture_amplitude = 0.0;

  // Square-wave surface pattern with period 4: rows, checkerboard, columns or diagonals.
  [[nodiscard]] double texture(int y, int x) const {
    const int u = y + phase, v = x + phase;
    int on = 0;
    switch (cls % 4) {
      case 0: on = (u / 2) % 2; break;
      case 1: on = ((u / 2) + (v / 2)) % 2; break;
      case 2: on = (v / 2) % 2; break;
      default: on = ((u + v) / 2) % 2; break;
    }
    return on != 0 ? texture_amplitude : -texture_amplitude;
  }
};

inline Primitive make_primitive(int cls, int size, Rng& rng, const SyntheticOptions& opt) {
  Primitive p;
  p.cls = cls;
  static constexpr std::array<std::array<double, 3>, 4> kTint = {{
      {1.0, 0.0, -1.0},
      {-1.0, 1.0, 0.0},
      {0.0, -1.0, 1.0},
      {1.0, 1.0, -1.0},
  }};
  const double base = rng.uniform(0.5 - opt.intensity_jitter, 0.5 + opt.intensity_jitter);
  for (int c = 0; c < 3; ++c)
    p.color[static_cast<std::size_t>(c)] =
        std::clamp(base + opt.class_tint * kTint[static_cast<std::size_t>(cls % 4)][static_cast<std::size_t>(c)] +
                       rng.uniform(-0.03, 0.03),
                   0.0, 1.0);
  p.phase = static_cast<int>(rng.below(4));
  p.texture_amplitude = opt.texture_amplitude;
  const double s = size / 64.0;
  switch (cls % 4) {
    case 0: {  // flat-roofed rectangle, tall
      const int w = static_cast<int>(rng.uniform(10, 20) * s), h = static_cast<int>(rng.uniform(10, 20) * s);
      const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, size - w))));
      const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, size - h))));
      p.height = rng.uniform(0.8, 1.0);
      p.profile = [=](int y, int x) { return (x >= x0 && x < x0 + w && y >= y0 && y < y0 + h) ? 1.0 : -1.0; };
      break;
    }
    case 1: {  // disk with a dome profile, medium height
      const double r = rng.uniform(5, 9) * s;
      const double cx = rng.uniform(r, size - r), cy = rng.uniform(r, size - r);
      p.height = rng.uniform(0.4, 0.6);
      p.profile = [=](int y, int x) {
        const double d2 = ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy)) / (r * r);
        return d2 <= 1.0 ? std::sqrt(1.0 - d2) : -1.0;
      };
      break;
    }
    case 2: {  // full-length bar at ground level
      const int t = static_cast<int>(rng.uniform(4, 7) * s);
      const int off = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, size - t))));
      const bool horizontal = rng.bernoulli(0.5);
      p.height = 0.05;
      p.profile = [=](int y, int x) {
        const int v = horizontal ? y : x;
        return (v >= off && v < off + t) ? 1.0 : -1.0;
      };
      break;
    }
    default: {  // small square depression
      const int w = std::max(2, static_cast<int>(rng.uniform(4, 8) * s));
      const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, size - w))));
      const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, size - w))));
      p.height = -0.3;
      p.profile = [=](int y, int x) { return (x >= x0 && x < x0 + w && y >= y0 && y < y0 + w) ? 1.0 : -1.0; };
      break;
    }
  }
  return p;
}

}  // namespace detail

/// Renders class-dependent primitives into the RGB modality and a correlated
/// smooth height field (replicated to 3 channels) into the other modality.
/// n_classes == 0 renders background only. Pure function of its arguments.
inline ModalityPair generate_synthetic_pair(std::uint64_t seed, int size, int n_classes,
                                            const SyntheticOptions& opt = {}) {
  require(size > 0 && size % opt.patch_size == 0, "synthetic size ", size, " must be a multiple of patch size ",
          opt.patch_size);
  require(n_classes >= 0, "n_classes must be nonnegative");
  Rng rng(derive_seed(seed, "synthetic"));

  std::array<double, 3> bg{};
  const double bg_level = rng.uniform(0.35, 0.55);
  for (auto& b : bg) b = bg_level + rng.uniform(-0.03, 0.03);
  const detail::SmoothField rgb_field(rng, size, 0.04);
  const detail::SmoothField height_field(rng, size, 0.08);

  std::vector<detail::Primitive> prims;
  std::optional<int> label;
  if (n_classes > 0) {
    const int dominant = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_classes)));
    label = dominant;
    const int n_dom = 3 + static_cast<int>(rng.below(3));
    const int n_distract = n_classes > 1 ? static_cast<int>(rng.below(2)) : 0;
    for (int i = 0; i < n_distract; ++i) {
      int other = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_classes - 1)));
      if (other >= dominant) ++other;
      prims.push_back(detail::make_primitive(other, size, rng, opt));
    }
    for (int i = 0; i < n_dom; ++i) prims.push_back(detail::make_primitive(dominant, size, rng, opt));
  }

  ModalityImage rgb(size, size, 3, Modality::Rgb, opt.patch_size);
  Grid<double> height(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::array<double, 3> c = bg;
      for (auto& v : c) v += rgb_field(y, x);
      double h = height_field(y, x);
      for (const auto& p : prims) {
        const double w = p.profile(y, x);
        if (w < 0.0) continue;
        c = p.color;
        const double t = p.texture(y, x);
        for (auto& v : c) v += t;
        h = p.height < 0.0 ? h + p.height * w : std::max(h, p.height * w);
      }
      for (int ch = 0; ch < 3; ++ch)
        rgb.at(y, x, ch) = std::clamp(c[static_cast<std::size_t>(ch)] + opt.pixel_noise * rng.normal(), 0.0, 1.0);
      height(y, x) = h;
    }
  }

  // 3x3 box blur gives the height field soft edges.
  ModalityImage other(size, size, 3, Modality::Other, opt.patch_size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double s = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) s += height(std::clamp(y + dy, 0, size - 1), std::clamp(x + dx, 0, size - 1));
      for (int ch = 0; ch < 3; ++ch) other.at(y, x, ch) = s / 9.0;
    }
  }

  std::ostringstream id;
  id << "synth_" << seed;
  return ModalityPair{std::move(rgb), std::move(other), id.str(), label};
}

/// Labeled synthetic dataset: pair i uses seed derive(seed, i).
inline std::vector<ModalityPair> generate_synthetic_dataset(std::uint64_t seed, int count, int size, int n_classes,
                                                            const SyntheticOptions& opt = {}) {
  std::vector<ModalityPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto pair = generate_synthetic_pair(derive_seed(seed, "dataset", {static_cast<std::uint64_t>(i)}), size,
                                        n_classes, opt);
    pair.pair_id = "pair_" + std::to_string(i);
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// HR-Pairs layout reader.

struct ModalityStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

struct ManifestEntry {
  std::string pair_id;
  std::string rgb_path;    // relative to root
  std::string other_path;  // relative to root
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  ModalityStats rgb_stats;
  ModalityStats other_stats;
};

namespace detail {
inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::array<double, 3> parse_triplet(const std::string& v, const std::string& key) {
  std::array<double, 3> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw RuntimeError("stats key '" + key + "' has more than 3 values");
    try {
      out[i++] = std::stod(trim(item));
    } catch (const std::exception&) {
      throw RuntimeError("stats key '" + key + "' has a non-numeric value '" + item + "'");
    }
  }
  if (i != 3) throw RuntimeError("stats key '" + key + "' needs 3 comma-separated values");
  return out;
}
}  // namespace detail

/// Parses `pair_id<TAB>rgb_relpath<TAB>other_relpath` lines ('#' comments and
/// blank lines ignored). Statistics come from `<manifest>.stats` when present.
inline DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw RuntimeError("cannot open manifest '" + manifest_path.string() + "'");
  DatasetManifest m;
  m.root = manifest_path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3)
      throw RuntimeError("manifest line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    m.entries.push_back({fields[0], fields[1], fields[2]});
  }

  const auto stats_path = std::filesystem::path(manifest_path.string() + ".stats");
  if (std::filesystem::exists(stats_path)) {
    std::ifstream sin(stats_path);
    while (std::getline(sin, line)) {
      line = detail::trim(line);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw RuntimeError("stats line without '=': " + line);
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string val = detail::trim(line.substr(eq + 1));
      if (key == "rgb.mean")
        m.rgb_stats.mean = detail::parse_triplet(val, key);
      else if (key == "rgb.std")
        m.rgb_stats.std = detail::parse_triplet(val, key);
      else if (key == "other.mean")
        m.other_stats.mean = detail::parse_triplet(val, key);
      else if (key == "other.std")
        m.other_stats.std = detail::parse_triplet(val, key);
      else
        throw RuntimeError("unknown stats key '" + key + "'");
    }
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& manifest_path, const DatasetManifest& m) {
  std::ofstream out(manifest_path);
  if (!out) throw RuntimeError("cannot write manifest '" + manifest_path.string() + "'");
  for (const auto& e : m.entries) out << e.pair_id << '\t' << e.rgb_path << '\t' << e.other_path << '\n';
  std::ofstream stats(manifest_path.string() + ".stats");
  auto triplet = [](const std::array<double, 3>& a) {
    std::ostringstream os;
    os.precision(17);
    os << a[0] << ',' << a[1] << ',' << a[2];
    return os.str();
  };
  stats << "rgb.mean=" << triplet(m.rgb_stats.mean) << '\n'
        << "rgb.std=" << triplet(m.rgb_stats.std) << '\n'
        << "other.mean=" << triplet(m.other_stats.mean) << '\n'
        << "other.std=" << triplet(m.other_stats.std) << '\n';
}

/// Yields normalized, aligned pairs in manifest order. The DOM is an 8-bit
/// 3-channel PNG; the DSM a 1-channel float32 TIFF, min-max scaled per tile
/// and replicated to 3 channels.
class HrPairsReader {
 public:
  explicit HrPairsReader(DatasetManifest manifest, int expected_size = 512, int patch_size = 16)
      : manifest_(std::move(manifest)), expected_size_(expected_size), patch_size_(patch_size) {}

  std::optional<ModalityPair> next() {
    if (cursor_ >= manifest_.entries.size()) return std::nullopt;
    return load(manifest_.entries[cursor_++]);
  }

  [[nodiscard]] std::size_t size() const noexcept { return manifest_.entries.size(); }

  std::vector<ModalityPair> read_all() {
    std::vector<ModalityPair> out;
    while (auto p = next()) out.push_back(std::move(*p));
    return out;
  }

 private:
  [[noreturn]] static void fail(const ManifestEntry& e, const std::string& what) {
    throw RuntimeError("pair '" + e.pair_id + "': " + what);
  }

  ModalityPair load(const ManifestEntry& e) const {
    const auto rgb_path = manifest_.root / e.rgb_path;
    const auto dsm_path = manifest_.root / e.other_path;
    if (!std::filesystem::exists(rgb_path)) fail(e, "missing file " + rgb_path.string());
    if (!std::filesystem::exists(dsm_path)) fail(e, "missing file " + dsm_path.string());

    io::Image8 dom;
    io::FloatRaster dsm;
    try {
      dom = io::read_png(rgb_path.string(), 3);
      dsm = io::read_float_tiff(dsm_path.string());
    } catch (const std::exception& ex) {
      fail(e, ex.what());
    }
    if (dom.width != expected_size_ || dom.height != expected_size_)
      fail(e, "DOM is " + std::to_string(dom.width) + "x" + std::to_string(dom.height) + ", expected " +
                  std::to_string(expected_size_));
    if (dsm.width != expected_size_ || dsm.height != expected_size_)
      fail(e, "DSM is " + std::to_string(dsm.width) + "x" + std::to_string(dsm.height) + ", expected " +
                  std::to_string(expected_size_));
    if (dsm.channels != 1) fail(e, "DSM has " + std::to_string(dsm.channels) + " channels, expected 1");

    ModalityImage rgb(expected_size_, expected_size_, 3, Modality::Rgb, patch_size_);
    for (std::size_t i = 0; i < dom.data.size(); ++i) rgb.pixels()[i] = dom.data[i] / 255.0;

    ModalityImage height(expected_size_, expected_size_, 1, Modality::Other, patch_size_);
    for (std::size_t i = 0; i < dsm.data.size(); ++i) {
      if (!std::isfinite(dsm.data[i])) fail(e, "DSM contains non-finite heights");
      height.pixels()[i] = dsm.data[i];
    }

    ModalityPair pair;
    pair.pair_id = e.pair_id;
    pair.rgb = normalize(rgb, manifest_.rgb_stats.mean, manifest_.rgb_stats.std);
    pair.other = normalize(replicate_dsm_channels(minmax_scale(height)), manifest_.other_stats.mean,
                           manifest_.other_stats.std);
    return pair;
  }

  DatasetManifest manifest_;
  int expected_size_;
  int patch_size_;
  std::size_t cursor_ = 0;
};

inline HrPairsReader load_hr_pairs(DatasetManifest manifest, int expected_size = 512, int patch_size = 16) {
  return HrPairsReader(std::move(manifest), expected_size, patch_size);
}

/// Writes a pair in the on-disk layout: `<id>_dom.png` and `<id>_dsm.tif`.
/// RGB values are clamped to [0,1] and quantized; channel 0 of the other modality is stored as height.
inline ManifestEntry write_pair_files(const std::filesystem::path& root, const ModalityPair& pair) {
  io::Image8 dom{pair.rgb.width(), pair.rgb.height(), 3, {}};
  dom.data.resize(static_cast<std::size_t>(dom.width) * dom.height * 3);
  for (std::size_t i = 0; i < dom.data.size(); ++i)
    dom.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pair.rgb.pixels()[i], 0.0, 1.0) * 255.0));
  io::FloatRaster dsm{pair.other.width(), pair.other.height(), 1, {}};
  dsm.data.resize(static_cast<std::size_t>(dsm.width) * dsm.height);
  for (int y = 0; y < dsm.height; ++y)
    for (int x = 0; x < dsm.width; ++x)
      dsm.data[static_cast<std::size_t>(y) * dsm.width + x] = static_cast<float>(pair.other.at(y, x, 0));
  ManifestEntry e{pair.pair_id, pair.pair_id + "_dom.png", pair.pair_id + "_dsm.tif"};
  io::write_png((root / e.rgb_path).string(), dom);
  io::write_float_tiff((root / e.other_path).string(), dsm);
  return e;
}

}  // namespace mssdf
