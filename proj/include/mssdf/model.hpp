#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mssdf/autodiff.hpp"
#include "mssdf/error.hpp"
#include "mssdf/image.hpp"
#include "mssdf/masking.hpp"
#include "mssdf/rng.hpp"

namespace mssdf {

/// Encoder / fusion / decoder dimensions and regularization rates.
struct ModelConfig {
  int encoder_dim = 64;
  int encoder_mlp_dim = 128;
  int encoder_layers = 2;
  int encoder_heads = 4;
  int fusion_dim = 32;
  int fusion_mlp_dim = 64;
  int fusion_layers = 3;
  int fusion_heads = 2;
  int decoder_dim = 32;
  int decoder_mlp_dim = 64;
  int decoder_layers = 4;
  int decoder_heads = 2;
  int patch_size = 16;
  int image_size = 64;
  int channels = 3;
  double dropout = 0.1;
  double drop_path = 0.1;
  double init_std = 0.02;

  /// Desk-scale preset (the defaults).
  static ModelConfig toy() { return {}; }

  /// ViT-B sized preset. Not exercised at desk scale.
  static ModelConfig base() {
    ModelConfig c;
    c.encoder_dim = 768;
    c.encoder_mlp_dim = 3072;
    c.encoder_layers = 12;
    c.encoder_heads = 12;
    c.fusion_dim = 384;
    c.fusion_mlp_dim = 1536;
    c.fusion_layers = 3;
    c.fusion_heads = 6;
    c.decoder_dim = 384;
    c.decoder_mlp_dim = 1536;
    c.decoder_layers = 4;
    c.decoder_heads = 6;
    c.image_size = 320;
    return c;
  }

  [[nodiscard]] int grid_side() const noexcept { return image_size / patch_size; }
  [[nodiscard]] int num_patches() const noexcept { return grid_side() * grid_side(); }
  [[nodiscard]] int patch_dim() const noexcept { return patch_size * patch_size * channels; }

  void validate() const {
    require(patch_size > 0 && image_size > 0 && image_size % patch_size == 0, "image_size ", image_size,
            " must be a positive multiple of patch_size ", patch_size);
    auto check = [](const char* what, int dim, int heads, int layers, int mlp) {
      require(dim > 0 && heads > 0 && dim % heads == 0, what, " dim ", dim, " must be divisible by heads ", heads);
      require(dim % 4 == 0, what, " dim must be divisible by 4 for 2D sinusoidal encoding");
      require(layers >= 0 && mlp > 0, what, " layers/mlp must be positive");
    };
    check("encoder", encoder_dim, encoder_heads, encoder_layers, encoder_mlp_dim);
    check("fusion", fusion_dim, fusion_heads, fusion_layers, fusion_mlp_dim);
    check("decoder", decoder_dim, decoder_heads, decoder_layers, decoder_mlp_dim);
    require(channels > 0, "channels must be positive");
    require(dropout >= 0.0 && dropout < 1.0 && drop_path >= 0.0 && drop_path < 1.0,
            "dropout and drop_path must lie in [0,1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Patches and positions.

/// N x (p*p*C) matrix; patches in row-major grid order, pixels (y, x, c) within a patch.
inline Matrix patchify(const ModalityImage& image, int patch_size) {
  require(patch_size > 0, "patch size must be positive");
  require(image.height() % patch_size == 0 && image.width() % patch_size == 0, "image ", image.height(), "x",
          image.width(), " is not divisible by patch size ", patch_size);
  const int rows = image.height() / patch_size;
  const int cols = image.width() / patch_size;
  const int c = image.channels();
  Matrix out(rows * cols, patch_size * patch_size * c);
  for (int r = 0; r < rows; ++r) {
    for (int q = 0; q < cols; ++q) {
      const int n = r * cols + q;
      Eigen::Index k = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int ch = 0; ch < c; ++ch) out(n, k++) = image.at(r * patch_size + y, q * patch_size + x, ch);
    }
  }
  return out;
}

inline ModalityImage unpatchify(const Matrix& patches, int height, int width, int channels, int patch_size,
                                Modality modality) {
  require(height % patch_size == 0 && width % patch_size == 0, "unpatchify: indivisible dimensions");
  const int rows = height / patch_size;
  const int cols = width / patch_size;
  require(patches.rows() == rows * cols && patches.cols() == patch_size * patch_size * channels,
          "unpatchify: patch matrix shape mismatch");
  ModalityImage img(height, width, channels, modality, patch_size);
  for (int r = 0; r < rows; ++r) {
    for (int q = 0; q < cols; ++q) {
      const int n = r * cols + q;
      Eigen::Index k = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int ch = 0; ch < channels; ++ch) img.at(r * patch_size + y, q * patch_size + x, ch) = patches(n, k++);
    }
  }
  return img;
}

/// Fixed 2D sin-cos table (N x dim). The first half of each row encodes the
/// grid row, the second half the grid column; each half is [sin..., cos...].
inline Matrix sinusoidal_position_encoding(int grid_rows, int grid_cols, int dim) {
  require(dim % 4 == 0, "positional encoding dim must be divisible by 4");
  const int quarter = dim / 4;
  Matrix pe(grid_rows * grid_cols, dim);
  for (int r = 0; r < grid_rows; ++r) {
    for (int c = 0; c < grid_cols; ++c) {
      const int n = r * grid_cols + c;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        pe(n, k) = std::sin(r * omega);
        pe(n, quarter + k) = std::cos(r * omega);
        pe(n, 2 * quarter + k) = std::sin(c * omega);
        pe(n, 3 * quarter + k) = std::cos(c * omega);
      }
    }
  }
  return pe;
}

inline Matrix gather(const Matrix& m, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < m.rows(), "row index ", rows[i], " out of range");
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token sequences.

enum class TokenModality : int { Rgb = 0, Other = 1, Fused = 2 };

inline TokenModality token_modality(Modality m) noexcept {
  return m == Modality::Rgb ? TokenModality::Rgb : TokenModality::Other;
}

/// Materialized tokens (N x D) with their patch-grid positions.
struct TokenSequence {
  Matrix tokens;
  std::vector<int> positions;
  TokenModality modality = TokenModality::Rgb;
};

/// Tokens living on a Graph.
struct TokenVars {
  Var tokens;
  std::vector<int> positions;
  TokenModality modality = TokenModality::Rgb;
};

/// Randomness for dropout / stochastic depth. Disabled unless training.
struct StochasticContext {
  bool training = false;
  double dropout = 0.0;
  double drop_path = 0.0;
  Rng* rng = nullptr;

  [[nodiscard]] bool active() const noexcept { return training && rng != nullptr; }
};

// ---------------------------------------------------------------------------
// Layers. Each holds indices into the ParameterStore it was registered with;
// a store copied from it (the teacher) shares the same indices.

struct LinearLayer {
  std::size_t weight = 0;  // in x out
  std::size_t bias = 0;    // 1 x out

  static LinearLayer create(ParameterStore& ps, const std::string& name, int in, int out, Rng& rng,
                            double std) {
    Matrix w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.truncated_normal(std);
    LinearLayer l;
    l.weight = ps.add(name + ".weight", std::move(w), true);
    l.bias = ps.add(name + ".bias", Matrix::Zero(1, out), false);
    return l;
  }

  Var forward(Graph& g, ParameterStore& ps, Var x) const {
    return g.add_row(g.matmul(x, g.param(ps, weight)), g.param(ps, bias));
  }

  [[nodiscard]] int in_dim(const ParameterStore& ps) const { return static_cast<int>(ps[weight].value.rows()); }
  [[nodiscard]] int out_dim(const ParameterStore& ps) const { return static_cast<int>(ps[weight].value.cols()); }
};

struct LayerNormLayer {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static LayerNormLayer create(ParameterStore& ps, const std::string& name, int dim) {
    LayerNormLayer l;
    l.gamma = ps.add(name + ".gamma", Matrix::Ones(1, dim), false);
    l.beta = ps.add(name + ".beta", Matrix::Zero(1, dim), false);
    return l;
  }

  Var forward(Graph& g, ParameterStore& ps, Var x) const {
    return g.layer_norm(x, g.param(ps, gamma), g.param(ps, beta));
  }
};

inline Var dropout(Graph& g, Var x, StochasticContext& ctx) {
  if (!ctx.active() || ctx.dropout <= 0.0) return x;
  const Matrix& v = g.value(x);
  Matrix keep(v.rows(), v.cols());
  const double scale = 1.0 / (1.0 - ctx.dropout);
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = ctx.rng->bernoulli(ctx.dropout) ? 0.0 : scale;
  return g.mul_const(x, keep);
}

/// Stochastic depth on a residual branch: the whole sequence (one sample) is dropped together.
inline Var drop_path(Graph& g, Var branch, double rate, StochasticContext& ctx) {
  if (!ctx.active() || rate <= 0.0) return branch;
  const bool drop = ctx.rng->bernoulli(rate);
  return g.scale(branch, drop ? 0.0 : 1.0 / (1.0 - rate));
}

/// Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)) with GELU.
struct TransformerBlock {
  LayerNormLayer norm1;
  LinearLayer qkv;
  LinearLayer proj;
  LayerNormLayer norm2;
  LinearLayer fc1;
  LinearLayer fc2;
  int heads = 1;
  double drop_path_rate = 0.0;

  static TransformerBlock create(ParameterStore& ps, const std::string& name, int dim, int mlp_dim, int heads,
                                 double drop_path_rate, Rng& rng, double std) {
    TransformerBlock b;
    b.norm1 = LayerNormLayer::create(ps, name + ".norm1", dim);
    b.qkv = LinearLayer::create(ps, name + ".attn.qkv", dim, 3 * dim, rng, std);
    b.proj = LinearLayer::create(ps, name + ".attn.proj", dim, dim, rng, std);
    b.norm2 = LayerNormLayer::create(ps, name + ".norm2", dim);
    b.fc1 = LinearLayer::create(ps, name + ".mlp.fc1", dim, mlp_dim, rng, std);
    b.fc2 = LinearLayer::create(ps, name + ".mlp.fc2", mlp_dim, dim, rng, std);
    b.heads = heads;
    b.drop_path_rate = drop_path_rate;
    return b;
  }

  Var attention(Graph& g, ParameterStore& ps, Var x) const {
    const auto dim = g.value(x).cols();
    const auto head_dim = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Var qkv_out = qkv.forward(g, ps, x);
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var q = g.slice_cols(qkv_out, h * head_dim, head_dim);
      Var k = g.slice_cols(qkv_out, dim + h * head_dim, head_dim);
      Var v = g.slice_cols(qkv_out, 2 * dim + h * head_dim, head_dim);
      Var attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), scale));
      outs.push_back(g.matmul(attn, v));
    }
    Var merged = heads == 1 ? outs.front() : g.concat_cols(outs);
    return proj.forward(g, ps, merged);
  }

  Var forward(Graph& g, ParameterStore& ps, Var x, StochasticContext& ctx) const {
    Var a = dropout(g, attention(g, ps, norm1.forward(g, ps, x)), ctx);
    x = g.add(x, drop_path(g, a, drop_path_rate, ctx));
    Var m = fc2.forward(g, ps, g.gelu(fc1.forward(g, ps, norm2.forward(g, ps, x))));
    m = dropout(g, m, ctx);
    return g.add(x, drop_path(g, m, drop_path_rate, ctx));
  }
};

struct TransformerStack {
  std::vector<TransformerBlock> blocks;
  LayerNormLayer norm;

  static TransformerStack create(ParameterStore& ps, const std::string& name, int dim, int mlp_dim, int heads,
                                 int layers, double drop_path, Rng& rng, double std) {
    TransformerStack s;
    for (int i = 0; i < layers; ++i) {
      // Linearly increasing stochastic depth.
      const double rate = layers > 1 ? drop_path * i / (layers - 1) : drop_path;
      s.blocks.push_back(TransformerBlock::create(ps, name + ".blocks." + std::to_string(i), dim, mlp_dim, heads,
                                                  rate, rng, std));
    }
    s.norm = LayerNormLayer::create(ps, name + ".norm", dim);
    return s;
  }

  Var forward(Graph& g, ParameterStore& ps, Var x, StochasticContext& ctx) const {
    for (const auto& b : blocks) x = b.forward(g, ps, x, ctx);
    return norm.forward(g, ps, x);
  }
};

// ---------------------------------------------------------------------------
// Encoder (shared by both modalities; the teacher is a copy of its store).

enum class EncoderRole { Student, Teacher };

struct Encoder {
  LinearLayer patch_embed;
  std::size_t modality_embed = 0;  // 2 x D, row per Modality
  TransformerStack stack;
  Matrix pos_table;                // N x D, fixed
  int dim = 0;

  static Encoder create(ParameterStore& ps, const ModelConfig& cfg, Rng& rng) {
    Encoder e;
    e.dim = cfg.encoder_dim;
    e.patch_embed = LinearLayer::create(ps, "encoder.patch_embed", cfg.patch_dim(), cfg.encoder_dim, rng, cfg.init_std);
    Matrix me(2, cfg.encoder_dim);
    for (Eigen::Index i = 0; i < me.size(); ++i) me.data()[i] = rng.truncated_normal(cfg.init_std);
    e.modality_embed = ps.add("encoder.modality_embed", std::move(me), false);
    e.stack = TransformerStack::create(ps, "encoder", cfg.encoder_dim, cfg.encoder_mlp_dim, cfg.encoder_heads,
                                       cfg.encoder_layers, cfg.drop_path, rng, cfg.init_std);
    e.pos_table = sinusoidal_position_encoding(cfg.grid_side(), cfg.grid_side(), cfg.encoder_dim);
    return e;
  }

  /// Linear patch projection + fixed position encoding + modality embedding.
  TokenVars embed(Graph& g, ParameterStore& ps, const Matrix& patches, std::span<const int> positions,
                  Modality m) const {
    require(patches.cols() == patch_embed.in_dim(ps), "patch vector length ", patches.cols(),
            " does not match projection input ", patch_embed.in_dim(ps));
    require(patches.rows() == pos_table.rows(), "expected ", pos_table.rows(), " patches, got ", patches.rows());
    Var x = patch_embed.forward(g, ps, g.constant(gather(patches, positions)));
    x = g.add(x, g.constant(gather(pos_table, positions)));
    const int mrow[] = {static_cast<int>(m)};
    x = g.add_row(x, g.gather_rows(g.param(ps, modality_embed), mrow));
    return {x, std::vector<int>(positions.begin(), positions.end()), token_modality(m)};
  }

  TokenVars encode(Graph& g, ParameterStore& ps, const TokenVars& tokens, StochasticContext& ctx) const {
    require(g.value(tokens.tokens).rows() > 0, "encoder received an empty token set");
    return {stack.forward(g, ps, tokens.tokens, ctx), tokens.positions, tokens.modality};
  }

  /// Student: only the visible positions; teacher: every position.
  TokenVars forward(Graph& g, ParameterStore& ps, const Matrix& patches, const MaskMap& mask, Modality m,
                    EncoderRole role, StochasticContext& ctx) const {
    std::vector<int> positions;
    if (role == EncoderRole::Student) {
      positions = mask.visible_positions();
      require(!positions.empty(), "student encoder: every position is masked (degenerate batch)");
    } else {
      positions.resize(static_cast<std::size_t>(patches.rows()));
      for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    }
    return encode(g, ps, embed(g, ps, patches, positions, m), ctx);
  }
};

// ---------------------------------------------------------------------------
// Fusion: union-of-visible positions, mean of per-modality projections.

/// Sorted union of two position lists plus the averaging matrices that map
/// each modality's rows onto it.
struct FusionLayout {
  std::vector<int> positions;
  Matrix from_rgb;    // U x n_rgb
  Matrix from_other;  // U x n_other
};

inline FusionLayout fusion_layout(std::span<const int> rgb, std::span<const int> other) {
  FusionLayout layout;
  std::vector<int> all(rgb.begin(), rgb.end());
  all.insert(all.end(), other.begin(), other.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  require(!all.empty(), "fusion: both modalities are fully masked");
  layout.positions = all;
  const auto u = static_cast<Eigen::Index>(all.size());
  layout.from_rgb = Matrix::Zero(u, static_cast<Eigen::Index>(rgb.size()));
  layout.from_other = Matrix::Zero(u, static_cast<Eigen::Index>(other.size()));
  auto row_of = [&](int pos) {
    return static_cast<Eigen::Index>(std::lower_bound(all.begin(), all.end(), pos) - all.begin());
  };
  std::vector<int> count(all.size(), 0);
  for (int p : rgb) ++count[static_cast<std::size_t>(row_of(p))];
  for (int p : other) ++count[static_cast<std::size_t>(row_of(p))];
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    const auto r = row_of(rgb[i]);
    layout.from_rgb(r, static_cast<Eigen::Index>(i)) = 1.0 / count[static_cast<std::size_t>(r)];
  }
  for (std::size_t i = 0; i < other.size(); ++i) {
    const auto r = row_of(other[i]);
    layout.from_other(r, static_cast<Eigen::Index>(i)) = 1.0 / count[static_cast<std::size_t>(r)];
  }
  return layout;
}

struct FusionModule {
  LinearLayer proj_rgb;
  LinearLayer proj_other;
  TransformerStack stack;

  static FusionModule create(ParameterStore& ps, const ModelConfig& cfg, Rng& rng) {
    FusionModule f;
    f.proj_rgb = LinearLayer::create(ps, "fusion.proj_rgb", cfg.encoder_dim, cfg.fusion_dim, rng, cfg.init_std);
    f.proj_other = LinearLayer::create(ps, "fusion.proj_other", cfg.encoder_dim, cfg.fusion_dim, rng, cfg.init_std);
    f.stack = TransformerStack::create(ps, "fusion", cfg.fusion_dim, cfg.fusion_mlp_dim, cfg.fusion_heads,
                                       cfg.fusion_layers, cfg.drop_path, rng, cfg.init_std);
    return f;
  }

  /// Fused tokens before the transformer blocks.
  Var combine(Graph& g, ParameterStore& ps, const TokenVars& rgb, const TokenVars& other,
              FusionLayout& layout) const {
    layout = fusion_layout(rgb.positions, other.positions);
    std::vector<Var> parts;
    if (!rgb.positions.empty())
      parts.push_back(g.left_multiply(layout.from_rgb, proj_rgb.forward(g, ps, rgb.tokens)));
    if (!other.positions.empty())
      parts.push_back(g.left_multiply(layout.from_other, proj_other.forward(g, ps, other.tokens)));
    return parts.size() == 1 ? parts.front() : g.add(parts[0], parts[1]);
  }

  TokenVars forward(Graph& g, ParameterStore& ps, const TokenVars& rgb, const TokenVars& other,
                    StochasticContext& ctx) const {
    FusionLayout layout;
    Var x = combine(g, ps, rgb, other, layout);
    return {stack.forward(g, ps, x, ctx), layout.positions, TokenModality::Fused};
  }
};

// ---------------------------------------------------------------------------
// Decoder: shared mask query + position + target-modality embedding, attending
// jointly with the fused context.

struct Decoder {
  LinearLayer embed;
  std::size_t mask_token = 0;      // 1 x D
  std::size_t modality_embed = 0;  // 2 x D
  TransformerStack stack;
  Matrix pos_table;

  static Decoder create(ParameterStore& ps, const ModelConfig& cfg, Rng& rng) {
    Decoder d;
    d.embed = LinearLayer::create(ps, "decoder.embed", cfg.fusion_dim, cfg.decoder_dim, rng, cfg.init_std);
    Matrix mt(1, cfg.decoder_dim);
    for (Eigen::Index i = 0; i < mt.size(); ++i) mt.data()[i] = rng.truncated_normal(cfg.init_std);
    d.mask_token = ps.add("decoder.mask_token", std::move(mt), false);
    Matrix me(2, cfg.decoder_dim);
    for (Eigen::Index i = 0; i < me.size(); ++i) me.data()[i] = rng.truncated_normal(cfg.init_std);
    d.modality_embed = ps.add("decoder.modality_embed", std::move(me), false);
    d.stack = TransformerStack::create(ps, "decoder", cfg.decoder_dim, cfg.decoder_mlp_dim, cfg.decoder_heads,
                                       cfg.decoder_layers, cfg.drop_path, rng, cfg.init_std);
    d.pos_table = sinusoidal_position_encoding(cfg.grid_side(), cfg.grid_side(), cfg.decoder_dim);
    return d;
  }

  TokenVars forward(Graph& g, ParameterStore& ps, const TokenVars& fused, std::span<const int> targets,
                    Modality target_modality, StochasticContext& ctx) const {
    const auto dim = pos_table.cols();
    if (targets.empty()) return {g.constant(Matrix::Zero(0, dim)), {}, token_modality(target_modality)};
    const auto k = static_cast<Eigen::Index>(targets.size());
    Var context = embed.forward(g, ps, fused.tokens);
    context = g.add(context, g.constant(gather(pos_table, fused.positions)));

    Var queries = g.left_multiply(Matrix::Ones(k, 1), g.param(ps, mask_token));
    queries = g.add(queries, g.constant(gather(pos_table, targets)));
    const int mrow[] = {static_cast<int>(target_modality)};
    queries = g.add_row(queries, g.gather_rows(g.param(ps, modality_embed), mrow));

    const Var parts[] = {context, queries};
    Var out = stack.forward(g, ps, g.concat_rows(parts), ctx);
    std::vector<int> rows(static_cast<std::size_t>(k));
    const auto offset = static_cast<int>(fused.positions.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = offset + static_cast<int>(i);
    return {g.gather_rows(out, rows), std::vector<int>(targets.begin(), targets.end()),
            token_modality(target_modality)};
  }
};

// ---------------------------------------------------------------------------

/// Student encoder, EMA teacher, fusion, decoder, target predictor and
/// modality classifier.
struct MssdfModel {
  ModelConfig config;
  ParameterStore student;  // encoder parameters (trained)
  ParameterStore teacher;  // EMA shadow of `student`
  ParameterStore heads;    // fusion, decoder, predictor, classifier (trained)
  Encoder encoder;
  FusionModule fusion;
  Decoder decoder;
  LinearLayer predictor;   // decoder_dim -> encoder_dim
  LinearLayer classifier;  // encoder_dim -> 1

  static MssdfModel create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MssdfModel m;
    m.config = cfg;
    Rng rng(derive_seed(seed, "init"));
    m.encoder = Encoder::create(m.student, cfg, rng);
    m.fusion = FusionModule::create(m.heads, cfg, rng);
    m.decoder = Decoder::create(m.heads, cfg, rng);
    m.predictor = LinearLayer::create(m.heads, "predictor", cfg.decoder_dim, cfg.encoder_dim, rng, cfg.init_std);
    m.classifier = LinearLayer::create(m.heads, "classifier", cfg.encoder_dim, 1, rng, cfg.init_std);
    m.teacher = m.student;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Value-level entry points (evaluate on a non-recording graph).

inline TokenSequence materialize(const Graph& g, const TokenVars& t) {
  return {g.value(t.tokens), t.positions, t.modality};
}

inline TokenVars on_graph(Graph& g, const TokenSequence& t) { return {g.constant(t.tokens), t.positions, t.modality}; }

inline TokenSequence embed_tokens(const Matrix& patches, Modality m, const MssdfModel& model) {
  Graph g(false);
  auto& ps = const_cast<ParameterStore&>(model.student);
  std::vector<int> all(static_cast<std::size_t>(patches.rows()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return materialize(g, model.encoder.embed(g, ps, patches, all, m));
}

/// Runs the encoder stack on embedded tokens. The student drops masked
/// positions first; the teacher keeps everything and uses teacher weights.
inline TokenSequence encode(const TokenSequence& tokens, const MaskMap& mask, EncoderRole role,
                            const MssdfModel& model, StochasticContext ctx = {}) {
  Graph g(false);
  auto& ps = const_cast<ParameterStore&>(role == EncoderRole::Student ? model.student : model.teacher);
  TokenSequence input = tokens;
  if (role == EncoderRole::Student) {
    std::vector<int> rows;
    std::vector<int> positions;
    for (std::size_t i = 0; i < tokens.positions.size(); ++i) {
      const int p = tokens.positions[i];
      require(p >= 0 && static_cast<std::size_t>(p) < mask.size(), "token position out of mask range");
      if (!mask.masked(static_cast<std::size_t>(p))) {
        rows.push_back(static_cast<int>(i));
        positions.push_back(p);
      }
    }
    require(!rows.empty(), "student encoder: every position is masked (degenerate batch)");
    input.tokens = gather(tokens.tokens, rows);
    input.positions = positions;
  }
  return materialize(g, model.encoder.encode(g, ps, on_graph(g, input), ctx));
}

inline TokenSequence fuse(const TokenSequence& rgb, const TokenSequence& other, const MssdfModel& model) {
  Graph g(false);
  StochasticContext ctx;
  auto& ps = const_cast<ParameterStore&>(model.heads);
  return materialize(g, model.fusion.forward(g, ps, on_graph(g, rgb), on_graph(g, other), ctx));
}

inline TokenSequence decode(const TokenSequence& fused, std::span<const int> targets, Modality target_modality,
                            const MssdfModel& model) {
  Graph g(false);
  StochasticContext ctx;
  auto& ps = const_cast<ParameterStore&>(model.heads);
  return materialize(g, model.decoder.forward(g, ps, on_graph(g, fused), targets, target_modality, ctx));
}

inline TokenSequence predict_targets(const TokenSequence& decoded, const MssdfModel& model) {
  require(decoded.tokens.cols() == model.config.decoder_dim, "predict_targets: expected dim ",
          model.config.decoder_dim, ", got ", decoded.tokens.cols());
  const auto& ps = model.heads;
  Matrix out = (decoded.tokens * ps[model.predictor.weight].value).rowwise() +
               RowVector(ps[model.predictor.bias].value.row(0));
  return {out, decoded.positions, decoded.modality};
}

/// Per-token logit W_c h + b.
inline std::vector<double> classify_modality(const Matrix& tokens, const Matrix& weight, double bias) {
  require(weight.rows() == tokens.cols() && weight.cols() == 1, "classifier weight must be ", tokens.cols(), "x1");
  std::vector<double> logits(static_cast<std::size_t>(tokens.rows()));
  const Eigen::VectorXd z = tokens * weight.col(0);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = z(static_cast<Eigen::Index>(i)) + bias;
  return logits;
}

// ---------------------------------------------------------------------------
// EMA teacher.

struct EmaState {
  std::vector<double> teacher_params;
  double momentum = 0.996;
};

inline EmaState ema_update(EmaState state, std::span<const double> student) {
  require(state.teacher_params.size() == student.size(), "ema_update: layout mismatch (", state.teacher_params.size(),
          " vs ", student.size(), ")");
  require(state.momentum >= 0.0 && state.momentum <= 1.0, "ema momentum must lie in [0,1]");
  const double m = state.momentum;
  for (std::size_t i = 0; i < student.size(); ++i)
    state.teacher_params[i] = m * state.teacher_params[i] + (1.0 - m) * student[i];
  return state;
}

inline void ema_update(ParameterStore& teacher, const ParameterStore& student, double momentum) {
  require(teacher.same_layout(student), "ema_update: teacher/student layout mismatch");
  require(momentum >= 0.0 && momentum <= 1.0, "ema momentum must lie in [0,1]");
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i].value = momentum * teacher[i].value + (1.0 - momentum) * student[i].value;
}

/// Cosine ramp of the EMA momentum from `base` to 1 over `total_steps`.
inline double ema_momentum_at(long step, long total_steps, double base) {
  if (total_steps <= 0) return base;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 1.0 - (1.0 - base) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

}  // namespace mssdf
