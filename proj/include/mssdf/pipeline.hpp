#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mssdf/archive.hpp"
#include "mssdf/autodiff.hpp"
#include "mssdf/config.hpp"
#include "mssdf/error.hpp"
#include "mssdf/image.hpp"
#include "mssdf/losses.hpp"
#include "mssdf/masking.hpp"
#include "mssdf/model.hpp"
#include "mssdf/optim.hpp"
#include "mssdf/rng.hpp"
#include "mssdf/train_config.hpp"

namespace mssdf {

// ---------------------------------------------------------------------------
// Geometric augmentation shared by both modalities.

struct AugmentParams {
  int crop_y = 0;
  int crop_x = 0;
  int crop_size = 0;  // 0 keeps the full frame
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;

  [[nodiscard]] bool identity() const noexcept { return crop_size == 0 && !hflip && !vflip && quarter_turns == 0; }
};

inline AugmentParams sample_augmentation(Rng& rng, int size) {
  AugmentParams a;
  if (rng.bernoulli(0.5)) {
    a.crop_size = size / 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - size / 2 + 1)));
    a.crop_y = static_cast<int>(rng.below(static_cast<std::uint64_t>(size - a.crop_size + 1)));
    a.crop_x = static_cast<int>(rng.below(static_cast<std::uint64_t>(size - a.crop_size + 1)));
    if (a.crop_size == size) a.crop_size = 0;
  }
  a.hflip = rng.bernoulli(0.5);
  a.vflip = rng.bernoulli(0.5);
  a.quarter_turns = static_cast<int>(rng.below(4));
  return a;
}

/// Crop + bilinear resize back to full size, then flips, then rotation.
/// Requires a square image when rotating by an odd number of quarter turns.
inline ModalityImage apply_augmentation(const ModalityImage& image, const AugmentParams& a) {
  const int h = image.height();
  const int w = image.width();
  const int ch = image.channels();
  ModalityImage cur = image;

  if (a.crop_size > 0) {
    require(h == w, "random-resize-crop expects a square image");
    require(a.crop_y >= 0 && a.crop_x >= 0 && a.crop_y + a.crop_size <= h && a.crop_x + a.crop_size <= w,
            "crop window out of bounds");
    const double s = static_cast<double>(a.crop_size) / h;
    for (int y = 0; y < h; ++y) {
      const double sy = std::clamp(a.crop_y + (y + 0.5) * s - 0.5, 0.0, h - 1.0);
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - y0;
      for (int x = 0; x < w; ++x) {
        const double sx = std::clamp(a.crop_x + (x + 0.5) * s - 0.5, 0.0, w - 1.0);
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - x0;
        for (int c = 0; c < ch; ++c) {
          const double top = (1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
          const double bot = (1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
          cur.at(y, x, c) = (1 - fy) * top + fy * bot;
        }
      }
    }
  }

  if (a.hflip || a.vflip) {
    const ModalityImage src = cur;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c)
          cur.at(y, x, c) = src.at(a.vflip ? h - 1 - y : y, a.hflip ? w - 1 - x : x, c);
  }

  for (int t = 0; t < (a.quarter_turns % 4 + 4) % 4; ++t) {
    require(h == w, "rotation expects a square image");
    const ModalityImage src = cur;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c) cur.at(y, x, c) = src.at(x, w - 1 - y, c);
  }
  return cur;
}

inline ModalityPair augment_pair(const ModalityPair& pair, const AugmentParams& a) {
  ModalityPair out = pair;
  out.rgb = apply_augmentation(pair.rgb, a);
  out.other = apply_augmentation(pair.other, a);
  return out;
}

/// One transform drawn from `seed` and applied to both modalities.
inline ModalityPair augment_pair(const ModalityPair& pair, std::uint64_t seed) {
  pair.validate();
  Rng rng(derive_seed(seed, "augment"));
  return augment_pair(pair, sample_augmentation(rng, pair.rgb.height()));
}

// ---------------------------------------------------------------------------
// Training state and per-step computation.

struct MetricsRow {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double rho = 0.0;
  double mask_rate_rgb = 0.0;
  double mask_rate_other = 0.0;
  LossReport losses;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline constexpr const char* kMetricsHeader = "step,epoch,lr,rho,mask_rate_rgb,mask_rate_other,rec,align,hsic,cls,total";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.epoch,
                r.lr, r.rho, r.mask_rate_rgb, r.mask_rate_other, r.losses.rec, r.losses.align, r.losses.hsic,
                r.losses.cls, r.losses.total);
  return buf;
}

struct TrainerState {
  MssdfModel model;
  AdamW optimizer;
  long step = 0;  // optimizer steps taken
  long steps_per_epoch = 1;
  Rng rng;

  [[nodiscard]] int epoch() const noexcept { return static_cast<int>(step / std::max(1L, steps_per_epoch)); }

  static TrainerState create(const ModelConfig& mc, const TrainConfig& tc, long steps_per_epoch) {
    TrainerState s;
    s.model = MssdfModel::create(mc, tc.seed);
    s.optimizer = AdamW(tc.adamw());
    s.step = 0;
    s.steps_per_epoch = std::max(1L, steps_per_epoch);
    s.rng = Rng(derive_seed(tc.seed, "master"));
    return s;
  }
};

struct SampleMasks {
  MaskMap rgb;
  MaskMap other;
};

/// Unmasks the highest-scoring patch when every patch of a modality is masked.
inline void keep_one_visible(MaskMap& mask, const Grid<double>& scores) {
  if (mask.masked_count() != mask.size() || mask.size() == 0) return;
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  mask.set(best, false);
}

/// Masks for one micro-batch. Information scores are pooled across it to
/// derive the quantile thresholds; sample k draws from its own streams.
inline std::vector<SampleMasks> compute_masks(std::span<const ModalityPair> micro, const TrainConfig& cfg,
                                              std::uint64_t step_seed, std::size_t first_index) {
  std::vector<InfoScoreMap> fused;
  fused.reserve(micro.size());
  for (const auto& p : micro)
    fused.push_back(fuse_info_scores(patch_info_score(p.rgb, cfg.info_weights), patch_info_score(p.other, cfg.info_weights)));

  std::vector<MaskProbabilityMap> probs;
  if (cfg.masking == MaskingStrategy::InformationAware) {
    probs = assign_mask_probabilities(fused);
  } else {
    for (const auto& f : fused) probs.push_back(uniform_mask_probabilities(f.rows(), f.cols(), cfg.random_mask_ratio));
  }

  std::vector<SampleMasks> out;
  for (std::size_t i = 0; i < micro.size(); ++i) {
    const auto k = static_cast<std::uint64_t>(first_index + i);
    SampleMasks m{sample_masks(probs[i], derive_seed(step_seed, "mask-rgb", {k})),
                  sample_masks(probs[i], derive_seed(step_seed, "mask-other", {k}))};
    keep_one_visible(m.rgb, fused[i]);
    keep_one_visible(m.other, fused[i]);
    out.push_back(std::move(m));
  }
  return out;
}

struct SampleForward {
  LossReport losses;
  Var total;
  bool rec_skipped = false;
};

struct TeacherTokens {
  Matrix rgb;
  Matrix other;
};

/// Teacher encoder outputs for the unmasked, unsubstituted pair.
inline TeacherTokens teacher_tokens(MssdfModel& model, const ModalityPair& pair) {
  const int p = model.config.patch_size;
  Graph tg(false);
  StochasticContext frozen;
  const MaskMap none(pair.rgb.height() / p, pair.rgb.width() / p);
  TeacherTokens t;
  t.rgb = tg.value(model.encoder.forward(tg, model.teacher, patchify(pair.rgb, p), none, Modality::Rgb,
                                         EncoderRole::Teacher, frozen).tokens);
  t.other = tg.value(model.encoder.forward(tg, model.teacher, patchify(pair.other, p), none, Modality::Other,
                                           EncoderRole::Teacher, frozen).tokens);
  return t;
}

/// Builds the objective for sample `self` of `batch_teacher` on `g`. Student
/// and heads are recorded. Teacher tokens of the other samples in the batch
/// serve as extra alignment negatives and carry no gradient.
inline SampleForward sample_objective(Graph& g, MssdfModel& model, const ModalityPair& pair, const SampleMasks& masks,
                                      double rho, std::uint64_t sample_seed, const TrainConfig& cfg,
                                      std::span<const TeacherTokens> batch_teacher, std::size_t self) {
  require(self < batch_teacher.size(), "sample_objective: sample index out of range");
  const ModelConfig& mc = model.config;
  const int p = mc.patch_size;
  const auto sub = cross_modal_substitution(pair.other, masks.other, rho, derive_seed(sample_seed, "substitute"));

  const Matrix rgb_patches = patchify(pair.rgb, p);
  const Matrix other_student = patchify(sub.image, p);

  Rng noise(derive_seed(sample_seed, "noise"));
  StochasticContext ctx{true, mc.dropout, mc.drop_path, &noise};

  TokenVars s_rgb = model.encoder.forward(g, model.student, rgb_patches, masks.rgb, Modality::Rgb,
                                          EncoderRole::Student, ctx);
  TokenVars s_other = model.encoder.forward(g, model.student, other_student, masks.other, Modality::Other,
                                            EncoderRole::Student, ctx);

  const Matrix& t_rgb = batch_teacher[self].rgb;
  const Matrix& t_other = batch_teacher[self].other;

  SampleForward out;
  LossReport& rep = out.losses;
  const Var zero = g.constant(Matrix::Zero(1, 1));

  // Reconstruction of teacher tokens at masked positions of both modalities.
  TokenVars fused = model.fusion.forward(g, model.heads, s_rgb, s_other, ctx);
  std::vector<Var> preds;
  std::vector<Matrix> targets;
  const std::pair<Modality, const MaskMap*> streams[] = {{Modality::Rgb, &masks.rgb}, {Modality::Other, &masks.other}};
  for (const auto& [mod, mask] : streams) {
    const auto hidden = mask->masked_positions();
    if (hidden.empty()) continue;
    TokenVars dec = model.decoder.forward(g, model.heads, fused, hidden, mod, ctx);
    preds.push_back(model.predictor.forward(g, model.heads, dec.tokens));
    targets.push_back(gather(mod == Modality::Rgb ? t_rgb : t_other, hidden));
  }
  Var rec = zero;
  if (!preds.empty()) {
    Matrix target(0, mc.encoder_dim);
    for (const auto& t : targets) {
      Matrix grown(target.rows() + t.rows(), target.cols());
      grown << target, t;
      target = std::move(grown);
    }
    rec = reconstruction_loss_node(g, g.concat_rows(preds), target);
  } else {
    out.rec_skipped = true;
  }
  rep.rec = g.scalar(rec);

  // Pool of student tokens: RGB rows first, then other-modality rows.
  const std::size_t n_rgb = s_rgb.positions.size();
  const Var pool_parts[] = {s_rgb.tokens, s_other.tokens};
  const Var pool = g.concat_rows(pool_parts);
  std::vector<int> pool_positions = s_rgb.positions;
  pool_positions.insert(pool_positions.end(), s_other.positions.begin(), s_other.positions.end());

  std::vector<int> common_rgb, common_other;
  for (std::size_t i = 0, j = 0; i < s_rgb.positions.size() && j < s_other.positions.size();) {
    if (s_rgb.positions[i] < s_other.positions[j]) {
      ++i;
    } else if (s_rgb.positions[i] > s_other.positions[j]) {
      ++j;
    } else {
      common_rgb.push_back(static_cast<int>(i));
      common_other.push_back(static_cast<int>(n_rgb + j));
      ++i;
      ++j;
    }
  }

  // Alignment pool: this sample's student tokens followed by the teacher
  // tokens of every other sample in the batch.
  std::vector<Var> align_parts = {pool};
  for (std::size_t b = 0; b < batch_teacher.size(); ++b) {
    if (b == self) continue;
    align_parts.push_back(g.constant(batch_teacher[b].rgb));
    align_parts.push_back(g.constant(batch_teacher[b].other));
  }
  const Var align_pool = align_parts.size() == 1 ? pool : g.concat_rows(align_parts);
  const auto align_rows = static_cast<std::size_t>(g.value(align_pool).rows());

  Var align = zero;
  if (!common_rgb.empty() && align_rows > 2) {
    Rng neg_rng(derive_seed(sample_seed, "negatives"));
    AlignmentIndex idx;
    for (std::size_t c = 0; c < common_rgb.size(); ++c) {
      const int position = pool_positions[static_cast<std::size_t>(common_rgb[c])];
      std::vector<int> candidates;
      for (std::size_t r = 0; r < pool_positions.size(); ++r)
        if (pool_positions[r] != position) candidates.push_back(static_cast<int>(r));
      const auto grid = static_cast<std::size_t>(t_rgb.rows());
      for (std::size_t r = pool_positions.size(); r < align_rows; ++r)
        if ((r - pool_positions.size()) % grid != static_cast<std::size_t>(position)) candidates.push_back(static_cast<int>(r));
      if (candidates.empty()) continue;
      for (int dir = 0; dir < 2; ++dir) {
        std::vector<int> negs(static_cast<std::size_t>(cfg.num_negatives));
        for (auto& n : negs) n = candidates[neg_rng.below(candidates.size())];
        idx.queries.push_back(dir == 0 ? common_rgb[c] : common_other[c]);
        idx.positives.push_back(dir == 0 ? common_other[c] : common_rgb[c]);
        idx.negatives.push_back(std::move(negs));
      }
    }
    if (!idx.queries.empty())
      align = alignment_loss_node(g, align_pool, idx, AlignmentOptions{cfg.tau, cfg.strict_align});
  }
  rep.align = g.scalar(align);

  Var hsic = zero;
  if (common_rgb.size() >= 2) hsic = hsic_loss_node(g, g.gather_rows(pool, common_rgb), g.gather_rows(pool, common_other));
  rep.hsic = g.scalar(hsic);

  std::vector<int> labels(pool_positions.size(), 1);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_rgb), 0);
  Var cls = modality_bce_loss_node(g, model.classifier.forward(g, model.heads, pool), labels);
  rep.cls = g.scalar(cls);

  rep.total = total_loss(rep, cfg.loss_weights);
  const Var terms[] = {rec, align, hsic, cls};
  const double weights[] = {cfg.loss_weights.rec, cfg.loss_weights.align, cfg.loss_weights.hsic,
                            cfg.loss_weights.cls};
  out.total = g.weighted_sum(terms, weights);
  return out;
}

struct StepOptions {
  /// Masks per sample of the step, in batch order. Computed when absent.
  const std::vector<SampleMasks>* fixed_masks = nullptr;
};

struct StepResult {
  MetricsRow metrics;
  double ema_momentum = 0.0;
  int rec_skipped = 0;
  std::vector<SampleMasks> masks;
};

/// One optimizer step over `batch` (already augmented), split into
/// micro-batches of cfg.batch_size. Each micro-batch loss is the mean over its
/// samples; gradients are averaged over micro-batches before the update.
inline StepResult train_step(TrainerState& state, std::span<const ModalityPair> batch, const TrainConfig& cfg,
                             const StepOptions& opts = {}) {
  require(!batch.empty(), "train_step: empty batch");
  require(!opts.fixed_masks || opts.fixed_masks->size() == batch.size(), "train_step: fixed mask count mismatch");
  MssdfModel& model = state.model;
  const long total_steps = static_cast<long>(cfg.total_epochs) * state.steps_per_epoch;

  StepResult res;
  MetricsRow& row = res.metrics;
  row.step = state.step;
  row.epoch = state.epoch();
  row.lr = lr_at(state.step, state.steps_per_epoch, cfg.lr_schedule());
  row.rho = cfg.cross_modal_substitution ? substitution_probability(row.epoch, cfg.substitution) : 0.0;

  const std::uint64_t step_seed = state.rng();
  const auto micro = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_micro = (batch.size() + micro - 1) / micro;

  model.student.zero_grad();
  model.heads.zero_grad();
  LossReport sum;
  double mask_rgb = 0.0, mask_other = 0.0;
  std::vector<TeacherTokens> teacher;
  teacher.reserve(batch.size());
  for (const auto& pair : batch) teacher.push_back(teacher_tokens(model, pair));
  for (std::size_t start = 0; start < batch.size(); start += micro) {
    const std::size_t count = std::min(micro, batch.size() - start);
    const auto chunk = batch.subspan(start, count);
    std::vector<SampleMasks> masks;
    if (opts.fixed_masks) {
      masks.assign(opts.fixed_masks->begin() + static_cast<std::ptrdiff_t>(start),
                   opts.fixed_masks->begin() + static_cast<std::ptrdiff_t>(start + count));
    } else {
      masks = compute_masks(chunk, cfg, step_seed, start);
    }
    const double seed = 1.0 / (static_cast<double>(count) * static_cast<double>(n_micro));
    for (std::size_t i = 0; i < count; ++i) {
      const auto k = static_cast<std::uint64_t>(start + i);
      Graph g(true);
      SampleForward f = sample_objective(g, model, chunk[i], masks[i], row.rho, derive_seed(step_seed, "sample", {k}),
                                         cfg, teacher, start + i);
      g.backward(f.total, seed);
      sum.rec += f.losses.rec;
      sum.align += f.losses.align;
      sum.hsic += f.losses.hsic;
      sum.cls += f.losses.cls;
      mask_rgb += masks[i].rgb.masked_fraction();
      mask_other += masks[i].other.masked_fraction();
      res.rec_skipped += f.rec_skipped ? 1 : 0;
    }
    res.masks.insert(res.masks.end(), masks.begin(), masks.end());
  }

  const double n = static_cast<double>(batch.size());
  row.losses = with_total(LossReport{sum.rec / n, sum.align / n, sum.hsic / n, sum.cls / n, 0.0}, cfg.loss_weights);
  row.mask_rate_rgb = mask_rgb / n;
  row.mask_rate_other = mask_other / n;

  state.optimizer.step({&model.student, &model.heads}, row.lr);
  model.student.zero_grad();
  model.heads.zero_grad();

  res.ema_momentum = cfg.ema_cosine_ramp ? ema_momentum_at(state.step, total_steps, cfg.ema_momentum) : cfg.ema_momentum;
  ema_update(model.teacher, model.student, res.ema_momentum);
  ++state.step;
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: tensor archive plus a JSON sidecar.

inline constexpr int kCheckpointVersion = 1;

struct CheckpointRecord {
  TrainerState state;
  nlohmann::json config;
};

inline std::filesystem::path checkpoint_sidecar(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

namespace detail {

inline nlohmann::json model_config_json(const ModelConfig& m) {
  RunConfig rc;
  rc.model = m;
  nlohmann::json all = config_to_json(rc);
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [k, v] : all.items())
    if (k.rfind("model.", 0) == 0) out[k] = v;
  return out;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw RuntimeError("cannot write '" + tmp.string() + "'");
    out << text;
    out.flush();
    if (!out) throw RuntimeError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw RuntimeError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainerState& state,
                            const nlohmann::json& config = nlohmann::json::object()) {
  std::vector<NamedTensor> tensors;
  append_store(tensors, state.model.student, "student/");
  append_store(tensors, state.model.teacher, "teacher/");
  append_store(tensors, state.model.heads, "heads/");
  const ParameterStore* stores[] = {&state.model.student, &state.model.heads};
  const auto& m = state.optimizer.first_moments();
  const auto& v = state.optimizer.second_moments();
  for (std::size_t s = 0; s < m.size(); ++s) {
    for (std::size_t i = 0; i < m[s].size(); ++i) {
      const std::string name = std::to_string(s) + "/" + (*stores[s])[i].name;
      tensors.push_back({"optim.m/" + name, m[s][i]});
      tensors.push_back({"optim.v/" + name, v[s][i]});
    }
  }

  nlohmann::json meta;
  meta["version"] = kCheckpointVersion;
  meta["step"] = state.step;
  meta["epoch"] = state.epoch();
  meta["steps_per_epoch"] = state.steps_per_epoch;
  meta["optimizer_steps"] = state.optimizer.steps_taken();
  meta["optimizer_bound"] = !m.empty();
  meta["rng_state"] = nlohmann::json::array();
  for (auto w : state.rng.state()) meta["rng_state"].push_back(detail::hex64(w));
  meta["model_config"] = detail::model_config_json(state.model.config);
  meta["config"] = config;

  write_archive(path, tensors);
  detail::write_text_atomic(checkpoint_sidecar(path), meta.dump(2) + "\n");
}

/// Rebuilds the state for `expected` and fills it from the checkpoint. Any
/// missing or differently shaped tensor is rejected by name.
inline CheckpointRecord load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected,
                                       const TrainConfig& train = {}) {
  const auto side = checkpoint_sidecar(path);
  std::ifstream in(side);
  if (!in) throw RuntimeError("cannot open checkpoint metadata '" + side.string() + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw RuntimeError("checkpoint metadata '" + side.string() + "' is corrupt: " + e.what());
  }
  if (meta.value("version", -1) != kCheckpointVersion)
    throw RuntimeError("checkpoint '" + path.string() + "' has unsupported version " +
                       meta.value("version", nlohmann::json(-1)).dump());

  const auto tensors = read_archive(path);
  CheckpointRecord rec;
  TrainerState& s = rec.state;
  s.model = MssdfModel::create(expected, 0);
  load_store(s.model.student, tensors, "student/");
  load_store(s.model.teacher, tensors, "teacher/");
  load_store(s.model.heads, tensors, "heads/");

  s.optimizer = AdamW(train.adamw());
  if (meta.at("optimizer_bound").get<bool>()) {
    std::vector<std::vector<Matrix>> m(2), v(2);
    ParameterStore ms[2] = {s.model.student, s.model.heads};
    ParameterStore vs[2] = {s.model.student, s.model.heads};
    for (int i = 0; i < 2; ++i) {
      load_store(ms[i], tensors, "optim.m/" + std::to_string(i) + "/");
      load_store(vs[i], tensors, "optim.v/" + std::to_string(i) + "/");
      for (const auto& p : ms[i]) m[static_cast<std::size_t>(i)].push_back(p.value);
      for (const auto& p : vs[i]) v[static_cast<std::size_t>(i)].push_back(p.value);
    }
    s.optimizer.restore(meta.at("optimizer_steps").get<long>(), std::move(m), std::move(v));
  }

  s.step = meta.at("step").get<long>();
  s.steps_per_epoch = meta.at("steps_per_epoch").get<long>();
  Rng::State rs{};
  const auto& words = meta.at("rng_state");
  if (words.size() != rs.size()) throw RuntimeError("checkpoint rng_state must have 4 words");
  for (std::size_t i = 0; i < rs.size(); ++i) rs[i] = std::stoull(words[i].get<std::string>(), nullptr, 16);
  s.rng.set_state(rs);
  rec.config = meta.value("config", nlohmann::json::object());
  return rec;
}

/// Field-by-field equality of two training states.
inline bool same_state(const TrainerState& a, const TrainerState& b) {
  auto same_store = [](const ParameterStore& x, const ParameterStore& y) {
    if (!x.same_layout(y)) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].value != y[i].value) return false;
    return true;
  };
  return a.step == b.step && a.steps_per_epoch == b.steps_per_epoch && a.rng.state() == b.rng.state() &&
         a.model.config == b.model.config && same_store(a.model.student, b.model.student) &&
         same_store(a.model.teacher, b.model.teacher) && same_store(a.model.heads, b.model.heads) &&
         a.optimizer.steps_taken() == b.optimizer.steps_taken() &&
         a.optimizer.first_moments() == b.optimizer.first_moments() &&
         a.optimizer.second_moments() == b.optimizer.second_moments();
}

// ---------------------------------------------------------------------------
// Pretraining loop.

struct PretrainOptions {
  std::filesystem::path output_dir = ".";
  std::optional<std::filesystem::path> resume;
  long max_steps = -1;  // stop early (checkpoint written) once this many steps exist
  bool verbose = false;
};

inline long steps_per_epoch_for(std::size_t dataset_size, const TrainConfig& cfg) {
  const auto eff = static_cast<std::size_t>(cfg.effective_batch());
  return std::max(1L, static_cast<long>((dataset_size + eff - 1) / eff));
}

/// Sample order of an epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "shuffle", {static_cast<std::uint64_t>(epoch)}));
  rng.shuffle(order.begin(), order.end());
  return order;
}

/// Samples for optimizer step `step` with their augmentation applied.
inline std::vector<ModalityPair> step_batch(std::span<const ModalityPair> dataset, long step, long steps_per_epoch,
                                            const TrainConfig& cfg) {
  const int epoch = static_cast<int>(step / steps_per_epoch);
  const auto order = epoch_order(dataset.size(), cfg.seed, epoch);
  const auto eff = static_cast<std::size_t>(cfg.effective_batch());
  const std::size_t begin = static_cast<std::size_t>(step % steps_per_epoch) * eff;
  const std::size_t end = std::min(dataset.size(), begin + eff);
  std::vector<ModalityPair> batch;
  for (std::size_t i = begin; i < end; ++i) {
    const std::size_t idx = order[i];
    if (cfg.augment)
      batch.push_back(augment_pair(dataset[idx], derive_seed(cfg.seed, "augment",
                                                             {static_cast<std::uint64_t>(epoch), idx})));
    else
      batch.push_back(dataset[idx]);
  }
  return batch;
}

namespace detail {

/// Keeps the header and rows with step < `keep_below`.
inline void truncate_metrics(const std::filesystem::path& csv, long keep_below) {
  std::ifstream in(csv);
  std::string line;
  std::ostringstream kept;
  kept << kMetricsHeader << '\n';
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stol(line.substr(0, line.find(','))) < keep_below) kept << line << '\n';
  }
  in.close();
  write_text_atomic(csv, kept.str());
}

}  // namespace detail

inline std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& dir, long step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "checkpoint_step_%08ld.ckpt", step);
  return dir / buf;
}

inline std::filesystem::path last_checkpoint_path(const std::filesystem::path& dir) {
  return dir / "checkpoint_last.ckpt";
}

/// Runs (or resumes) pretraining, appending one metrics row per optimizer step
/// to `metrics.csv` and returning the state written to the last checkpoint.
inline CheckpointRecord run_pretraining(const RunConfig& cfg, std::span<const ModalityPair> dataset,
                                        const PretrainOptions& opt = {}) {
  cfg.validate();
  require(!dataset.empty(), "pretraining needs at least one pair");
  for (const auto& p : dataset) {
    p.validate();
    require(p.rgb.height() == cfg.model.image_size && p.rgb.width() == cfg.model.image_size, "pair '", p.pair_id,
            "' is ", p.rgb.height(), "x", p.rgb.width(), ", model expects ", cfg.model.image_size);
    require(p.rgb.patch_size() == cfg.model.patch_size, "pair '", p.pair_id, "' uses patch size ",
            p.rgb.patch_size(), ", model expects ", cfg.model.patch_size);
  }
  std::filesystem::create_directories(opt.output_dir);
  const auto csv = opt.output_dir / "metrics.csv";
  const nlohmann::json snapshot = config_to_json(cfg);
  const TrainConfig& tc = cfg.train;
  const long spe = steps_per_epoch_for(dataset.size(), tc);
  const long total_steps = spe * tc.total_epochs;

  CheckpointRecord rec;
  if (opt.resume) {
    rec = load_checkpoint(*opt.resume, cfg.model, tc);
    require(rec.state.steps_per_epoch == spe, "resumed checkpoint used ", rec.state.steps_per_epoch,
            " steps per epoch, this run has ", spe);
    detail::truncate_metrics(csv, rec.state.step);
  } else {
    rec.state = TrainerState::create(cfg.model, tc, spe);
    detail::write_text_atomic(csv, std::string(kMetricsHeader) + "\n");
  }
  rec.config = snapshot;
  TrainerState& state = rec.state;

  const long stop = opt.max_steps >= 0 ? std::min(total_steps, opt.max_steps) : total_steps;
  std::ofstream log(csv, std::ios::app);
  if (!log) throw RuntimeError("cannot append to '" + csv.string() + "'");
  while (state.step < stop) {
    const auto batch = step_batch(dataset, state.step, spe, tc);
    const StepResult r = train_step(state, batch, tc);
    if (r.rec_skipped > 0)
      std::cerr << "warning: step " << r.metrics.step << ": " << r.rec_skipped
                << " sample(s) had no masked patches; reconstruction term skipped\n";
    log << format_metrics_row(r.metrics) << '\n';
    log.flush();
    if (opt.verbose)
      std::cerr << "step " << r.metrics.step << " epoch " << r.metrics.epoch << " total " << r.metrics.losses.total
                << '\n';
    if (tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 && state.step < stop)
      save_checkpoint(periodic_checkpoint_path(opt.output_dir, state.step), state, snapshot);
  }
  save_checkpoint(last_checkpoint_path(opt.output_dir), state, snapshot);
  return rec;
}

}  // namespace mssdf
