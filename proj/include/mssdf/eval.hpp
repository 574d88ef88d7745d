#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mssdf/autodiff.hpp"
#include "mssdf/data.hpp"
#include "mssdf/error.hpp"
#include "mssdf/io/png.hpp"
#include "mssdf/losses.hpp"
#include "mssdf/model.hpp"
#include "mssdf/optim.hpp"
#include "mssdf/rng.hpp"

namespace mssdf {

/// Mean-pooled frozen-encoder features, one row per sample.
struct FeatureTable {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::string> sample_ids;
  std::string encoder_tag;

  void validate() const {
    require(static_cast<std::size_t>(features.rows()) == labels.size(), "feature rows (", features.rows(),
            ") differ from label count (", labels.size(), ")");
    require(sample_ids.size() == labels.size(), "sample id count differs from label count");
    require(features.allFinite(), "feature table contains non-finite values");
  }
};

struct EvalConfig {
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  double probe_l2 = 1e-4;
  double probe_tolerance = 1e-6;
  int probe_max_iter = 20000;
  int finetune_epochs = 5;
  double finetune_lr = 5e-4;
  int finetune_warmup_epochs = 1;
  int finetune_batch_size = 16;
  std::uint64_t finetune_seed = 0;
};

/// Runs the student encoder on every (unmasked) RGB image and mean-pools the
/// final-norm tokens. Parameters are read only.
inline FeatureTable extract_features(const Encoder& encoder, const ParameterStore& params,
                                     std::span<const ModalityPair> dataset, std::string tag,
                                     int patch_size) {
  FeatureTable t;
  t.encoder_tag = std::move(tag);
  t.features.resize(static_cast<Eigen::Index>(dataset.size()), encoder.dim);
  auto& ps = const_cast<ParameterStore&>(params);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& pair = dataset[i];
    require(pair.label.has_value(), "extract_features: pair '", pair.pair_id, "' has no label");
    Graph g(false);
    StochasticContext ctx;
    const Matrix patches = patchify(pair.rgb, patch_size);
    MaskMap none(pair.rgb.height() / patch_size, pair.rgb.width() / patch_size);
    auto tokens = encoder.forward(g, ps, patches, none, Modality::Rgb, EncoderRole::Student, ctx);
    t.features.row(static_cast<Eigen::Index>(i)) = g.value(tokens.tokens).colwise().mean();
    t.labels.push_back(*pair.label);
    t.sample_ids.push_back(pair.pair_id);
  }
  return t;
}

inline FeatureTable extract_features(const MssdfModel& model, std::span<const ModalityPair> dataset,
                                     std::string tag) {
  return extract_features(model.encoder, model.student, dataset, std::move(tag), model.config.patch_size);
}

// ---------------------------------------------------------------------------

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

/// Per-class split driven by a hash of (seed, sample id), so it does not
/// depend on row order. Both index lists come back ordered by that hash.
inline Split stratified_split(std::span<const int> labels, std::span<const std::string> ids, std::uint64_t seed,
                              double test_fraction) {
  require(labels.size() == ids.size(), "stratified_split: labels/ids size mismatch");
  require(test_fraction > 0.0 && test_fraction < 1.0, "test_fraction must lie in (0,1)");
  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<int>(i));
  auto key = [&](int row) { return std::make_pair(derive_seed(seed, ids[static_cast<std::size_t>(row)]), ids[static_cast<std::size_t>(row)]); };
  Split s;
  for (auto& [cls, rows] : by_class) {
    std::sort(rows.begin(), rows.end(), [&](int a, int b) { return key(a) < key(b); });
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(rows.size())));
    s.test.insert(s.test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.insert(s.train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  }
  auto by_key = [&](int a, int b) { return key(a) < key(b); };
  std::sort(s.train.begin(), s.train.end(), by_key);
  std::sort(s.test.begin(), s.test.end(), by_key);
  return s;
}

struct ProbeResult {
  double accuracy = 0.0;
  Matrix confusion;  // rows: true class, cols: predicted
  int iterations = 0;
  bool converged = false;
};

/// Validates class balance requirements and returns the class count.
inline int probe_class_count(std::span<const int> labels) {
  require(!labels.empty(), "probe: empty feature table");
  const int max_label = *std::max_element(labels.begin(), labels.end());
  require(*std::min_element(labels.begin(), labels.end()) >= 0, "probe: negative label");
  std::vector<int> counts(static_cast<std::size_t>(max_label) + 1, 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  int classes = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    ++classes;
    require(counts[c] >= 10, "probe: class ", c, " has only ", counts[c], " samples (need >= 10)");
  }
  require(classes >= 2, "probe: need at least 2 classes, got ", classes);
  return max_label + 1;
}

/// Multinomial logistic regression fit by accelerated full-batch gradient
/// descent on standardized features, with a small L2 penalty on the weights.
class LogisticRegression {
 public:
  LogisticRegression(int classes, double l2) : classes_(classes), l2_(l2) {}

  /// Returns the iteration count; `converged` reports whether the gradient
  /// max-norm dropped below tol.
  int fit(const Matrix& x_raw, std::span<const int> y, double tol, int max_iter, bool& converged) {
    const auto n = x_raw.rows();
    const auto d = x_raw.cols();
    mean_ = x_raw.colwise().mean();
    scale_ = ((x_raw.rowwise() - mean_).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
    for (Eigen::Index j = 0; j < d; ++j)
      if (scale_(j) < 1e-12) scale_(j) = 1.0;
    Matrix x(n, d + 1);
    x.leftCols(d) = standardize(x_raw);
    x.col(d).setOnes();

    Matrix onehot = Matrix::Zero(n, classes_);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;

    const Matrix gram = x.transpose() * x / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    const double lipschitz = 0.5 * eig.eigenvalues().maxCoeff() + l2_;
    const double step = 1.0 / lipschitz;

    Matrix w = Matrix::Zero(d + 1, classes_);
    Matrix w_prev = w;
    double t = 1.0;
    converged = false;
    int it = 0;
    for (; it < max_iter; ++it) {
      const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
      const Matrix look = w + ((t - 1.0) / t_next) * (w - w_prev);
      const Matrix g = gradient(x, onehot, look);
      w_prev = w;
      w = look - step * g;
      t = t_next;
      if (gradient(x, onehot, w).cwiseAbs().maxCoeff() < tol) {
        converged = true;
        ++it;
        break;
      }
    }
    weights_ = w;
    return it;
  }

  [[nodiscard]] Matrix logits(const Matrix& x_raw) const {
    const auto d = x_raw.cols();
    return standardize(x_raw) * weights_.topRows(d) + Matrix::Ones(x_raw.rows(), 1) * weights_.bottomRows(1);
  }

  [[nodiscard]] std::vector<int> predict(const Matrix& x_raw) const {
    const Matrix z = logits(x_raw);
    std::vector<int> out(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      Eigen::Index arg = 0;
      z.row(i).maxCoeff(&arg);
      out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
    return out;
  }

 private:
  [[nodiscard]] Matrix standardize(const Matrix& x) const {
    return (x.rowwise() - mean_).array().rowwise() / scale_.array();
  }

  [[nodiscard]] Matrix gradient(const Matrix& x, const Matrix& onehot, const Matrix& w) const {
    Matrix z = x * w;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double m = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - m).exp();
      z.row(i) /= z.row(i).sum();
    }
    Matrix g = x.transpose() * (z - onehot) / static_cast<double>(x.rows());
    g.topRows(g.rows() - 1) += l2_ * w.topRows(w.rows() - 1);
    return g;
  }

  int classes_;
  double l2_;
  RowVector mean_;
  RowVector scale_;
  Matrix weights_;
};

inline Matrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted, int classes) {
  Matrix cm = Matrix::Zero(classes, classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm(truth[i], predicted[i]) += 1.0;
  return cm;
}

inline double accuracy_of(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// Trains a linear classifier on frozen features and reports held-out top-1.
inline ProbeResult linear_probe(const FeatureTable& table, std::uint64_t split_seed, const EvalConfig& cfg = {}) {
  table.validate();
  const int classes = probe_class_count(table.labels);
  const Split split = stratified_split(table.labels, table.sample_ids, split_seed, cfg.test_fraction);

  const Matrix x_train = gather(table.features, split.train);
  const Matrix x_test = gather(table.features, split.test);
  std::vector<int> y_train, y_test;
  for (int r : split.train) y_train.push_back(table.labels[static_cast<std::size_t>(r)]);
  for (int r : split.test) y_test.push_back(table.labels[static_cast<std::size_t>(r)]);

  LogisticRegression lr(classes, cfg.probe_l2);
  ProbeResult res;
  res.iterations = lr.fit(x_train, y_train, cfg.probe_tolerance, cfg.probe_max_iter, res.converged);
  const auto pred = lr.predict(x_test);
  res.accuracy = accuracy_of(y_test, pred);
  res.confusion = confusion_matrix(y_test, pred, classes);
  return res;
}

// ---------------------------------------------------------------------------

struct FinetuneResult {
  double accuracy = 0.0;
  Matrix confusion;
  std::vector<double> epoch_losses;
};

/// Unfreezes a copy of the encoder, attaches a linear head on mean-pooled
/// tokens and trains both with cross-entropy under the warmup-cosine schedule.
inline FinetuneResult finetune_small(const MssdfModel& pretrained, std::span<const ModalityPair> dataset,
                                     int epochs, const EvalConfig& cfg = {}) {
  require(epochs >= 0, "finetune epochs must be nonnegative");
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (const auto& p : dataset) {
    require(p.label.has_value(), "finetune: pair '", p.pair_id, "' has no label");
    labels.push_back(*p.label);
    ids.push_back(p.pair_id);
  }
  const int classes = probe_class_count(labels);
  const Split split = stratified_split(labels, ids, cfg.split_seed, cfg.test_fraction);

  const ModelConfig& mc = pretrained.config;
  ParameterStore encoder_params = pretrained.student;
  ParameterStore head;
  Rng init_rng(derive_seed(cfg.finetune_seed, "finetune-head"));
  const LinearLayer classifier = LinearLayer::create(head, "head", mc.encoder_dim, classes, init_rng, mc.init_std);

  std::vector<Matrix> patches(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) patches[i] = patchify(dataset[i].rgb, mc.patch_size);
  const MaskMap none(mc.grid_side(), mc.grid_side());

  auto pooled = [&](Graph& g, int row, StochasticContext& ctx) {
    auto t = pretrained.encoder.forward(g, encoder_params, patches[static_cast<std::size_t>(row)], none,
                                        Modality::Rgb, EncoderRole::Student, ctx);
    return g.mean_rows(t.tokens);
  };

  // The head sees pooled features standardized with statistics of the
  // training split under the initial encoder; they stay fixed afterwards.
  RowVector feat_mean = RowVector::Zero(mc.encoder_dim);
  RowVector feat_inv_std = RowVector::Ones(mc.encoder_dim);
  if (!split.train.empty()) {
    Matrix init_feats(static_cast<Eigen::Index>(split.train.size()), mc.encoder_dim);
    for (std::size_t i = 0; i < split.train.size(); ++i) {
      Graph g(false);
      StochasticContext ctx;
      init_feats.row(static_cast<Eigen::Index>(i)) = g.value(pooled(g, split.train[i], ctx));
    }
    feat_mean = init_feats.colwise().mean();
    const RowVector sd =
        ((init_feats.rowwise() - feat_mean).array().square().colwise().mean()).sqrt().matrix();
    for (Eigen::Index j = 0; j < sd.size(); ++j) feat_inv_std(j) = sd(j) > 1e-12 ? 1.0 / sd(j) : 1.0;
  }
  auto standardized = [&](Graph& g, Var f) {
    const auto rows = g.value(f).rows();
    return g.mul_const(g.add_row(f, g.constant(-feat_mean)), feat_inv_std.replicate(rows, 1));
  };

  FinetuneResult res;
  const int batch = std::max(1, cfg.finetune_batch_size);
  const long steps_per_epoch = std::max<long>(1, static_cast<long>((split.train.size() + batch - 1) / batch));
  const LrSchedule schedule{cfg.finetune_lr, cfg.finetune_lr * 1e-2, std::min(cfg.finetune_warmup_epochs, std::max(0, epochs - 1)),
                            epochs};
  AdamW opt(AdamWOptions{0.9, 0.999, 1e-8, 0.05});
  long step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order = split.train;
    Rng shuffle_rng(derive_seed(cfg.finetune_seed, "finetune-shuffle", {static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
      Graph g(true);
      Rng noise(derive_seed(cfg.finetune_seed, "finetune-noise", {static_cast<std::uint64_t>(step)}));
      StochasticContext ctx{true, mc.dropout, mc.drop_path, &noise};
      std::vector<Var> feats;
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        feats.push_back(pooled(g, order[i], ctx));
        y.push_back(labels[static_cast<std::size_t>(order[i])]);
      }
      Var logits = classifier.forward(g, head, standardized(g, g.concat_rows(feats)));
      Var loss = softmax_cross_entropy_node(g, logits, y);
      loss_sum += g.scalar(loss) * static_cast<double>(end - start);
      g.backward(loss);
      opt.step({&encoder_params, &head}, lr_at(step, steps_per_epoch, schedule));
      encoder_params.zero_grad();
      head.zero_grad();
      ++step;
    }
    res.epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
  }

  std::vector<int> truth, pred;
  for (int row : split.test) {
    Graph g(false);
    StochasticContext ctx;
    Var logits = classifier.forward(g, head, standardized(g, pooled(g, row, ctx)));
    Eigen::Index arg = 0;
    g.value(logits).row(0).maxCoeff(&arg);
    truth.push_back(labels[static_cast<std::size_t>(row)]);
    pred.push_back(static_cast<int>(arg));
  }
  res.accuracy = accuracy_of(truth, pred);
  res.confusion = confusion_matrix(truth, pred, classes);
  return res;
}

// ---------------------------------------------------------------------------
// Outputs.

inline void append_result_csv(const std::filesystem::path& path, const std::string& tag, const std::string& protocol,
                              double accuracy, std::uint64_t seed) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw RuntimeError("cannot write results CSV '" + path.string() + "'");
  if (fresh) out << "checkpoint_tag,protocol,accuracy,seed\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", accuracy);
  out << tag << ',' << protocol << ',' << buf << ',' << seed << '\n';
}

/// Row-normalized confusion heatmap, `cell` pixels per entry.
inline void write_confusion_png(const std::filesystem::path& path, const Matrix& confusion, int cell = 32) {
  const auto k = static_cast<int>(confusion.rows());
  io::Image8 img{k * cell, k * cell, 3, {}};
  img.data.assign(static_cast<std::size_t>(img.width) * img.height * 3, 255);
  for (int r = 0; r < k; ++r) {
    const double total = confusion.row(r).sum();
    for (int c = 0; c < k; ++c) {
      const double frac = total > 0 ? confusion(r, c) / total : 0.0;
      const auto shade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - frac)));
      for (int y = r * cell; y < (r + 1) * cell; ++y) {
        for (int x = c * cell; x < (c + 1) * cell; ++x) {
          const bool border = y == r * cell || x == c * cell;
          auto* px = &img.data[(static_cast<std::size_t>(y) * img.width + x) * 3];
          px[0] = border ? 128 : shade;
          px[1] = border ? 128 : shade;
          px[2] = border ? 128 : 255;
        }
      }
    }
  }
  io::write_png(path.string(), img);
}

}  // namespace mssdf
