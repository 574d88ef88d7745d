#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mssdf/autodiff.hpp"
#include "mssdf/error.hpp"

namespace mssdf {

struct LossWeights {
  double rec = 1.0;
  double align = 0.5;
  double hsic = 0.2;
  double cls = 0.1;

  void validate() const {
    require(rec >= 0 && align >= 0 && hsic >= 0 && cls >= 0, "loss weights must be nonnegative");
  }
};

struct LossReport {
  double rec = 0.0;
  double align = 0.0;
  double hsic = 0.0;
  double cls = 0.0;
  double total = 0.0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

/// A loss value together with its gradient(s) with respect to the inputs.
struct LossAndGrad {
  double value = 0.0;
  Matrix grad;  // d loss / d first input
};

struct PairLossAndGrad {
  double value = 0.0;
  Matrix grad_x;
  Matrix grad_y;
};

// ---------------------------------------------------------------------------
// Feature reconstruction: mean over rows of the squared L2 distance.

inline LossAndGrad reconstruction_loss_grad(const Matrix& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "reconstruction_loss: shape mismatch ",
          pred.rows(), "x", pred.cols(), " vs ", target.rows(), "x", target.cols());
  if (pred.rows() == 0) return {0.0, Matrix::Zero(0, pred.cols())};
  const double m = static_cast<double>(pred.rows());
  const Matrix diff = pred - target;
  return {diff.squaredNorm() / m, diff * (2.0 / m)};
}

inline double reconstruction_loss(const Matrix& pred, const Matrix& target) {
  return reconstruction_loss_grad(pred, target).value;
}

// ---------------------------------------------------------------------------
// Contrastive alignment over a pool of embeddings.

/// Indices into an embedding pool: one query, one positive and K negatives per row.
struct AlignmentIndex {
  std::vector<int> queries;
  std::vector<int> positives;
  std::vector<std::vector<int>> negatives;
};

struct AlignmentOptions {
  double tau = 0.07;
  /// Reproduces the printed denominator that sums negatives only (may go negative).
  bool negatives_only_denominator = false;
};

/// InfoNCE over L2-normalized embeddings; gradient is with respect to the pool.
inline LossAndGrad alignment_loss_grad(const Matrix& pool, const AlignmentIndex& idx, AlignmentOptions opt = {}) {
  require(opt.tau > 0.0, "alignment_loss: temperature must be positive, got ", opt.tau);
  const std::size_t n = idx.queries.size();
  require(idx.positives.size() == n && idx.negatives.size() == n, "alignment_loss: index arity mismatch");
  Matrix grad_pool = Matrix::Zero(pool.rows(), pool.cols());
  if (n == 0) return {0.0, grad_pool};

  Eigen::VectorXd norms(pool.rows());
  Matrix unit(pool.rows(), pool.cols());
  for (Eigen::Index r = 0; r < pool.rows(); ++r) {
    norms(r) = pool.row(r).norm();
    unit.row(r) = norms(r) > 0.0 ? RowVector(pool.row(r) / norms(r)) : RowVector::Zero(pool.cols());
  }
  auto check_row = [&](int r) {
    require(r >= 0 && r < pool.rows(), "alignment_loss: index ", r, " out of range");
    require(norms(r) > 0.0, "alignment_loss: zero-norm embedding at row ", r);
  };

  // Gradient with respect to the unit vectors, projected through the normalization afterwards.
  Matrix grad_unit = Matrix::Zero(pool.rows(), pool.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int q = idx.queries[i];
    const int p = idx.positives[i];
    const auto& negs = idx.negatives[i];
    check_row(q);
    check_row(p);
    require(!negs.empty(), "alignment_loss: each query needs at least one negative");

    // Candidate logits: slot 0 is the positive, then negatives.
    std::vector<int> rows;
    rows.reserve(negs.size() + 1);
    if (!opt.negatives_only_denominator) rows.push_back(p);
    for (int j : negs) {
      check_row(j);
      rows.push_back(j);
    }
    std::vector<double> logits(rows.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      logits[k] = unit.row(q).dot(unit.row(rows[k])) / opt.tau;
      mx = std::max(mx, logits[k]);
    }
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    const double lse = mx + std::log(sum);
    const double pos_logit = unit.row(q).dot(unit.row(p)) / opt.tau;
    total += lse - pos_logit;

    // d/d logits: softmax over candidates, minus one on the positive.
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const double w = std::exp(logits[k] - lse) * inv_n / opt.tau;
      grad_unit.row(q) += w * unit.row(rows[k]);
      grad_unit.row(rows[k]) += w * unit.row(q);
    }
    grad_unit.row(q) -= (inv_n / opt.tau) * unit.row(p);
    grad_unit.row(p) -= (inv_n / opt.tau) * unit.row(q);
  }

  for (Eigen::Index r = 0; r < pool.rows(); ++r) {
    if (norms(r) == 0.0) continue;
    const double proj = grad_unit.row(r).dot(unit.row(r));
    grad_pool.row(r) = (grad_unit.row(r) - proj * unit.row(r)) / norms(r);
  }
  return {total / static_cast<double>(n), grad_pool};
}

/// Convenience form: row i of queries/positives pairs with negatives[i] (K x D).
inline double alignment_loss(const Matrix& queries, const Matrix& positives, const std::vector<Matrix>& negatives,
                             AlignmentOptions opt = {}) {
  require(queries.rows() == positives.rows() && queries.cols() == positives.cols(),
          "alignment_loss: queries/positives shape mismatch");
  require(static_cast<Eigen::Index>(negatives.size()) == queries.rows(), "alignment_loss: one negative set per query");
  Eigen::Index total = 2 * queries.rows();
  for (const auto& neg : negatives) {
    require(neg.cols() == queries.cols(), "alignment_loss: negative dim mismatch");
    total += neg.rows();
  }
  Matrix pool(total, queries.cols());
  AlignmentIndex idx;
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    pool.row(row) = queries.row(i);
    idx.queries.push_back(static_cast<int>(row++));
    pool.row(row) = positives.row(i);
    idx.positives.push_back(static_cast<int>(row++));
    std::vector<int> negs;
    for (Eigen::Index k = 0; k < negatives[static_cast<std::size_t>(i)].rows(); ++k) {
      pool.row(row) = negatives[static_cast<std::size_t>(i)].row(k);
      negs.push_back(static_cast<int>(row++));
    }
    idx.negatives.push_back(std::move(negs));
  }
  return alignment_loss_grad(pool, idx, opt).value;
}

// ---------------------------------------------------------------------------
// Linear HSIC.

inline Matrix center_features(const Matrix& x) {
  require(x.rows() >= 2, "center_features needs at least 2 rows, got ", x.rows());
  const RowVector mean = x.colwise().mean();
  return x.rowwise() - mean;
}

/// ||Xc^T Yc||_F^2 / (n-1)^2 with gradients for both inputs.
inline PairLossAndGrad hsic_loss_grad(const Matrix& x, const Matrix& y) {
  require(x.rows() == y.rows(), "hsic_loss: row count mismatch ", x.rows(), " vs ", y.rows());
  const Matrix xc = center_features(x);
  const Matrix yc = center_features(y);
  const double denom = static_cast<double>(x.rows() - 1) * static_cast<double>(x.rows() - 1);
  const Matrix cross = xc.transpose() * yc;
  const double value = cross.squaredNorm() / denom;
  // Centering is an orthogonal projection, so the gradient w.r.t. X is the
  // centered gradient w.r.t. Xc.
  Matrix gx = (yc * cross.transpose()) * (2.0 / denom);
  Matrix gy = (xc * cross) * (2.0 / denom);
  gx = gx.rowwise() - RowVector(gx.colwise().mean());
  gy = gy.rowwise() - RowVector(gy.colwise().mean());
  return {value, std::move(gx), std::move(gy)};
}

inline double hsic_loss(const Matrix& x, const Matrix& y) { return hsic_loss_grad(x, y).value; }

// ---------------------------------------------------------------------------
// Modality classification (binary cross-entropy on logits).

inline double stable_softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Labels: 0 for RGB, 1 for the other modality.
inline LossAndGrad modality_bce_loss_grad(std::span<const double> logits, std::span<const int> labels) {
  require(!logits.empty(), "modality_bce_loss: empty input");
  require(logits.size() == labels.size(), "modality_bce_loss: ", logits.size(), " logits vs ", labels.size(),
          " labels");
  const double n = static_cast<double>(logits.size());
  double total = 0.0;
  Matrix grad(static_cast<Eigen::Index>(logits.size()), 1);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "modality_bce_loss: labels must be 0 or 1");
    const double z = logits[i];
    // -[m log s(z) + (1-m) log(1-s(z))] = softplus(z) - m z
    total += stable_softplus(z) - labels[i] * z;
    grad(static_cast<Eigen::Index>(i), 0) = (sigmoid(z) - labels[i]) / n;
  }
  return {total / n, grad};
}

inline double modality_bce_loss(std::span<const double> logits, std::span<const int> labels) {
  return modality_bce_loss_grad(logits, labels).value;
}

// ---------------------------------------------------------------------------

/// Weighted objective; throws naming the first non-finite component.
inline double total_loss(const LossReport& parts, const LossWeights& w) {
  w.validate();
  const std::pair<const char*, double> terms[] = {
      {"rec", parts.rec}, {"align", parts.align}, {"hsic", parts.hsic}, {"cls", parts.cls}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw RuntimeError(std::string("non-finite loss term '") + name + "'");
  return w.rec * parts.rec + w.align * parts.align + w.hsic * parts.hsic + w.cls * parts.cls;
}

inline LossReport with_total(LossReport parts, const LossWeights& w) {
  parts.total = total_loss(parts, w);
  return parts;
}

// ---------------------------------------------------------------------------
// Graph nodes backed by the analytic kernels above.

inline Var reconstruction_loss_node(Graph& g, Var pred, const Matrix& target) {
  auto lg = reconstruction_loss_grad(g.value(pred), target);
  return g.custom({pred}, Matrix::Constant(1, 1, lg.value),
                  [grad = std::move(lg.grad)](const Matrix& og) { return std::vector<Matrix>{grad * og(0, 0)}; });
}

inline Var alignment_loss_node(Graph& g, Var pool, const AlignmentIndex& idx, AlignmentOptions opt) {
  auto lg = alignment_loss_grad(g.value(pool), idx, opt);
  return g.custom({pool}, Matrix::Constant(1, 1, lg.value),
                  [grad = std::move(lg.grad)](const Matrix& og) { return std::vector<Matrix>{grad * og(0, 0)}; });
}

inline Var hsic_loss_node(Graph& g, Var x, Var y) {
  auto lg = hsic_loss_grad(g.value(x), g.value(y));
  return g.custom({x, y}, Matrix::Constant(1, 1, lg.value),
                  [gx = std::move(lg.grad_x), gy = std::move(lg.grad_y)](const Matrix& og) {
                    return std::vector<Matrix>{gx * og(0, 0), gy * og(0, 0)};
                  });
}

/// logits: N x 1 node.
inline Var modality_bce_loss_node(Graph& g, Var logits, std::span<const int> labels) {
  const Matrix& z = g.value(logits);
  require(z.cols() == 1, "modality logits must be a column");
  auto lg = modality_bce_loss_grad(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())), labels);
  return g.custom({logits}, Matrix::Constant(1, 1, lg.value),
                  [grad = std::move(lg.grad)](const Matrix& og) { return std::vector<Matrix>{grad * og(0, 0)}; });
}

/// Multinomial cross-entropy of logits (N x C) against integer labels, mean over rows.
inline LossAndGrad softmax_cross_entropy_grad(const Matrix& logits, std::span<const int> labels) {
  require(logits.rows() == static_cast<Eigen::Index>(labels.size()), "cross entropy: label count mismatch");
  require(logits.rows() > 0, "cross entropy: empty batch");
  const double n = static_cast<double>(logits.rows());
  Matrix grad(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < logits.cols(), "cross entropy: label ", y, " out of range");
    const double mx = logits.row(r).maxCoeff();
    const RowVector e = (logits.row(r).array() - mx).exp();
    const double s = e.sum();
    total += (mx + std::log(s)) - logits(r, y);
    grad.row(r) = e / s / n;
    grad(r, y) -= 1.0 / n;
  }
  return {total / n, grad};
}

inline Var softmax_cross_entropy_node(Graph& g, Var logits, std::span<const int> labels) {
  auto lg = softmax_cross_entropy_grad(g.value(logits), labels);
  return g.custom({logits}, Matrix::Constant(1, 1, lg.value),
                  [grad = std::move(lg.grad)](const Matrix& og) { return std::vector<Matrix>{grad * og(0, 0)}; });
}

}  // namespace mssdf
