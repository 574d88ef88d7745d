#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mssdf/losses.hpp"
#include "mssdf/rng.hpp"

using namespace mssdf;
using testing_support::check_gradients;
using testing_support::random_matrix;

namespace {

// Kernel-form HSIC: trace(K H L H) / (n-1)^2 with linear kernels.
double hsic_trace_oracle(const Matrix& x, const Matrix& y) {
  const auto n = x.rows();
  const Matrix h = Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
  const Matrix k = x * x.transpose();
  const Matrix l = y * y.transpose();
  return (k * h * l * h).trace() / static_cast<double>((n - 1) * (n - 1));
}

double cosine(const RowVector& a, const RowVector& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Direct softmax over cosine similarities, one query at a time.
double infonce_oracle(const Matrix& q, const Matrix& p, const std::vector<Matrix>& negs, double tau, bool strict) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double pos = std::exp(cosine(q.row(i), p.row(i)) / tau);
    double denom = strict ? 0.0 : pos;
    for (Eigen::Index k = 0; k < negs[static_cast<std::size_t>(i)].rows(); ++k)
      denom += std::exp(cosine(q.row(i), negs[static_cast<std::size_t>(i)].row(k)) / tau);
    total += -std::log(pos / denom);
  }
  return total / static_cast<double>(q.rows());
}

}  // namespace

TEST(ReconstructionLoss, MeanSquaredRowDistance) {
  Matrix a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 1, 0, 0, 4;
  EXPECT_DOUBLE_EQ(reconstruction_loss(a, b), (4.0 + 9.0) / 2.0);
  EXPECT_EQ(reconstruction_loss(Matrix::Zero(0, 3), Matrix::Zero(0, 3)), 0.0);
  EXPECT_THROW(reconstruction_loss(a, Matrix::Zero(3, 2)), InvalidArgument);
}

TEST(AlignmentLoss, MatchesDirectSoftmax) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(5));
    const int d = 2 + static_cast<int>(rng.below(6));
    const Matrix q = random_matrix(rng, n, d), p = random_matrix(rng, n, d);
    std::vector<Matrix> negs;
    for (int i = 0; i < n; ++i) negs.push_back(random_matrix(rng, 1 + static_cast<int>(rng.below(4)), d));
    for (bool strict : {false, true}) {
      const double tau = 0.07 + 0.5 * rng.uniform();
      EXPECT_NEAR(alignment_loss(q, p, negs, {tau, strict}), infonce_oracle(q, p, negs, tau, strict), 1e-10);
    }
  }
}

TEST(AlignmentLoss, NonNegativeAndNearZeroWhenPositiveDominates) {
  Rng rng(11);
  const Matrix q = random_matrix(rng, 4, 8);
  std::vector<Matrix> negs(4, -q.row(0));
  for (int i = 0; i < 4; ++i) negs[static_cast<std::size_t>(i)] = -q.row(i);
  const double l = alignment_loss(q, q, negs, {0.05, false});
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-10);
}

TEST(AlignmentLoss, InvariantToCommonPermutation) {
  Rng rng(12);
  const Matrix q = random_matrix(rng, 5, 4), p = random_matrix(rng, 5, 4);
  std::vector<Matrix> negs;
  for (int i = 0; i < 5; ++i) negs.push_back(random_matrix(rng, 3, 4));
  const int perm[] = {3, 0, 4, 1, 2};
  Matrix qp(5, 4), pp(5, 4);
  std::vector<Matrix> np;
  for (int i = 0; i < 5; ++i) {
    qp.row(i) = q.row(perm[i]);
    pp.row(i) = p.row(perm[i]);
    np.push_back(negs[static_cast<std::size_t>(perm[i])]);
  }
  EXPECT_NEAR(alignment_loss(q, p, negs), alignment_loss(qp, pp, np), 1e-12);
}

TEST(AlignmentLoss, RejectsBadInput) {
  const Matrix q = Matrix::Ones(2, 3);
  EXPECT_THROW(alignment_loss(q, q, {Matrix::Ones(1, 3)}), InvalidArgument);
  EXPECT_THROW(alignment_loss(q, q, {Matrix::Ones(1, 3), Matrix::Ones(1, 3)}, {0.0, false}), InvalidArgument);
  EXPECT_THROW(alignment_loss(q, q, {Matrix::Zero(1, 3), Matrix::Ones(1, 3)}), InvalidArgument);
}

TEST(CenterFeatures, Basics) {
  Matrix x(2, 1);
  x << 0, 2;
  const Matrix c = center_features(x);
  EXPECT_EQ(c(0, 0), -1.0);
  EXPECT_EQ(c(1, 0), 1.0);
  Rng rng(13);
  const Matrix r = center_features(random_matrix(rng, 7, 3, 5.0));
  EXPECT_LT(r.colwise().sum().cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(center_features(r).isApprox(r, 1e-14));
  EXPECT_THROW(center_features(Matrix::Ones(1, 3)), InvalidArgument);
}

TEST(HsicLoss, HandExample) {
  Matrix x(2, 1), y(2, 1);
  x << 0, 2;
  y << 0, 4;
  EXPECT_DOUBLE_EQ(hsic_loss(x, y), 16.0);
  EXPECT_EQ(hsic_loss(x, Matrix::Constant(2, 1, 3.0)), 0.0);
  EXPECT_THROW(hsic_loss(x, Matrix::Ones(3, 1)), InvalidArgument);
}

TEST(HsicLoss, EqualsKernelTraceFormAndInvariances) {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(15));
    const int d = 1 + static_cast<int>(rng.below(8));
    const Matrix x = random_matrix(rng, n, d), y = random_matrix(rng, n, d);
    const double v = hsic_loss(x, y);
    const double oracle = hsic_trace_oracle(x, y);
    EXPECT_LE(std::abs(v - oracle), 1e-8 * std::max(1.0, std::abs(oracle)));
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(hsic_loss(y, x), v, 1e-10 * std::max(1.0, v));
    const RowVector shift = random_matrix(rng, 1, d, 10.0);
    EXPECT_NEAR(hsic_loss(x.rowwise() + shift, y), v, 1e-10 * std::max(1.0, v) * 100);
    EXPECT_NEAR(hsic_loss(2.5 * x, y), 6.25 * v, 1e-9 * std::max(1.0, v));
  }
}

TEST(ModalityBce, KnownValues) {
  const double zeros[] = {0.0, 0.0, 0.0};
  const int labels[] = {0, 1, 1};
  EXPECT_NEAR(modality_bce_loss(zeros, labels), std::log(2.0), 1e-15);
  const double z[] = {std::log(3.0)};
  const int one[] = {1};
  EXPECT_NEAR(modality_bce_loss(z, one), -std::log(0.75), 1e-12);
  const double extreme[] = {800.0, -800.0};
  const int ext_labels[] = {1, 0};
  EXPECT_EQ(modality_bce_loss(extreme, ext_labels), 0.0);
  const double wrong[] = {-800.0};
  EXPECT_TRUE(std::isfinite(modality_bce_loss(wrong, one)));
  EXPECT_THROW(modality_bce_loss(std::span<const double>{}, std::span<const int>{}), InvalidArgument);
  const int bad[] = {2};
  EXPECT_THROW(modality_bce_loss(z, bad), InvalidArgument);
}

TEST(TotalLoss, WeightsAndErrors) {
  const LossWeights w{1.0, 0.5, 0.2, 0.1};
  EXPECT_NEAR(total_loss({1, 1, 1, 1, 0}, w), 1.8, 1e-15);
  EXPECT_EQ(total_loss({}, w), 0.0);
  EXPECT_EQ(total_loss({3.5, 2, 7, 9, 0}, {1, 0, 0, 0}), 3.5);
  try {
    total_loss({1, std::nan(""), 1, 1, 0}, w);
    FAIL() << "expected a throw";
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("align"), std::string::npos);
  }
}

TEST(LossGradients, EachLossMatchesFiniteDifferences) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(7));
    const int d = 1 + static_cast<int>(rng.below(16));
    ParameterStore ps;
    ps.add("x", random_matrix(rng, n, d));
    ps.add("y", random_matrix(rng, n, d));
    ps.add("z", random_matrix(rng, n, 1, 2.0));
    const Matrix target = random_matrix(rng, n, d);

    AlignmentIndex idx;
    for (int i = 0; i < n; ++i) {
      idx.queries.push_back(i);
      idx.positives.push_back(n + i);
      std::vector<int> negs;
      for (int k = 0; k < 3; ++k) {
        int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * n)));
        if (j == i || j == n + i) j = (j + 1) % (2 * n);
        if (j == i || j == n + i) j = (j + 1) % (2 * n);
        negs.push_back(j);
      }
      idx.negatives.push_back(negs);
    }
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(2)));
    const double tau = 0.1 + rng.uniform();

    auto rec = [&](Graph& g, ParameterStore& ps) { return reconstruction_loss_node(g, g.param(ps, 0), target); };
    auto align = [&](Graph& g, ParameterStore& ps) {
      const Var parts[] = {g.param(ps, 0), g.param(ps, 1)};
      return alignment_loss_node(g, g.concat_rows(parts), idx, {tau, false});
    };
    auto hsic = [&](Graph& g, ParameterStore& ps) { return hsic_loss_node(g, g.param(ps, 0), g.param(ps, 1)); };
    auto cls = [&](Graph& g, ParameterStore& ps) { return modality_bce_loss_node(g, g.param(ps, 2), labels); };
    auto total = [&](Graph& g, ParameterStore& ps) {
      const Var terms[] = {rec(g, ps), align(g, ps), hsic(g, ps), cls(g, ps)};
      const double w[] = {1.0, 0.5, 0.2, 0.1};
      return g.weighted_sum(terms, w);
    };
    const std::pair<const char*, std::function<Var(Graph&, ParameterStore&)>> cases[] = {
        {"rec", rec}, {"align", align}, {"hsic", hsic}, {"cls", cls}, {"total", total}};
    for (const auto& [name, fn] : cases) {
      const auto r = check_gradients(ps, fn);
      EXPECT_LT(r.max_rel_error, 1e-4) << name << " trial " << trial;
    }
  }
}

TEST(SoftmaxCrossEntropy, ValueAndGradient) {
  Matrix z(2, 3);
  z << 0, 0, 0, 1, 2, 3;
  const int labels[] = {1, 2};
  const auto lg = softmax_cross_entropy_grad(z, labels);
  const double row2 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  EXPECT_NEAR(lg.value, (std::log(3.0) + row2) / 2.0, 1e-14);
  Rng rng(16);
  ParameterStore ps;
  ps.add("z", random_matrix(rng, 4, 3));
  const int lab4[] = {0, 2, 1, 1};
  const auto r = check_gradients(ps, [&](Graph& g, ParameterStore& ps) {
    return softmax_cross_entropy_node(g, g.param(ps, 0), lab4);
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}
