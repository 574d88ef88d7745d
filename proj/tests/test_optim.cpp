#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mssdf/optim.hpp"

using namespace mssdf;

TEST(LrSchedule, WarmupThenCosineToZero) {
  const LrSchedule s{1e-3, 1e-6, 2, 10};
  const long spe = 5;
  EXPECT_DOUBLE_EQ(lr_at(0, spe, s), 1e-6);
  EXPECT_NEAR(lr_at(5, spe, s), 1e-6 + (1e-3 - 1e-6) * 0.5, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(10, spe, s), 1e-3);
  const double mid = lr_at(10 + (49 - 10) / 2, spe, s);
  EXPECT_NEAR(mid, 1e-3 * 0.5 * (1.0 + std::cos(std::numbers::pi * 19.0 / 39.0)), 1e-18);
  EXPECT_EQ(lr_at(49, spe, s), 0.0);
  EXPECT_EQ(lr_at(200, spe, s), 0.0);
}

TEST(LrSchedule, MonotoneAndContinuousAtWarmupBoundary) {
  const LrSchedule s{1.5e-4, 1e-6, 3, 20};
  const long spe = 7;
  const long warm = 3 * spe;
  for (long t = 1; t < warm; ++t) EXPECT_GT(lr_at(t, spe, s), lr_at(t - 1, spe, s));
  for (long t = warm + 1; t < 20 * spe; ++t) EXPECT_LE(lr_at(t, spe, s), lr_at(t - 1, spe, s));
  const double slope = (s.base_lr - s.warmup_lr) / static_cast<double>(warm);
  EXPECT_NEAR(lr_at(warm, spe, s) - lr_at(warm - 1, spe, s), slope, 1e-15);
}

TEST(LrSchedule, NoWarmupStartsAtBase) {
  const LrSchedule s{2e-4, 0.0, 0, 4};
  EXPECT_DOUBLE_EQ(lr_at(0, 3, s), 2e-4);
  EXPECT_THROW(lr_at(-1, 3, s), InvalidArgument);
  EXPECT_THROW(lr_at(0, 0, s), InvalidArgument);
}

TEST(AdamW, MatchesHandComputedSteps) {
  ParameterStore ps;
  ps.add("w", Matrix::Constant(1, 2, 1.0));
  ps.add("b", Matrix::Constant(1, 1, -0.5), false);
  AdamW opt(AdamWOptions{0.9, 0.95, 1e-8, 0.1});
  const double lr = 0.01;
  double w = 1.0, b = -0.5, mw = 0, vw = 0, mb = 0, vb = 0;
  const double gw[] = {0.3, -0.2, 0.5};
  const double gb[] = {-1.0, 0.4, 0.1};
  for (int t = 1; t <= 3; ++t) {
    ps[0].grad.setConstant(gw[t - 1]);
    ps[1].grad.setConstant(gb[t - 1]);
    opt.step({&ps}, lr);
    mw = 0.9 * mw + 0.1 * gw[t - 1];
    vw = 0.95 * vw + 0.05 * gw[t - 1] * gw[t - 1];
    mb = 0.9 * mb + 0.1 * gb[t - 1];
    vb = 0.95 * vb + 0.05 * gb[t - 1] * gb[t - 1];
    const double c1 = 1 - std::pow(0.9, t), c2 = 1 - std::pow(0.95, t);
    w *= 1 - lr * 0.1;
    w -= lr * (mw / c1) / (std::sqrt(vw / c2) + 1e-8);
    b -= lr * (mb / c1) / (std::sqrt(vb / c2) + 1e-8);
    EXPECT_NEAR(ps[0].value(0, 1), w, 1e-15);
    EXPECT_NEAR(ps[1].value(0, 0), b, 1e-15);
  }
  EXPECT_EQ(opt.steps_taken(), 3);
}

TEST(AdamW, DecayOnlyTouchesFlaggedParameters) {
  ParameterStore ps;
  ps.add("w", Matrix::Constant(2, 2, 2.0));
  ps.add("norm", Matrix::Constant(1, 2, 2.0), false);
  AdamW opt(AdamWOptions{0.9, 0.95, 1e-8, 0.5});
  opt.step({&ps}, 0.1);
  EXPECT_DOUBLE_EQ(ps[0].value(0, 0), 2.0 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(ps[1].value(0, 0), 2.0);
}

TEST(AdamW, RestoreReproducesContinuation) {
  ParameterStore a;
  a.add("w", Matrix::Constant(1, 3, 0.7));
  AdamW oa;
  for (int i = 0; i < 3; ++i) {
    a[0].grad.setConstant(0.1 * (i + 1));
    oa.step({&a}, 1e-2);
  }
  ParameterStore b = a;
  AdamW ob;
  ob.restore(oa.steps_taken(), oa.first_moments(), oa.second_moments());
  a[0].grad.setConstant(-0.3);
  b[0].grad.setConstant(-0.3);
  oa.step({&a}, 1e-2);
  ob.step({&b}, 1e-2);
  EXPECT_EQ(a[0].value, b[0].value);
}

TEST(AdamW, RejectsDifferentStoreSet) {
  ParameterStore a, b;
  a.add("w", Matrix::Zero(1, 1));
  b.add("w", Matrix::Zero(1, 1));
  AdamW opt;
  opt.step({&a}, 1e-3);
  EXPECT_THROW(opt.step({&a, &b}, 1e-3), InvalidArgument);
}
