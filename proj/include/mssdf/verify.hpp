#pragma once

// Self-contained property checks with independent oracles. Each returns a
// PropertyResult so callers can print or aggregate them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "mssdf/autodiff.hpp"
#include "mssdf/losses.hpp"
#include "mssdf/masking.hpp"
#include "mssdf/model.hpp"
#include "mssdf/rng.hpp"

namespace mssdf::verify {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

inline Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Central differences against the tape gradient for every entry of `ps`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(ParameterStore& ps, const std::function<Var(Graph&, ParameterStore&)>& loss,
                                 double h = 1e-5, double floor = 1e-5) {
  ps.zero_grad();
  {
    Graph g(true);
    g.backward(loss(g, ps));
  }
  auto eval = [&] {
    Graph g(false);
    return g.scalar(loss(g, ps));
  };
  GradCheck out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double orig = p.value.data()[k];
      p.value.data()[k] = orig + h;
      const double up = eval();
      p.value.data()[k] = orig - h;
      const double down = eval();
      p.value.data()[k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad.data()[k];
      const double abs_err = std::abs(analytic - numeric);
      out.max_abs_error = std::max(out.max_abs_error, abs_err);
      out.max_rel_error = std::max(out.max_rel_error, abs_err / std::max({std::abs(analytic), std::abs(numeric), floor}));
    }
  }
  return out;
}

namespace detail {

inline std::string fmt(const char* pattern, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), pattern, a, b);
  return buf;
}

template <class F>
PropertyResult timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.name = std::move(name);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline double hsic_trace_form(const Matrix& x, const Matrix& y) {
  const auto n = x.rows();
  const Matrix h = Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
  return (x * x.transpose() * h * y * y.transpose() * h).trace() / static_cast<double>((n - 1) * (n - 1));
}

}  // namespace detail

inline PropertyResult hsic_matches_kernel_trace(int trials = 100, std::uint64_t seed = 1) {
  return detail::timed("hsic_kernel_trace_oracle", [&] {
    Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      const int n = 2 + static_cast<int>(rng.below(15));
      const int d = 1 + static_cast<int>(rng.below(8));
      const Matrix x = random_matrix(rng, n, d), y = random_matrix(rng, n, d);
      const double oracle = detail::hsic_trace_form(x, y);
      const double got = hsic_loss(x, y);
      worst = std::max(worst, std::abs(got - oracle) / std::max(std::abs(oracle), 1e-300));
    }
    return PropertyResult{"", worst < 1e-8, detail::fmt("max relative error %.3g over %g trials", worst, trials)};
  });
}

inline PropertyResult alignment_matches_softmax(int trials = 50, std::uint64_t seed = 2) {
  return detail::timed("alignment_softmax_oracle", [&] {
    Rng rng(seed);
    double worst = 0.0;
    auto cosine = [](const RowVector& a, const RowVector& b) { return a.dot(b) / (a.norm() * b.norm()); };
    for (int t = 0; t < trials; ++t) {
      const int n = 1 + static_cast<int>(rng.below(6));
      const int d = 2 + static_cast<int>(rng.below(6));
      const Matrix q = random_matrix(rng, n, d), p = random_matrix(rng, n, d);
      std::vector<Matrix> negs;
      for (int i = 0; i < n; ++i) negs.push_back(random_matrix(rng, 1 + static_cast<int>(rng.below(5)), d));
      for (bool strict : {false, true}) {
        const double tau = 0.05 + rng.uniform();
        double oracle = 0.0;
        for (int i = 0; i < n; ++i) {
          const double pos = std::exp(cosine(q.row(i), p.row(i)) / tau);
          double denom = strict ? 0.0 : pos;
          for (Eigen::Index k = 0; k < negs[static_cast<std::size_t>(i)].rows(); ++k)
            denom += std::exp(cosine(q.row(i), negs[static_cast<std::size_t>(i)].row(k)) / tau);
          oracle -= std::log(pos / denom) / n;
        }
        worst = std::max(worst, std::abs(alignment_loss(q, p, negs, {tau, strict}) - oracle));
      }
    }
    return PropertyResult{"", worst < 1e-10, detail::fmt("max absolute error %.3g", worst)};
  });
}

inline PropertyResult bce_known_values() {
  return detail::timed("bce_known_values", [] {
    const double zeros[] = {0.0, 0.0};
    const int labels[] = {0, 1};
    const double z[] = {std::log(3.0)};
    const int one[] = {1};
    const double e1 = std::abs(modality_bce_loss(zeros, labels) - std::log(2.0));
    const double e2 = std::abs(modality_bce_loss(z, one) + std::log(0.75));
    const double far[] = {-800.0};
    const bool finite = std::isfinite(modality_bce_loss(far, one));
    return PropertyResult{"", e1 < 1e-14 && e2 < 1e-12 && finite,
                          detail::fmt("errors %.3g, %.3g", e1, e2)};
  });
}

/// One finite-difference check per loss term and for the weighted total, on
/// `instances` random problems each.
inline std::vector<PropertyResult> loss_gradients(int instances = 20, std::uint64_t seed = 3, double tol = 1e-4) {
  const char* names[] = {"rec", "align", "hsic", "cls", "total"};
  std::vector<double> worst(5, 0.0);
  std::vector<double> seconds(5, 0.0);
  std::string error;
  Rng rng(seed);
  try {
    for (int trial = 0; trial < instances; ++trial) {
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
        while (negs.size() < 3) {
          const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * n)));
          if (j != i && j != n + i) negs.push_back(j);
        }
        idx.negatives.push_back(negs);
      }
      std::vector<int> labels;
      for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(2)));
      const double tau = 0.1 + rng.uniform();

      auto rec = [&](Graph& g, ParameterStore& s) { return reconstruction_loss_node(g, g.param(s, 0), target); };
      auto align = [&](Graph& g, ParameterStore& s) {
        const Var parts[] = {g.param(s, 0), g.param(s, 1)};
        return alignment_loss_node(g, g.concat_rows(parts), idx, {tau, false});
      };
      auto hsic = [&](Graph& g, ParameterStore& s) { return hsic_loss_node(g, g.param(s, 0), g.param(s, 1)); };
      auto cls = [&](Graph& g, ParameterStore& s) { return modality_bce_loss_node(g, g.param(s, 2), labels); };
      auto total = [&](Graph& g, ParameterStore& s) {
        const Var terms[] = {rec(g, s), align(g, s), hsic(g, s), cls(g, s)};
        const double w[] = {1.0, 0.5, 0.2, 0.1};
        return g.weighted_sum(terms, w);
      };
      const std::function<Var(Graph&, ParameterStore&)> fns[] = {rec, align, hsic, cls, total};
      for (std::size_t k = 0; k < 5; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        worst[k] = std::max(worst[k], check_gradients(ps, fns[k]).max_rel_error);
        seconds[k] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
    }
  } catch (const std::exception& e) {
    error = e.what();
  }
  std::vector<PropertyResult> out;
  for (std::size_t k = 0; k < 5; ++k) {
    PropertyResult r;
    r.name = std::string("gradient_") + names[k];
    r.passed = error.empty() && worst[k] < tol;
    r.detail = error.empty() ? detail::fmt("max relative error %.3g over %g instances", worst[k], instances)
                             : "threw: " + error;
    r.seconds = seconds[k];
    out.push_back(std::move(r));
  }
  return out;
}

/// 10,000 continuous scores pooled as 100 maps of 10x10; checks bucket
/// assignment against a rank oracle and the realized mask rate.
inline PropertyResult masking_statistics(std::uint64_t seed = 4, double tol = 0.02) {
  return detail::timed("masking_bucket_rate", [&] {
    Rng rng(seed);
    std::vector<InfoScoreMap> batch(100, InfoScoreMap(10, 10));
    std::vector<double> all;
    for (auto& m : batch)
      for (auto& v : m.values()) all.push_back(v = rng.uniform());
    const auto probs = assign_mask_probabilities(batch);
    std::vector<double> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    std::size_t mismatches = 0;
    double masked = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const MaskMap mask = sample_masks(probs[b], derive_seed(seed, "verify-mask", {b}));
      masked += static_cast<double>(mask.masked_count());
      for (std::size_t i = 0; i < batch[b].size(); ++i) {
        const auto rank = static_cast<double>(std::lower_bound(sorted.begin(), sorted.end(), batch[b][i]) - sorted.begin());
        const double want = rank < 0.2 * (n - 1) ? kLowInfoMaskProb : rank > 0.8 * (n - 1) ? kHighInfoMaskProb : kMidInfoMaskProb;
        mismatches += probs[b].probs[i] != want ? 1 : 0;
      }
    }
    const double rate = masked / n;
    PropertyResult r;
    r.passed = mismatches == 0 && std::abs(rate - 0.52) <= tol;
    r.detail = detail::fmt("mask rate %.4f, bucket mismatches %g", rate, static_cast<double>(mismatches));
    return r;
  });
}

inline PropertyResult rho_schedule_table() {
  return detail::timed("rho_schedule_table", [] {
    const int epochs[] = {0, 9, 10, 25, 59, 60, 500};
    const double want[] = {0.1, 0.1, 0.2, 0.3, 0.6, 0.7, 0.7};
    PropertyResult r{"", true, "rho:"};
    for (std::size_t i = 0; i < 7; ++i) {
      const double got = substitution_probability(epochs[i]);
      r.passed = r.passed && got == want[i];
      r.detail += detail::fmt(" %g", got);
    }
    return r;
  });
}

/// Fused visible set equals the union of per-modality visible sets on random
/// 4x4 mask pairs.
inline PropertyResult fusion_union(int samples = 1000, std::uint64_t seed = 5) {
  return detail::timed("fusion_visible_union", [&] {
    Rng rng(seed);
    int failures = 0;
    for (int t = 0; t < samples; ++t) {
      const auto a = static_cast<unsigned>(rng.below(1u << 16));
      const auto b = static_cast<unsigned>(rng.below(1u << 16));
      MaskMap ma(4, 4), mb(4, 4);
      for (std::size_t i = 0; i < 16; ++i) {
        ma.set(i, (a >> i) & 1u);
        mb.set(i, (b >> i) & 1u);
      }
      const auto visible = fuse_masks(ma, mb).visible_positions();
      unsigned got = 0;
      for (int p : visible) got |= 1u << p;
      if (got != ((~a | ~b) & 0xFFFFu)) ++failures;
    }
    return PropertyResult{"", failures == 0, detail::fmt("%g of %g pairs differ", failures, samples)};
  });
}

/// Teacher-student distance after k updates with a frozen student is m^k of
/// the initial distance.
inline PropertyResult ema_geometric_law(std::uint64_t seed = 6, double tol = 1e-10) {
  return detail::timed("ema_geometric_law", [&] {
    Rng rng(seed);
    double worst = 0.0;
    for (double m : {0.9, 0.996}) {
      ParameterStore student, teacher;
      student.add("a", random_matrix(rng, 8, 8));
      student.add("b", random_matrix(rng, 1, 8));
      teacher = student;
      for (auto& p : teacher) p.value += random_matrix(rng, static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()));
      auto dist = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < student.size(); ++i) s += (teacher[i].value - student[i].value).squaredNorm();
        return std::sqrt(s);
      };
      const double d0 = dist();
      for (int k = 1; k <= 50; ++k) {
        ema_update(teacher, student, m);
        worst = std::max(worst, std::abs(dist() / d0 - std::pow(m, k)));
      }
    }
    return PropertyResult{"", worst < tol, detail::fmt("max deviation from m^k %.3g", worst)};
  });
}

/// Everything above, in a fixed order.
inline std::vector<PropertyResult> run_all() {
  std::vector<PropertyResult> out;
  out.push_back(hsic_matches_kernel_trace());
  out.push_back(alignment_matches_softmax());
  out.push_back(bce_known_values());
  for (auto& r : loss_gradients()) out.push_back(std::move(r));
  out.push_back(masking_statistics());
  out.push_back(rho_schedule_table());
  out.push_back(fusion_union());
  out.push_back(ema_geometric_law());
  return out;
}

}  // namespace mssdf::verify
