#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "mssdf/autodiff.hpp"
#include "mssdf/error.hpp"

namespace mssdf {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Adam with decoupled weight decay. Decay applies only to parameters whose
/// `decay` flag is set (projection weights); biases, norms and embeddings are exempt.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWOptions opt) : opt_(opt) {}

  void step(std::vector<ParameterStore*> stores, double lr) {
    if (m_.empty()) init(stores);
    require(m_.size() == stores.size(), "optimizer bound to a different set of parameter stores");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < stores.size(); ++s) {
      auto& ps = *stores[s];
      require(m_[s].size() == ps.size(), "optimizer state does not match parameter store");
      for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& p = ps[i];
        auto& m = m_[s][i];
        auto& v = v_[s][i];
        m = opt_.beta1 * m + (1.0 - opt_.beta1) * p.grad;
        v = opt_.beta2 * v + (1.0 - opt_.beta2) * p.grad.cwiseProduct(p.grad);
        if (p.decay && opt_.weight_decay > 0.0) p.value *= (1.0 - lr * opt_.weight_decay);
        p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt_.eps);
      }
    }
  }

  [[nodiscard]] long steps_taken() const noexcept { return t_; }
  [[nodiscard]] const AdamWOptions& options() const noexcept { return opt_; }

  /// Moment buffers, one list per bound store.
  [[nodiscard]] const std::vector<std::vector<Matrix>>& first_moments() const noexcept { return m_; }
  [[nodiscard]] const std::vector<std::vector<Matrix>>& second_moments() const noexcept { return v_; }

  void restore(long t, std::vector<std::vector<Matrix>> m, std::vector<std::vector<Matrix>> v) {
    require(m.size() == v.size(), "optimizer moment lists differ in size");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  void init(const std::vector<ParameterStore*>& stores) {
    m_.clear();
    v_.clear();
    for (auto* ps : stores) {
      std::vector<Matrix> ms;
      for (const auto& p : *ps) ms.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      m_.push_back(ms);
      v_.push_back(std::move(ms));
    }
  }

 private:
  AdamWOptions opt_{};
  long t_ = 0;
  std::vector<std::vector<Matrix>> m_;
  std::vector<std::vector<Matrix>> v_;
};

struct LrSchedule {
  double base_lr = 1.5e-4;
  double warmup_lr = 1e-6;
  int warmup_epochs = 2;
  int total_epochs = 20;
};

/// Linear warmup from warmup_lr to base_lr, then cosine decay reaching 0 at the
/// final step (total_epochs * steps_per_epoch - 1).
inline double lr_at(long step, long steps_per_epoch, const LrSchedule& s) {
  require(step >= 0, "step must be nonnegative");
  require(steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
  const long warmup = static_cast<long>(s.warmup_epochs) * steps_per_epoch;
  const long last = static_cast<long>(s.total_epochs) * steps_per_epoch - 1;
  if (step < warmup) return s.warmup_lr + (s.base_lr - s.warmup_lr) * static_cast<double>(step) / warmup;
  if (step >= last) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(last - warmup);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mssdf
