#pragma once

#include <cstdint>
#include <string>
#include <tuple>

#include "mssdf/error.hpp"
#include "mssdf/losses.hpp"
#include "mssdf/masking.hpp"
#include "mssdf/optim.hpp"

namespace mssdf {

enum class MaskingStrategy { InformationAware, Random };

inline std::string to_string(MaskingStrategy s) { return s == MaskingStrategy::Random ? "random" : "info"; }

inline MaskingStrategy masking_strategy_from_string(const std::string& s) {
  if (s == "info" || s == "information-aware") return MaskingStrategy::InformationAware;
  if (s == "random" || s == "uniform") return MaskingStrategy::Random;
  throw InvalidArgument("unknown masking strategy '" + s + "' (expected info|random)");
}

/// Pretraining schedule, objective weights and ablation switches.
struct TrainConfig {
  double base_lr = 1.5e-4;
  double warmup_lr = 1e-6;
  int warmup_epochs = 2;
  int total_epochs = 20;
  int batch_size = 8;  // samples per micro-batch
  int grad_accum_steps = 2;
  double ema_momentum = 0.996;
  bool ema_cosine_ramp = true;
  std::uint64_t seed = 0;
  LossWeights loss_weights{};
  SubstitutionSchedule substitution{};
  bool strict_align = false;

  double tau = 0.07;
  int num_negatives = 16;
  MaskingStrategy masking = MaskingStrategy::InformationAware;
  double random_mask_ratio = 0.52;
  bool cross_modal_substitution = true;
  bool augment = true;
  InfoScoreWeights info_weights{};
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int checkpoint_every = 0;  // optimizer steps; 0 = only at the end

  /// Full-scale settings (not validated at desk scale).
  static TrainConfig full_scale() {
    TrainConfig c;
    c.warmup_epochs = 30;
    c.total_epochs = 500;
    c.batch_size = 512;
    c.grad_accum_steps = 2;
    return c;
  }

  static TrainConfig toy() { return {}; }

  [[nodiscard]] LrSchedule lr_schedule() const { return {base_lr, warmup_lr, warmup_epochs, total_epochs}; }
  [[nodiscard]] AdamWOptions adamw() const { return {beta1, beta2, 1e-8, weight_decay}; }
  [[nodiscard]] int effective_batch() const noexcept { return batch_size * grad_accum_steps; }

  void validate() const {
    require(total_epochs >= 0, "total_epochs must be nonnegative");
    require(warmup_epochs >= 0 && (total_epochs == 0 || warmup_epochs < total_epochs),
            "warmup_epochs must be smaller than total_epochs");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(grad_accum_steps >= 1, "grad_accum_steps must be >= 1");
    require(ema_momentum >= 0.0 && ema_momentum <= 1.0, "ema_momentum must lie in [0,1]");
    require(base_lr >= 0.0 && warmup_lr >= 0.0, "learning rates must be nonnegative");
    require(tau > 0.0, "tau must be positive");
    require(num_negatives >= 1, "num_negatives must be >= 1");
    require(random_mask_ratio >= 0.0 && random_mask_ratio <= 1.0, "random_mask_ratio must lie in [0,1]");
    require(checkpoint_every >= 0, "checkpoint_every must be nonnegative");
    loss_weights.validate();
    substitution.validate();
  }

  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    auto tie = [](const TrainConfig& c) {
      return std::tie(c.base_lr, c.warmup_lr, c.warmup_epochs, c.total_epochs, c.batch_size, c.grad_accum_steps,
                      c.ema_momentum, c.ema_cosine_ramp, c.seed, c.loss_weights.rec, c.loss_weights.align,
                      c.loss_weights.hsic, c.loss_weights.cls, c.substitution.rho_start, c.substitution.rho_step,
                      c.substitution.epochs_per_step, c.substitution.rho_max, c.strict_align, c.tau,
                      c.num_negatives, c.masking, c.random_mask_ratio, c.cross_modal_substitution, c.augment,
                      c.info_weights.gradient, c.info_weights.variance, c.weight_decay, c.beta1, c.beta2,
                      c.checkpoint_every);
    };
    return tie(a) == tie(b);
  }
};

}  // namespace mssdf
