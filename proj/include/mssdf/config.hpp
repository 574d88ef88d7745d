#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "mssdf/error.hpp"
#include "mssdf/eval.hpp"
#include "mssdf/model.hpp"
#include "mssdf/train_config.hpp"

namespace mssdf {

/// Where training / evaluation pairs come from.
struct DataConfig {
  std::string manifest;  // empty: synthetic pairs generated in memory
  int expected_size = 512;
  std::uint64_t seed = 0;
  int num_pairs = 32;
  int n_classes = 4;
  std::uint64_t eval_seed = 1;
  int eval_pairs = 500;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  ModelConfig model{};
  TrainConfig train{};
  DataConfig data{};
  EvalConfig eval{};

  void validate() const {
    model.validate();
    train.validate();
    require(data.num_pairs >= 0 && data.eval_pairs >= 0, "pair counts must be nonnegative");
    require(data.n_classes >= 0, "data.n_classes must be nonnegative");
  }
};

namespace detail {

inline std::string format_value(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}
inline std::string format_value(int v) { return std::to_string(v); }
inline std::string format_value(std::uint64_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(MaskingStrategy v) { return to_string(v); }

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last)
    throw InvalidArgument("config key '" + key + "': cannot parse '" + text + "'");
  return out;
}

inline void parse_value(const std::string& key, const std::string& text, double& out) {
  out = parse_number<double>(key, text);
}
inline void parse_value(const std::string& key, const std::string& text, int& out) {
  out = parse_number<int>(key, text);
}
inline void parse_value(const std::string& key, const std::string& text, std::uint64_t& out) {
  out = parse_number<std::uint64_t>(key, text);
}
inline void parse_value(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1")
    out = true;
  else if (text == "false" || text == "0")
    out = false;
  else
    throw InvalidArgument("config key '" + key + "': expected true/false, got '" + text + "'");
}
inline void parse_value(const std::string&, const std::string& text, std::string& out) { out = text; }
inline void parse_value(const std::string&, const std::string& text, MaskingStrategy& out) {
  out = masking_strategy_from_string(text);
}

}  // namespace detail

struct ConfigKey {
  std::string key;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Field>
ConfigKey make_key(std::string key, std::string doc, Field accessor) {
  ConfigKey k;
  k.key = key;
  k.doc = std::move(doc);
  k.get = [accessor](const RunConfig& c) { return detail::format_value(accessor(const_cast<RunConfig&>(c))); };
  k.set = [accessor, key](RunConfig& c, const std::string& v) { detail::parse_value(key, v, accessor(c)); };
  return k;
}

#define MSSDF_KEY(path, doc) make_key(#path, doc, [](RunConfig& c) -> auto& { return c.path; })

inline const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys = {
      MSSDF_KEY(model.encoder_dim, "encoder token width"),
      MSSDF_KEY(model.encoder_mlp_dim, "encoder MLP hidden width"),
      MSSDF_KEY(model.encoder_layers, "encoder transformer blocks"),
      MSSDF_KEY(model.encoder_heads, "encoder attention heads"),
      MSSDF_KEY(model.fusion_dim, "fusion token width"),
      MSSDF_KEY(model.fusion_mlp_dim, "fusion MLP hidden width"),
      MSSDF_KEY(model.fusion_layers, "fusion transformer blocks"),
      MSSDF_KEY(model.fusion_heads, "fusion attention heads"),
      MSSDF_KEY(model.decoder_dim, "decoder token width"),
      MSSDF_KEY(model.decoder_mlp_dim, "decoder MLP hidden width"),
      MSSDF_KEY(model.decoder_layers, "decoder transformer blocks"),
      MSSDF_KEY(model.decoder_heads, "decoder attention heads"),
      MSSDF_KEY(model.patch_size, "square patch side in pixels"),
      MSSDF_KEY(model.image_size, "square image side in pixels"),
      MSSDF_KEY(model.channels, "channels per modality"),
      MSSDF_KEY(model.dropout, "dropout rate"),
      MSSDF_KEY(model.drop_path, "maximum stochastic depth rate"),
      MSSDF_KEY(model.init_std, "truncated-normal init std"),
      MSSDF_KEY(train.base_lr, "peak learning rate"),
      MSSDF_KEY(train.warmup_lr, "learning rate at step 0"),
      MSSDF_KEY(train.warmup_epochs, "linear warmup length"),
      MSSDF_KEY(train.total_epochs, "pretraining epochs"),
      MSSDF_KEY(train.batch_size, "samples per micro-batch"),
      MSSDF_KEY(train.grad_accum_steps, "micro-batches per optimizer step"),
      MSSDF_KEY(train.ema_momentum, "teacher EMA momentum"),
      MSSDF_KEY(train.ema_cosine_ramp, "ramp EMA momentum to 1 with a cosine"),
      MSSDF_KEY(train.seed, "master seed"),
      MSSDF_KEY(train.loss_weights.rec, "reconstruction weight"),
      MSSDF_KEY(train.loss_weights.align, "alignment weight"),
      MSSDF_KEY(train.loss_weights.hsic, "HSIC weight"),
      MSSDF_KEY(train.loss_weights.cls, "modality classification weight"),
      MSSDF_KEY(train.substitution.rho_start, "initial substitution probability"),
      MSSDF_KEY(train.substitution.rho_step, "substitution increment"),
      MSSDF_KEY(train.substitution.epochs_per_step, "epochs between increments"),
      MSSDF_KEY(train.substitution.rho_max, "substitution cap"),
      MSSDF_KEY(train.strict_align, "negatives-only alignment denominator"),
      MSSDF_KEY(train.tau, "alignment temperature"),
      MSSDF_KEY(train.num_negatives, "negatives per alignment query"),
      MSSDF_KEY(train.masking, "masking strategy: info or random"),
      MSSDF_KEY(train.random_mask_ratio, "mask probability for random masking"),
      MSSDF_KEY(train.cross_modal_substitution, "enable cross-modal substitution"),
      MSSDF_KEY(train.augment, "enable geometric augmentation"),
      MSSDF_KEY(train.info_weights.gradient, "gradient term weight in the patch score"),
      MSSDF_KEY(train.info_weights.variance, "variance term weight in the patch score"),
      MSSDF_KEY(train.weight_decay, "decoupled weight decay"),
      MSSDF_KEY(train.beta1, "first-moment decay"),
      MSSDF_KEY(train.beta2, "second-moment decay"),
      MSSDF_KEY(train.checkpoint_every, "optimizer steps between checkpoints (0: end only)"),
      MSSDF_KEY(data.manifest, "pair manifest path (empty: synthetic)"),
      MSSDF_KEY(data.expected_size, "raster side expected by the manifest reader"),
      MSSDF_KEY(data.seed, "synthetic training set seed"),
      MSSDF_KEY(data.num_pairs, "synthetic training pairs"),
      MSSDF_KEY(data.n_classes, "synthetic classes"),
      MSSDF_KEY(data.eval_seed, "synthetic evaluation set seed"),
      MSSDF_KEY(data.eval_pairs, "synthetic evaluation pairs"),
      MSSDF_KEY(eval.test_fraction, "held-out fraction per class"),
      MSSDF_KEY(eval.split_seed, "split hash seed"),
      MSSDF_KEY(eval.probe_l2, "probe L2 penalty"),
      MSSDF_KEY(eval.probe_tolerance, "probe gradient tolerance"),
      MSSDF_KEY(eval.probe_max_iter, "probe iteration cap"),
      MSSDF_KEY(eval.finetune_epochs, "fine-tuning epochs"),
      MSSDF_KEY(eval.finetune_lr, "fine-tuning peak learning rate"),
      MSSDF_KEY(eval.finetune_warmup_epochs, "fine-tuning warmup epochs"),
      MSSDF_KEY(eval.finetune_batch_size, "fine-tuning batch size"),
      MSSDF_KEY(eval.finetune_seed, "fine-tuning seed"),
  };
  return keys;
}

#undef MSSDF_KEY

inline const ConfigKey& find_config_key(const std::string& key) {
  for (const auto& k : config_registry())
    if (k.key == key) return k;
  throw InvalidArgument("unknown config key '" + key + "'");
}

/// Applies one `dotted.key=value` assignment.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidArgument("override '" + assignment + "' is not key=value");
  const std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  find_config_key(key).set(cfg, value);
}

/// Reads `key = value` lines; '#' starts a comment. Unknown keys are errors.
inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open config file '" + path.string() + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(base, line);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : config_registry()) j[k.key] = k.get(cfg);
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) find_config_key(key).set(cfg, value.get<std::string>());
  return cfg;
}

}  // namespace mssdf
