#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mssdf/config.hpp"
#include "mssdf/data.hpp"
#include "mssdf/eval.hpp"
#include "mssdf/pipeline.hpp"
#include "mssdf/verify.hpp"
#include "mssdf/viz.hpp"

namespace fs = std::filesystem;
using namespace mssdf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
};

std::string default_output_dir() {
  if (const char* env = std::getenv("MSSDF_OUTPUT_DIR"); env != nullptr && *env != '\0') return env;
  return "mssdf_out";
}

std::string key_listing() {
  const RunConfig defaults;
  std::ostringstream os;
  os << "Configuration keys (pass as key=value after the command, or in a --config file):\n";
  for (const auto& k : config_registry()) {
    std::string value = k.get(defaults);
    if (value.empty()) value = "\"\"";
    os << "  " << std::left << std::setw(38) << k.key << std::setw(12) << value << k.doc << '\n';
  }
  os << "\nEnvironment:\n  MSSDF_OUTPUT_DIR  default for --out (otherwise ./mssdf_out)\n"
     << "\nExit codes: 0 success, 1 usage error, 2 runtime error.\n";
  return os.str();
}

void add_common(CLI::App& cmd, CommonArgs& a, bool with_checkpoint, const char* seed_doc) {
  cmd.add_option("--config", a.config_path, "key = value config file applied before overrides");
  cmd.add_option("--out", a.out, "output directory");
  cmd.add_option("--seed", a.seed, seed_doc);
  if (with_checkpoint) cmd.add_option("--checkpoint", a.checkpoint, "checkpoint file (*.ckpt)");
  cmd.add_option("overrides", a.overrides, "dotted key=value overrides");
}

/// Loads the run snapshot stored next to a checkpoint, if any.
RunConfig checkpoint_config(const fs::path& ckpt) {
  const auto side = checkpoint_sidecar(ckpt);
  std::ifstream in(side);
  if (!in) throw RuntimeError("cannot open checkpoint metadata '" + side.string() + "'");
  const auto meta = nlohmann::json::parse(in);
  const auto cfg = meta.value("config", nlohmann::json::object());
  return cfg.empty() ? RunConfig{} : config_from_json(cfg);
}

RunConfig assemble_config(const CommonArgs& a, RunConfig base = {}) {
  try {
    if (!a.config_path.empty()) {
      if (!fs::exists(a.config_path)) throw UsageError("config file '" + a.config_path + "' does not exist");
      base = load_config_file(a.config_path, base);
    }
    for (const auto& o : a.overrides) apply_override(base, o);
    base.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  return base;
}

fs::path output_dir(const CommonArgs& a) {
  const fs::path dir = a.out.empty() ? default_output_dir() : a.out;
  fs::create_directories(dir);
  return dir;
}

SyntheticOptions synthetic_options(const RunConfig& cfg) {
  SyntheticOptions opt;
  opt.patch_size = cfg.model.patch_size;
  return opt;
}

std::vector<ModalityPair> training_pairs(const RunConfig& cfg) {
  if (!cfg.data.manifest.empty())
    return load_hr_pairs(read_manifest(cfg.data.manifest), cfg.data.expected_size, cfg.model.patch_size).read_all();
  return generate_synthetic_dataset(cfg.data.seed, cfg.data.num_pairs, cfg.model.image_size, cfg.data.n_classes,
                                    synthetic_options(cfg));
}

std::vector<ModalityPair> evaluation_pairs(const RunConfig& cfg) {
  return generate_synthetic_dataset(cfg.data.eval_seed, cfg.data.eval_pairs, cfg.model.image_size,
                                    std::max(cfg.data.n_classes, 2), synthetic_options(cfg));
}

// -- commands ---------------------------------------------------------------

int cmd_gen_synth(const CommonArgs& a) {
  RunConfig cfg = assemble_config(a);
  if (a.seed) cfg.data.seed = *a.seed;
  const fs::path dir = output_dir(a);
  const auto pairs = generate_synthetic_dataset(cfg.data.seed, cfg.data.num_pairs, cfg.model.image_size,
                                                cfg.data.n_classes, synthetic_options(cfg));
  DatasetManifest manifest;
  manifest.root = dir;
  std::ofstream labels(dir / "labels.tsv");
  for (const auto& p : pairs) {
    manifest.entries.push_back(write_pair_files(dir, p));
    labels << p.pair_id << '\t' << (p.label ? std::to_string(*p.label) : "") << '\n';
  }
  write_manifest(dir / "manifest.tsv", manifest);
  std::cout << "wrote " << pairs.size() << " pairs to " << (dir / "manifest.tsv").string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const CommonArgs& a, long max_steps, bool verbose) {
  RunConfig cfg = assemble_config(a);
  if (a.seed) cfg.train.seed = *a.seed;
  const auto data = training_pairs(cfg);
  PretrainOptions opt;
  opt.output_dir = output_dir(a);
  opt.max_steps = max_steps;
  opt.verbose = verbose;
  if (!a.checkpoint.empty()) opt.resume = a.checkpoint;
  const auto rec = run_pretraining(cfg, data, opt);
  std::cout << "pretrained " << rec.state.step << " steps; checkpoint "
            << last_checkpoint_path(opt.output_dir).string() << '\n';
  return kExitOk;
}

struct EvalSetup {
  RunConfig cfg;
  MssdfModel model;
  std::string tag;
};

EvalSetup eval_setup(const CommonArgs& a) {
  EvalSetup s;
  if (!a.checkpoint.empty()) {
    s.cfg = assemble_config(a, checkpoint_config(a.checkpoint));
    s.model = load_checkpoint(a.checkpoint, s.cfg.model, s.cfg.train).state.model;
    s.tag = fs::path(a.checkpoint).stem().string();
  } else {
    s.cfg = assemble_config(a);
    s.model = MssdfModel::create(s.cfg.model, s.cfg.train.seed);
    s.tag = "random-init";
  }
  return s;
}

int cmd_probe(const CommonArgs& a) {
  auto s = eval_setup(a);
  if (a.seed) s.cfg.eval.split_seed = *a.seed;
  const fs::path dir = output_dir(a);
  const auto data = evaluation_pairs(s.cfg);
  const auto res = linear_probe(extract_features(s.model, data, s.tag), s.cfg.eval.split_seed, s.cfg.eval);
  append_result_csv(dir / "results.csv", s.tag, "linear_probe", res.accuracy, s.cfg.eval.split_seed);
  write_confusion_png(dir / "confusion_linear_probe.png", res.confusion);
  std::cout << "linear_probe " << s.tag << " accuracy " << res.accuracy << (res.converged ? "" : " (not converged)")
            << '\n';
  return kExitOk;
}

int cmd_finetune(const CommonArgs& a) {
  auto s = eval_setup(a);
  if (a.seed) s.cfg.eval.finetune_seed = *a.seed;
  const fs::path dir = output_dir(a);
  const auto data = evaluation_pairs(s.cfg);
  const auto res = finetune_small(s.model, data, s.cfg.eval.finetune_epochs, s.cfg.eval);
  append_result_csv(dir / "results.csv", s.tag, "finetune", res.accuracy, s.cfg.eval.finetune_seed);
  write_confusion_png(dir / "confusion_finetune.png", res.confusion);
  std::cout << "finetune " << s.tag << " accuracy " << res.accuracy << '\n';
  return kExitOk;
}

int cmd_mask_viz(const CommonArgs& a, int count, int epoch) {
  RunConfig cfg = assemble_config(a);
  const std::uint64_t seed = a.seed.value_or(cfg.train.seed);
  if (count < 1) throw UsageError("--count must be at least 1");
  if (epoch < 0) throw UsageError("--epoch must be nonnegative");
  const fs::path dir = output_dir(a);
  RunConfig data_cfg = cfg;
  if (data_cfg.data.manifest.empty()) data_cfg.data.num_pairs = count;
  auto pairs = training_pairs(data_cfg);
  if (pairs.size() > static_cast<std::size_t>(count)) pairs.resize(static_cast<std::size_t>(count));
  require(!pairs.empty(), "mask-viz: no pairs to render");

  const std::uint64_t step_seed = derive_seed(seed, "mask-viz");
  const auto masks = compute_masks(pairs, cfg.train, step_seed, 0);
  const double rho = cfg.train.cross_modal_substitution ? substitution_probability(epoch, cfg.train.substitution) : 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const auto sub = cross_modal_substitution(p.other, masks[i].other, rho,
                                              derive_seed(step_seed, "substitution", {i}));
    write_mask_png(mask_png_path(dir, p.pair_id, Modality::Rgb), p.rgb, masks[i].rgb);
    write_mask_png(mask_png_path(dir, p.pair_id, Modality::Other), sub.image, masks[i].other, sub.substituted);
  }
  std::cout << "wrote masks for " << pairs.size() << " pairs (rho " << rho << ") to " << dir.string() << '\n';
  return kExitOk;
}

int cmd_losses_check() {
  bool all = true;
  for (const auto& r : verify::run_all()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    all = all && r.passed;
  }
  return all ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal masked self-supervised pretraining toolkit"};
  app.footer(key_listing());
  app.require_subcommand(1);

  CommonArgs gen, pre, probe, ft, viz;
  long max_steps = -1;
  bool verbose = false;
  int viz_count = 4;
  int viz_epoch = 0;

  auto* c_gen = app.add_subcommand("gen-synth", "write a labeled synthetic dataset and manifest");
  add_common(*c_gen, gen, false, "dataset seed (overrides data.seed)");
  auto* c_pre = app.add_subcommand("pretrain", "run or resume pretraining");
  add_common(*c_pre, pre, true, "training seed (overrides train.seed)");
  c_pre->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
  c_pre->add_flag("--verbose", verbose, "log every step to stderr");
  auto* c_probe = app.add_subcommand("probe", "linear probe on frozen encoder features");
  add_common(*c_probe, probe, true, "split seed (overrides eval.split_seed)");
  auto* c_ft = app.add_subcommand("finetune", "short supervised fine-tuning");
  add_common(*c_ft, ft, true, "fine-tuning seed (overrides eval.finetune_seed)");
  auto* c_viz = app.add_subcommand("mask-viz", "render masks and substitutions as PNGs");
  add_common(*c_viz, viz, false, "mask seed (defaults to train.seed)");
  c_viz->add_option("--count", viz_count, "number of pairs to render");
  c_viz->add_option("--epoch", viz_epoch, "epoch whose substitution rate is used");
  auto* c_check = app.add_subcommand("losses-check", "run the loss, gradient and masking property checks");
  for (auto* sub : app.get_subcommands({})) sub->footer(key_listing());

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_synth(gen);
    if (c_pre->parsed()) return cmd_pretrain(pre, max_steps, verbose);
    if (c_probe->parsed()) return cmd_probe(probe);
    if (c_ft->parsed()) return cmd_finetune(ft);
    if (c_viz->parsed()) return cmd_mask_viz(viz, viz_count, viz_epoch);
    if (c_check->parsed()) return cmd_losses_check();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
