#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mssdf/eval.hpp"
#include "mssdf/io/png.hpp"

using namespace mssdf;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.encoder_dim = 16;
  c.encoder_mlp_dim = 32;
  c.encoder_layers = 1;
  c.encoder_heads = 2;
  c.fusion_dim = 8;
  c.fusion_mlp_dim = 16;
  c.fusion_layers = 1;
  c.fusion_heads = 2;
  c.decoder_dim = 8;
  c.decoder_mlp_dim = 16;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  return c;
}

std::vector<ModalityPair> tiny_dataset(int n, std::uint64_t seed = 0) {
  SyntheticOptions opt;
  opt.patch_size = 4;
  return generate_synthetic_dataset(seed, n, 16, 4, opt);
}

// Four Gaussian blobs with well separated centres, `per_class` rows each.
FeatureTable blobs(int per_class, double spread, std::uint64_t seed) {
  Rng rng(seed);
  FeatureTable t;
  t.encoder_tag = "blobs";
  t.features.resize(4 * per_class, 3);
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < per_class; ++i) {
      const int row = c * per_class + i;
      for (int j = 0; j < 3; ++j) t.features(row, j) = spread * rng.normal();
      t.features(row, c % 3) += c < 3 ? 10.0 : -10.0;
      t.labels.push_back(c);
      t.sample_ids.push_back("s" + std::to_string(row));
    }
  }
  return t;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mssdf_test_eval" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(StratifiedSplit, KeepsClassProportionsAndIsDeterministic) {
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) {
    labels.push_back(i < 60 ? 0 : 1);
    ids.push_back("id" + std::to_string(i));
  }
  const auto a = stratified_split(labels, ids, 3, 0.2);
  const auto b = stratified_split(labels, ids, 3, 0.2);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.test.size(), 20u);
  int test_ones = 0;
  for (int r : a.test) test_ones += labels[static_cast<std::size_t>(r)];
  EXPECT_EQ(test_ones, 8);
  std::vector<int> all = a.train;
  all.insert(all.end(), a.test.begin(), a.test.end());
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(all[static_cast<std::size_t>(i)], i);
  EXPECT_NE(stratified_split(labels, ids, 4, 0.2).test, a.test);
  EXPECT_THROW(stratified_split(labels, ids, 0, 1.0), InvalidArgument);
}

TEST(LinearProbe, SeparableFeaturesGivePerfectAccuracy) {
  const auto t = blobs(25, 0.5, 1);
  const auto r = linear_probe(t, 0);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.confusion.rows(), 4);
  EXPECT_DOUBLE_EQ(r.confusion.trace(), r.confusion.sum());
}

TEST(LinearProbe, ShuffledLabelsGiveChance) {
  double mean = 0.0;
  const int trials = 8;
  for (int trial = 0; trial < trials; ++trial) {
    auto t = blobs(100, 0.5, 10 + static_cast<std::uint64_t>(trial));
    Rng rng(static_cast<std::uint64_t>(100 + trial));
    rng.shuffle(t.labels.begin(), t.labels.end());
    mean += linear_probe(t, 0).accuracy / trials;
  }
  EXPECT_NEAR(mean, 0.25, 0.08);
}

TEST(LinearProbe, ConstantFeaturesPredictMajorityClass) {
  FeatureTable t;
  t.encoder_tag = "const";
  t.features = Matrix::Ones(60, 4);
  for (int i = 0; i < 60; ++i) {
    t.labels.push_back(i < 40 ? 2 : i < 50 ? 0 : 1);
    t.sample_ids.push_back("c" + std::to_string(i));
  }
  const auto r = linear_probe(t, 0);
  EXPECT_NEAR(r.accuracy, 40.0 / 60.0, 0.02);
  EXPECT_DOUBLE_EQ(r.confusion.col(2).sum(), r.confusion.sum());
}

TEST(LinearProbe, RowOrderDoesNotMatter) {
  const auto t = blobs(30, 4.0, 2);
  FeatureTable shuffled = t;
  std::vector<int> perm(t.labels.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  Rng rng(5);
  rng.shuffle(perm.begin(), perm.end());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto src = static_cast<std::size_t>(perm[i]);
    shuffled.features.row(static_cast<Eigen::Index>(i)) = t.features.row(static_cast<Eigen::Index>(src));
    shuffled.labels[i] = t.labels[src];
    shuffled.sample_ids[i] = t.sample_ids[src];
  }
  const auto a = linear_probe(t, 7);
  const auto b = linear_probe(shuffled, 7);
  EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(LinearProbe, ConfusionRowsSumToClassTestCounts) {
  const auto t = blobs(30, 6.0, 3);
  const auto r = linear_probe(t, 0);
  const auto split = stratified_split(t.labels, t.sample_ids, 0, 0.2);
  std::vector<double> counts(4, 0.0);
  for (int row : split.test) counts[static_cast<std::size_t>(t.labels[static_cast<std::size_t>(row)])] += 1.0;
  for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(r.confusion.row(c).sum(), counts[static_cast<std::size_t>(c)]);
  EXPECT_NEAR(r.accuracy, r.confusion.trace() / r.confusion.sum(), 1e-15);
  EXPECT_TRUE(r.converged);
}

TEST(LinearProbe, ClassCountRequirements) {
  std::vector<int> ok(20, 0);
  ok.insert(ok.end(), 10, 3);
  EXPECT_EQ(probe_class_count(ok), 4);
  std::vector<int> single(30, 1);
  EXPECT_THROW(probe_class_count(single), InvalidArgument);
  std::vector<int> thin(20, 0);
  thin.insert(thin.end(), 9, 1);
  try {
    probe_class_count(thin);
    FAIL() << "expected a throw";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
  EXPECT_THROW(probe_class_count(std::vector<int>{}), InvalidArgument);
}

TEST(LinearProbe, RejectsInconsistentTables) {
  auto t = blobs(10, 1.0, 4);
  t.labels.pop_back();
  EXPECT_THROW(linear_probe(t, 0), InvalidArgument);
  auto nan = blobs(10, 1.0, 4);
  nan.features(0, 0) = std::nan("");
  EXPECT_THROW(linear_probe(nan, 0), InvalidArgument);
}

TEST(LinearProbe, RawPixelMeansBeatChanceOnSynthetic) {
  const auto data = tiny_dataset(200, 9);
  FeatureTable t;
  t.encoder_tag = "raw";
  t.features = Matrix::Zero(200, 3);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& img = data[i].rgb;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c) t.features(static_cast<Eigen::Index>(i), c) += img.at(y, x, c) / 256.0;
    t.labels.push_back(*data[i].label);
    t.sample_ids.push_back(data[i].pair_id);
  }
  EXPECT_GT(linear_probe(t, 0).accuracy, 0.35);
}

TEST(ExtractFeatures, ShapesAndIdenticalInputsGiveIdenticalRows) {
  const auto model = MssdfModel::create(tiny_model(), 1);
  auto data = tiny_dataset(3);
  data[2].rgb = data[0].rgb;
  const auto before = model.student.checksum();
  const auto t = extract_features(model, data, "init");
  EXPECT_EQ(model.student.checksum(), before);
  EXPECT_EQ(t.features.rows(), 3);
  EXPECT_EQ(t.features.cols(), model.config.encoder_dim);
  EXPECT_EQ(t.features.row(0), t.features.row(2));
  EXPECT_NE(t.features.row(0), t.features.row(1));
  EXPECT_EQ(t.sample_ids[1], data[1].pair_id);
  EXPECT_EQ(t.encoder_tag, "init");
  data[1].label.reset();
  EXPECT_THROW(extract_features(model, data, "x"), InvalidArgument);
}

TEST(ExtractFeatures, MatchesStudentEncodeMeanPool) {
  const auto model = MssdfModel::create(tiny_model(), 2);
  const auto data = tiny_dataset(2, 4);
  const auto t = extract_features(model, data, "x");
  const Matrix patches = patchify(data[1].rgb, 4);
  const auto tokens = encode(embed_tokens(patches, Modality::Rgb, model), MaskMap(4, 4), EncoderRole::Student, model);
  EXPECT_TRUE(t.features.row(1).isApprox(tokens.tokens.colwise().mean(), 1e-12));
}

TEST(Finetune, ZeroEpochsEqualsHeadAtInitialization) {
  const auto model = MssdfModel::create(tiny_model(), 3);
  const auto data = tiny_dataset(80, 5);
  EvalConfig cfg;
  cfg.finetune_seed = 11;
  const auto before = model.student.checksum();
  const auto r = finetune_small(model, data, 0, cfg);
  EXPECT_EQ(model.student.checksum(), before);
  EXPECT_TRUE(r.epoch_losses.empty());

  const auto t = extract_features(model, data, "init");
  const auto split = stratified_split(t.labels, t.sample_ids, cfg.split_seed, cfg.test_fraction);
  Matrix train(static_cast<Eigen::Index>(split.train.size()), t.features.cols());
  for (std::size_t i = 0; i < split.train.size(); ++i)
    train.row(static_cast<Eigen::Index>(i)) = t.features.row(split.train[i]);
  const RowVector mean = train.colwise().mean();
  const RowVector sd = ((train.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();

  ParameterStore head;
  Rng init_rng(derive_seed(11, "finetune-head"));
  const auto layer = LinearLayer::create(head, "head", 16, 4, init_rng, model.config.init_std);
  std::vector<int> truth, pred;
  for (int row : split.test) {
    const RowVector z = (t.features.row(row) - mean).array() / sd.array();
    const RowVector logits = z * head[layer.weight].value + head[layer.bias].value;
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    truth.push_back(t.labels[static_cast<std::size_t>(row)]);
    pred.push_back(static_cast<int>(arg));
  }
  EXPECT_DOUBLE_EQ(r.accuracy, accuracy_of(truth, pred));
  EXPECT_EQ(r.confusion, confusion_matrix(truth, pred, 4));
}

TEST(Finetune, ReproducibleAndLossDecreases) {
  const auto model = MssdfModel::create(tiny_model(), 4);
  const auto data = tiny_dataset(80, 6);
  EvalConfig cfg;
  cfg.finetune_lr = 2e-3;
  const auto a = finetune_small(model, data, 4, cfg);
  const auto b = finetune_small(model, data, 4, cfg);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_EQ(a.accuracy, b.accuracy);
  ASSERT_EQ(a.epoch_losses.size(), 4u);
  EXPECT_LT(a.epoch_losses.back(), a.epoch_losses.front());
  EXPECT_DOUBLE_EQ(a.confusion.sum(), 16.0);
  EXPECT_THROW(finetune_small(model, data, -1, cfg), InvalidArgument);
}

TEST(Outputs, ResultCsvAppendsUnderOneHeader) {
  const auto dir = fresh_dir("csv");
  const auto path = dir / "results.csv";
  append_result_csv(path, "ckpt_a", "linear_probe", 0.5, 0);
  append_result_csv(path, "ckpt_a", "finetune", 0.625, 3);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "checkpoint_tag,protocol,accuracy,seed\nckpt_a,linear_probe,0.5,0\nckpt_a,finetune,0.625,3\n");
}

TEST(Outputs, ConfusionPngShadesByRowFraction) {
  const auto dir = fresh_dir("png");
  Matrix cm(2, 2);
  cm << 4, 0, 1, 3;
  write_confusion_png(dir / "cm.png", cm, 8);
  const auto img = io::read_png((dir / "cm.png").string(), 3);
  ASSERT_EQ(img.width, 16);
  ASSERT_EQ(img.height, 16);
  auto px = [&](int y, int x) { return img.data[(static_cast<std::size_t>(y) * 16 + x) * 3]; };
  EXPECT_EQ(px(4, 4), 0);
  EXPECT_EQ(px(4, 12), 255);
  EXPECT_EQ(px(12, 4), 191);
  EXPECT_EQ(px(12, 12), 64);
  EXPECT_EQ(px(0, 0), 128);
}
