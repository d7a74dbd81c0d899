#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "caps/checkpoint.hpp"
#include "caps/ensemble.hpp"
#include "caps/training.hpp"
#include "test_support.hpp"
#include "tiny_capsnet.hpp"

using namespace caps;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("capsnet-ckpt-test-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const Dataset& digits_train() {
  static const Dataset d = load_idx(std::string(CAPSNET_TEST_DATA_DIR) + "/digits-train-images.idx3-ubyte",
                                    std::string(CAPSNET_TEST_DATA_DIR) + "/digits-train-labels.idx1-ubyte");
  return d;
}

const Dataset& digits_test() {
  static const Dataset d = load_idx(std::string(CAPSNET_TEST_DATA_DIR) + "/digits-test-images.idx3-ubyte",
                                    std::string(CAPSNET_TEST_DATA_DIR) + "/digits-test-labels.idx1-ubyte");
  return d;
}

std::unique_ptr<Classifier> lenet(std::uint64_t seed = 1) {
  Rng rng(init_seed(seed));
  return std::make_unique<BaselineClassifier>(BaselineConfig{BaselineArch::kLeNet, 10}, rng);
}

std::unique_ptr<Classifier> tiny_caps(std::uint64_t seed = 1) {
  Rng rng(init_seed(seed));
  CapsNetConfig c = testing_support::tiny_capsnet_config();
  c.n_class = 10;
  return std::make_unique<CapsNetClassifier>(c, rng);
}

CapsNetConfig reduced_config() {
  CapsNetConfig c;
  c.stem_channels = 64;
  c.primary.channels = 8;
  c.primary.capsule_dim = 8;
  c.digit_dim = 16;
  return c;
}

std::string serialized(const Checkpoint& c) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, c);
  return out.str();
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  for (auto* make : {&lenet, &tiny_caps}) {
    const auto model = make(3);
    const std::string bytes = serialized(capture(*model, 4, 17, 20));
    std::istringstream in(bytes, std::ios::binary);
    const Checkpoint back = read_checkpoint(in);
    EXPECT_EQ(back.epoch, 4u);
    EXPECT_DOUBLE_EQ(back.train_accuracy(), 0.85);
    EXPECT_EQ(back.kind, model->kind());
    EXPECT_EQ(serialized(back), bytes);
  }
}

TEST(Checkpoint, SaveLoadSaveThroughFiles) {
  const auto model = tiny_caps(4);
  const fs::path a = scratch("a.ckpt"), b = scratch("b.ckpt");
  save_checkpoint(a, capture(*model, 1, 0, 0));
  save_checkpoint(b, load_checkpoint(a));
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt")), Error);
}

TEST(Checkpoint, HeaderIsReadableText) {
  const std::string bytes = serialized(capture(*lenet(), 2, 5, 10));
  EXPECT_EQ(bytes.rfind("CAPSNET-CHECKPOINT\nformat_version=1\nmodel=lenet\n", 0), 0u);
  EXPECT_NE(bytes.find("\ntrain_accuracy=0.500000\n"), std::string::npos);
  EXPECT_NE(bytes.find("\nEND\n"), std::string::npos);
}

TEST(Checkpoint, TruncationAndCorruptionReportOffsets) {
  const std::string bytes = serialized(capture(*tiny_caps(), 1, 0, 0));
  const std::size_t body = bytes.find("END\n") + 4;
  for (std::size_t cut : {body / 2, body + 2, body + 40, bytes.size() - 1}) {
    std::istringstream in(bytes.substr(0, cut), std::ios::binary);
    try {
      read_checkpoint(in);
      ADD_FAILURE() << "truncation at " << cut << " accepted";
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
  std::string extra = bytes + "x";
  std::istringstream trailing(extra, std::ios::binary);
  EXPECT_THROW(read_checkpoint(trailing), FormatError);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::istringstream magic(bad_magic, std::ios::binary);
  try {
    read_checkpoint(magic);
    ADD_FAILURE() << "bad magic accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }

  std::string huge_rank = bytes;
  const std::size_t name_len = static_cast<unsigned char>(huge_rank[body]);
  huge_rank[body + 4 + name_len + 3] = '\x7f';
  std::istringstream rank(huge_rank, std::ios::binary);
  EXPECT_THROW(read_checkpoint(rank), FormatError);
}

TEST(Checkpoint, LoadIntoChecksArchitecture) {
  const Checkpoint c = capture(*tiny_caps(1), 1, 0, 0);
  auto other = tiny_caps(2);
  load_into(*other, c);
  EXPECT_EQ(serialized(capture(*other, 1, 0, 0)), serialized(c));

  auto wrong_kind = lenet();
  EXPECT_THROW(load_into(*wrong_kind, c), ContractError);

  Checkpoint reshaped = c;
  reshaped.parameters[0].shape.back() += 1;
  reshaped.parameters[0].values.resize(element_count(reshaped.parameters[0].shape));
  EXPECT_THROW(load_into(*other, reshaped), FormatError);

  Checkpoint renamed = c;
  renamed.parameters[0].name += "_x";
  EXPECT_THROW(load_into(*other, renamed), FormatError);
}

TEST(Checkpoint, InstantiateReproducesScores) {
  NoGradGuard no_grad;
  std::vector<std::size_t> idx{0, 1, 2, 3};
  for (auto* make : {&lenet, &tiny_caps}) {
    const auto model = make(5);
    const auto copy = instantiate(capture(*model, 1, 0, 0));
    const Tensor x = make_batch(digits_test(), idx, model->input_side());
    EXPECT_EQ(testing_support::max_abs_diff(model->scores(x), copy->scores(x)), 0.0);
  }
}

TEST(Training, CurveFormat) {
  std::ostringstream out;
  write_curve(out, {{1, 0.5, 0.25, 1.0 / 3.0}, {2, 1.0, 0.75, 0.125}});
  EXPECT_EQ(out.str(), "epoch,train_acc,test_acc,train_loss\n1,0.500000,0.250000,0.333333\n2,1.000000,0.750000,0.125000\n");
}

TEST(Training, DeterministicAndCheckpointsBestTrainEpoch) {
  const Dataset train_set = take_per_class(digits_train(), 10);
  const Dataset test_set = take_per_class(digits_test(), 5);
  std::string runs[2][2];
  for (int run = 0; run < 2; ++run) {
    auto model = lenet(1);
    TrainOptions opt;
    opt.epochs = 6;
    opt.batch_size = 16;
    opt.seed = 1;
    opt.checkpoint_path = scratch("run" + std::to_string(run) + ".ckpt");
    opt.curve_path = scratch("run" + std::to_string(run) + ".csv");
    std::vector<std::string> params_by_epoch;
    const TrainResult r = train(*model, train_set, test_set, opt, [&](const CurveRow& row) {
      params_by_epoch.push_back(serialized(capture(*model, row.epoch, 0, 0)));
    });
    ASSERT_EQ(r.curve.size(), 6u);
    std::size_t best = 0;
    for (std::size_t e = 0; e < r.curve.size(); ++e) {
      EXPECT_EQ(r.curve[e].epoch, e + 1);
      if (r.curve[e].train_acc > r.curve[best].train_acc) best = e;
    }
    EXPECT_EQ(r.best_epoch, best + 1);
    const Checkpoint saved = load_checkpoint(*opt.checkpoint_path);
    EXPECT_EQ(saved.epoch, best + 1);
    EXPECT_NEAR(saved.train_accuracy(), r.curve[best].train_acc, 1e-12);
    Checkpoint expected = saved;
    std::istringstream in(params_by_epoch[best], std::ios::binary);
    expected.parameters = read_checkpoint(in).parameters;
    EXPECT_EQ(serialized(saved), serialized(expected));

    std::ostringstream curve;
    write_curve(curve, r.curve);
    EXPECT_EQ(slurp(*opt.curve_path), curve.str());
    runs[run][0] = slurp(*opt.checkpoint_path);
    runs[run][1] = slurp(*opt.curve_path);
  }
  EXPECT_EQ(runs[0][0], runs[1][0]);
  EXPECT_EQ(runs[0][1], runs[1][1]);
}

TEST(Training, CheckpointedModelReproducesReportedTestAccuracy) {
  const Dataset train_set = take_per_class(digits_train(), 5);
  const Dataset test_set = take_per_class(digits_test(), 5);
  auto model = tiny_caps(2);
  TrainOptions opt;
  opt.epochs = 1;
  opt.checkpoint_path = scratch("tiny.ckpt");
  const TrainResult r = train(*model, train_set, test_set, opt);
  const auto restored = instantiate(load_checkpoint(*opt.checkpoint_path));
  const Tensor dists = predict_distributions(*restored, test_set);
  EXPECT_DOUBLE_EQ(score(dists, labels_of(test_set, [&] {
                           std::vector<std::size_t> i(test_set.size());
                           for (std::size_t k = 0; k < i.size(); ++k) i[k] = k;
                           return i;
                         }()))
                       .accuracy,
                   r.curve[0].test_acc);
}

TEST(Training, NonFiniteLossNamesEpochAndBatch) {
  const Dataset train_set = take_per_class(digits_train(), 3);
  auto model = lenet();
  model->parameters()[0].tensor.mutable_data()[0] = std::nanf("");
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 8;
  try {
    train(*model, train_set, train_set, opt);
    FAIL() << "NaN loss accepted";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 1"), std::string::npos) << what;
    EXPECT_NE(what.find("batch 1"), std::string::npos) << what;
  }
}

TEST(Training, RejectsBadOptions) {
  const Dataset train_set = take_per_class(digits_train(), 3);
  auto model = lenet();
  TrainOptions opt;
  opt.epochs = 0;
  EXPECT_THROW(train(*model, train_set, train_set, opt), ContractError);
  opt.epochs = 1;
  opt.batch_size = 0;
  EXPECT_THROW(train(*model, train_set, train_set, opt), ContractError);
}

TEST(Training, SecondEpochLossBelowFirstOnDigitSubset) {
  const Dataset train_set = take_per_class(digits_train(), 50);
  ASSERT_EQ(train_set.size(), 500u);
  Rng rng(init_seed(1));
  CapsNetClassifier model(reduced_config(), rng);
  TrainOptions opt;
  opt.epochs = 2;
  opt.seed = 1;
  const TrainResult r = train(model, train_set, take_per_class(digits_test(), 2), opt);
  EXPECT_LT(r.curve[1].train_loss, r.curve[0].train_loss);
}
