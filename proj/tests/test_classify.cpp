// Copyright 2026 The Sherlock Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include <gtest/gtest.h>

#include "support.hpp"

namespace sherlock {
namespace {

using testing::random_image;
using testing::random_tensor;

// W_2 and W_3 evaluated with 40-digit decimal arithmetic.
constexpr double kW2 = 0.50025012506253126563;
constexpr double kW3 = 0.33366688900003703702;

ViTConfig small_config() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.encoder_dim = 32;
  c.encoder_blocks = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 16;
  c.decoder_blocks = 1;
  return c;
}

LabelHierarchy toy_hierarchy() {
  return LabelHierarchy::from_rows({{"benign", "benign", "benign"},
                                    {"hiddad", "adware", "malicious"},
                                    {"ewind", "adware", "malicious"},
                                    {"zbot", "trojan", "malicious"},
                                    {"smsagent", "trojan", "malicious"}});
}

TEST(ClassWeights, ExactValues) {
  EXPECT_EQ(class_weight(1), 1.0);
  EXPECT_NEAR(class_weight(2), kW2, 1e-15);
  EXPECT_NEAR(class_weight(3), kW3, 1e-15);
  EXPECT_NEAR(class_weight(884000), 0.001, 1e-18);
}

TEST(ClassWeights, DecreasingInCount) {
  // Neighbouring counts differ by more than an ulp up to about n = 29000;
  // past n = 37400 the value stops changing.
  for (std::int64_t n = 1; n < 25000; ++n) ASSERT_GT(class_weight(n), class_weight(n + 1)) << n;
  for (std::int64_t n = 25000; n < 34000; n += 500) ASSERT_GT(class_weight(n), class_weight(n + 500)) << n;
  for (std::int64_t n = 1; n < 1000000; n += 997) ASSERT_GE(class_weight(n), class_weight(n + 997)) << n;
  EXPECT_DOUBLE_EQ(class_weight(40000), 0.001);
  EXPECT_EQ(class_weight(40000), class_weight(1000000));
}

TEST(ClassWeights, RejectsEmptyClasses) {
  EXPECT_THROW(class_weight(0), std::invalid_argument);
  const std::map<std::string, std::int64_t> counts{{"a", 3}, {"b", 0}};
  EXPECT_THROW(class_weights(counts), std::invalid_argument);
  const auto w = class_weights(std::map<std::string, std::int64_t>{{"a", 1}, {"b", 2}});
  EXPECT_EQ(w.at("a"), 1.0);
  EXPECT_NEAR(w.at("b"), kW2, 1e-15);
}

TEST(WeightedCrossEntropy, UniformLogitsGiveLogC) {
  const std::vector<Index> labels{0, 2, 4};
  const std::vector<double> w(5, 1.0);
  EXPECT_NEAR(weighted_cross_entropy(Tensord::zeros({3, 5}), labels, w).item(), std::log(5.0), 1e-12);
}

TEST(WeightedCrossEntropy, DoublingWeightDoublesSampleLoss) {
  Rng rng(1);
  const auto logits = random_tensor({1, 3}, rng, 1.0, false);
  const std::vector<Index> y{1};
  const double a = weighted_cross_entropy(logits, y, std::vector<double>{1, 1, 1}).item();
  const double b = weighted_cross_entropy(logits, y, std::vector<double>{1, 2, 1}).item();
  EXPECT_NEAR(b, 2.0 * a, 1e-12);
}

TEST(WeightedCrossEntropy, MatchesPerSampleBruteForce) {
  Rng rng(2);
  const auto logits = random_tensor({7, 4}, rng, 3.0, false);
  const std::vector<Index> y{0, 1, 2, 3, 3, 2, 0};
  const std::vector<double> w{0.3, 1.0, 2.5, 0.7};
  double total = 0.0;
  for (Index i = 0; i < 7; ++i) {
    double z = 0.0;
    for (Index c = 0; c < 4; ++c) z += std::exp(logits.data()[i * 4 + c]);
    total += w[static_cast<std::size_t>(y[i])] * -(logits.data()[i * 4 + y[i]] - std::log(z));
  }
  EXPECT_NEAR(weighted_cross_entropy(logits, y, w).item(), total / 7.0, 1e-12);
}

TEST(WeightedCrossEntropy, InvalidLabelThrows) {
  const std::vector<double> w(3, 1.0);
  EXPECT_THROW(weighted_cross_entropy(Tensord::zeros({1, 3}), std::vector<Index>{3}, w), std::out_of_range);
  EXPECT_THROW(weighted_cross_entropy(Tensord::zeros({1, 3}), std::vector<Index>{-1}, w), std::out_of_range);
}

TEST(Hierarchy, ValidationRules) {
  EXPECT_NO_THROW(toy_hierarchy());
  EXPECT_THROW(LabelHierarchy::from_rows({{"a", "x", "malicious"}, {"b", "y", "malicious"}}), std::invalid_argument);
  EXPECT_THROW(LabelHierarchy::from_rows({{"benign", "benign", "benign"}, {"b", "benign", "malicious"}}),
               std::invalid_argument);
  EXPECT_THROW(LabelHierarchy::from_rows({{"benign", "benign", "benign"}, {"benign", "benign", "benign"}}),
               std::invalid_argument);
  EXPECT_THROW(LabelHierarchy::from_rows({{"benign", "benign", "benign"}, {"good", "clean", "benign"}}),
               std::invalid_argument);
}

TEST(Hierarchy, LabelsPerTask) {
  const auto h = toy_hierarchy();
  EXPECT_EQ(h.labels(Task::Binary), (std::vector<std::string>{"benign", "malicious"}));
  EXPECT_EQ(h.labels(Task::Type), (std::vector<std::string>{"benign", "adware", "trojan"}));
  EXPECT_EQ(h.labels(Task::Family).size(), 5u);
}

TEST(Hierarchy, LoadsCsv) {
  const auto path = std::filesystem::temp_directory_path() / ("sherlock_h_" + std::to_string(::getpid()) + ".csv");
  std::ofstream(path) << "family,type,binary\nbenign,benign,benign\nzbot,trojan,malicious\n";
  const auto h = LabelHierarchy::load_csv(path);
  EXPECT_EQ(h.families.size(), 2u);
  EXPECT_EQ(h.type_to_binary.at("trojan"), Verdict::Malicious);
  std::ofstream(path) << "fam,type,binary\n";
  EXPECT_THROW(LabelHierarchy::load_csv(path), std::invalid_argument);
  std::filesystem::remove(path);
}

TEST(InferCoarse, Lookups) {
  const auto h = toy_hierarchy();
  EXPECT_EQ(infer_coarse("trojan", h, Task::Type), Verdict::Malicious);
  EXPECT_EQ(infer_coarse("benign", h, Task::Type), Verdict::Benign);
  EXPECT_EQ(infer_coarse("zbot", h, Task::Family), Verdict::Malicious);
  EXPECT_EQ(infer_coarse("benign", h), Verdict::Benign);
  EXPECT_EQ(infer_coarse("adware", h), Verdict::Malicious);
  EXPECT_THROW(infer_coarse("nope", h, Task::Family), std::out_of_range);
  EXPECT_THROW(infer_coarse("trojan", h, Task::Family), std::out_of_range);
  EXPECT_THROW(infer_coarse("nope", h), std::out_of_range);
}

TEST(Detect, StrictThreshold) {
  EXPECT_EQ(detect_from_probability(0.6), Verdict::Malicious);
  EXPECT_EQ(detect_from_probability(0.5), Verdict::Benign);
  EXPECT_EQ(detect_from_probability(0.4), Verdict::Benign);
  EXPECT_EQ(detect_from_probability(std::nextafter(0.5, 1.0)), Verdict::Malicious);
}

TEST(Classifier, InitFromPretrainedCopiesEncoderBitExactly) {
  const auto cfg = small_config();
  const auto mae = MaeParams<float>::init(cfg, 3);
  Rng rng(4);
  testing::randomize(mae.parameters(), rng);
  const auto m = ClassifierModel<float>::from_pretrained(mae, Task::Binary, {"benign", "malicious"}, 5);
  const auto src = mae.encoder.parameters();
  const auto dst = m.encoder.parameters();
  for (const auto& s : src) {
    auto it = std::find_if(dst.begin(), dst.end(), [&](const auto& d) { return d.name == s.name; });
    ASSERT_NE(it, dst.end()) << s.name;
    EXPECT_TRUE((it->tensor.data() == s.tensor.data()).all()) << s.name;
    EXPECT_NE(it->tensor.node(), s.tensor.node()) << "encoder must be a copy";
  }
  EXPECT_TRUE(m.cfg.use_class_token);
  EXPECT_EQ(m.encoder.class_token.data().abs().maxCoeff(), 0.0f);
  EXPECT_EQ(m.head.weight.shape(), (Shape{cfg.encoder_dim, 2}));
}

TEST(Classifier, NeedsTwoClasses) {
  EXPECT_THROW(ClassifierModel<float>::init(small_config(), Task::Type, {"only"}, 1), std::invalid_argument);
}

TEST(Classifier, ProbabilitiesFormASimplex) {
  const auto cfg = small_config();
  auto m = ClassifierModel<double>::init(cfg, Task::Type, {"a", "b", "c"}, 6);
  Rng rng(7);
  testing::randomize(m.parameters(), rng, 1.0);
  for (int i = 0; i < 5; ++i) {
    const auto img = random_image(16, 16, 3, rng);
    const auto p = predict(m, img);
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_LE(p.maxCoeff(), 1.0);
  }
}

TEST(Classifier, ArgmaxInvariantToLogitShift) {
  const auto cfg = small_config();
  auto m = ClassifierModel<double>::init(cfg, Task::Type, {"a", "b", "c"}, 8);
  Rng rng(9);
  testing::randomize(m.parameters(), rng, 1.0);
  const auto img = random_image(16, 16, 3, rng);
  const auto before = predict(m, img);
  m.head.bias.mutable_data() += 40.0;  // same constant on every logit
  const auto after = predict(m, img);
  Index a = 0, b = 0;
  before.maxCoeff(&a);
  after.maxCoeff(&b);
  EXPECT_EQ(a, b);
  EXPECT_LT((before - after).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Classifier, PredictRejectsWrongGeometry) {
  const auto m = ClassifierModel<double>::init(small_config(), Task::Binary, {"benign", "malicious"}, 1);
  Rng rng(10);
  const auto big = random_image(20, 20, 3, rng);
  EXPECT_THROW(predict(m, big), ShapeError);
  const auto fitted = prepare_image(big, m.cfg);
  EXPECT_EQ(fitted.width, 16);
  EXPECT_NO_THROW(predict(m, fitted));
  const auto gray = prepare_image(random_image(16, 16, 1, rng), m.cfg);
  EXPECT_EQ(gray.channels, 3);
}

TEST(Classifier, DetectEqualsThresholdedPredict) {
  auto m = ClassifierModel<double>::init(small_config(), Task::Binary, {"benign", "malicious"}, 11);
  Rng rng(12);
  testing::randomize(m.parameters(), rng, 1.5);
  for (int i = 0; i < 30; ++i) {
    const auto img = random_image(16, 16, 3, rng);
    const bool malicious = predict(m, img)[1] > 0.5;
    EXPECT_EQ(detect(m, img) == Verdict::Malicious, malicious);
  }
  const auto typed = ClassifierModel<double>::init(small_config(), Task::Type, {"a", "b"}, 1);
  EXPECT_THROW(detect(typed, random_image(16, 16, 3, rng)), std::invalid_argument);
}

FinetuneOptions fast_options(std::uint64_t seed) {
  FinetuneOptions o;
  o.adamw.lr = 1e-3;
  o.batch_size = 8;
  o.epochs = 100;
  o.max_steps = 200;
  o.seed = seed;
  o.stop_at_full_accuracy = true;
  return o;
}

TEST(Finetune, SameSeedSameHead) {
  const auto data = testing::toy_classification_set(8, 16, 1);
  auto o = fast_options(2);
  o.max_steps = 3;
  o.stop_at_full_accuracy = false;
  const auto a = finetune<float>(nullptr, small_config(), data, Task::Binary, {"benign", "malicious"}, o);
  const auto b = finetune<float>(nullptr, small_config(), data, Task::Binary, {"benign", "malicious"}, o);
  EXPECT_TRUE((a.model.head.weight.data() == b.model.head.weight.data()).all());
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.trace.size(), 3u);
}

TEST(Finetune, OverfitsToySetAndPredictsTrainingLabels) {
  const auto data = testing::toy_classification_set(20, 16, 3);
  const auto r = finetune<float>(nullptr, small_config(), data, Task::Binary, {"benign", "malicious"},
                                 fast_options(4));
  ASSERT_TRUE(r.steps_to_full_accuracy.has_value());
  EXPECT_LE(*r.steps_to_full_accuracy, 200);
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    Index arg = 0;
    predict(r.model, data.images[i]).maxCoeff(&arg);
    EXPECT_EQ(arg, data.labels[i]) << i;
  }
}

TEST(Finetune, ClassWeightsComeFromTrainingCounts) {
  auto data = testing::toy_classification_set(6, 16, 5);
  data.labels = {0, 1, 1, 1, 0, 1};
  auto o = fast_options(1);
  o.max_steps = 1;
  const auto r = finetune<float>(nullptr, small_config(), data, Task::Type, {"x", "y", "z"}, o);
  ASSERT_EQ(r.class_weights.size(), 3u);
  EXPECT_NEAR(r.class_weights[0], kW2, 1e-15);
  EXPECT_EQ(r.class_weights[1], class_weight(4));
  EXPECT_EQ(r.class_weights[2], 1.0);  // absent class
}

TEST(Finetune, LabelTaskMismatchThrows) {
  auto data = testing::toy_classification_set(4, 16, 6);
  const auto cfg = small_config();
  EXPECT_THROW(finetune<float>(nullptr, cfg, data, Task::Binary, {"malicious", "benign"}, fast_options(1)),
               std::invalid_argument);
  data.labels[0] = 5;
  EXPECT_THROW(finetune<float>(nullptr, cfg, data, Task::Type, {"a", "b"}, fast_options(1)), std::invalid_argument);
  auto other = cfg;
  other.encoder_dim = 16;
  const auto mae = MaeParams<float>::init(other, 1);
  data.labels[0] = 0;
  EXPECT_THROW(finetune<float>(&mae, cfg, data, Task::Type, {"a", "b"}, fast_options(1)), std::invalid_argument);
}

TEST(Finetune, PretrainedStartMatchesCheckpointBeforeStepZero) {
  const auto cfg = small_config();
  const auto data = testing::toy_classification_set(4, 16, 7);
  const auto mae = MaeParams<float>::init(cfg, 8);
  auto o = fast_options(1);
  o.max_steps = 0;
  const auto r = finetune<float>(&mae, cfg, data, Task::Binary, {"benign", "malicious"}, o);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_TRUE((r.model.encoder.patch_embed.weight.data() == mae.encoder.patch_embed.weight.data()).all());
  EXPECT_TRUE((r.model.encoder.blocks[1].fc1.weight.data() == mae.encoder.blocks[1].fc1.weight.data()).all());
}

TEST(Classifier, SaveLoadRoundtrip) {
  auto m = ClassifierModel<float>::init(small_config(), Task::Family, {"benign", "zbot", "ewind"}, 9);
  Rng rng(10);
  testing::randomize(m.parameters(), rng);
  const auto path = std::filesystem::temp_directory_path() / ("sherlock_c_" + std::to_string(::getpid()) + ".ckpt");
  save_classifier(path, m);
  const auto back = load_classifier<float>(path);
  EXPECT_EQ(back.task, Task::Family);
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_EQ(back.cfg, m.cfg);
  const auto img = random_image(16, 16, 3, rng);
  EXPECT_EQ(predict(back, img), predict(m, img));
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace sherlock
