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

// Fine-tuned classifiers on top of the pretrained encoder: one linear head on
// the class token per task, class-rebalanced cross entropy, the >50%
// detection rule and label-hierarchy lookups from fine to binary labels.

#ifndef SHERLOCK_CLASSIFY_HPP_
#define SHERLOCK_CLASSIFY_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sherlock/mae.hpp"

namespace sherlock {

enum class Task { Binary, Type, Family };
enum class Verdict { Benign, Malicious };

Task parse_task(std::string_view s);
std::string_view to_string(Task t);
std::string_view to_string(Verdict v);
Verdict parse_verdict(std::string_view s);  // "malicious" | "benign"

inline constexpr const char* kBenignLabel = "benign";
inline constexpr const char* kMaliciousLabel = "malicious";

struct HierarchyRow {
  std::string family;
  std::string type;
  std::string binary;
};

/// Family and type labels with their binary verdicts, plus training-split
/// image counts per label.
struct LabelHierarchy {
  std::vector<std::string> families;  // first-appearance order
  std::vector<std::string> types;
  std::map<std::string, Verdict> family_to_binary;
  std::map<std::string, Verdict> type_to_binary;
  std::map<std::string, std::int64_t> class_counts;

  /// Validates: one row per family, consistent type verdicts, exactly one
  /// benign family and exactly one benign type.
  static LabelHierarchy from_rows(const std::vector<HierarchyRow>& rows);
  /// CSV with header `family,type,binary`.
  static LabelHierarchy load_csv(const std::filesystem::path& path);

  /// Ordered class labels of a task; binary is {benign, malicious}.
  std::vector<std::string> labels(Task task) const;
};

/// Coarse verdict for a fine label via the hierarchy lookup. Throws
/// std::out_of_range for unknown labels.
Verdict infer_coarse(const std::string& fine_label, const LabelHierarchy& hierarchy, Task fine_task);
/// Same lookup over types and families together. A label present in both
/// tables must map to the same verdict in each.
Verdict infer_coarse(const std::string& fine_label, const LabelHierarchy& hierarchy);

/// W_c = (1 - 0.999) / (1 - 0.999^n_c), no renormalization. Throws if any
/// n_c < 1.
double class_weight(std::int64_t count);
std::vector<double> class_weights(std::span<const std::int64_t> counts);
std::map<std::string, double> class_weights(const std::map<std::string, std::int64_t>& counts);

/// mean_i W[y_i] * -log softmax(logits_i)[y_i] over a [B, C] batch.
template <typename Scalar>
Tensor<Scalar> weighted_cross_entropy(const Tensor<Scalar>& logits, std::span<const Index> labels,
                                      std::span<const double> weights);

template <typename Scalar>
struct ClassifierModel {
  ViTConfig cfg;  // use_class_token is always set
  EncoderParams<Scalar> encoder;
  Linear<Scalar> head;  // [encoder_dim, C]
  Task task = Task::Binary;
  std::vector<std::string> labels;

  Index num_classes() const { return static_cast<Index>(labels.size()); }
  ParameterList<Scalar> parameters() const;

  /// Randomly initialized encoder with a zero class token and a fresh head.
  static ClassifierModel init(const ViTConfig& cfg, Task task, std::vector<std::string> labels,
                              std::uint64_t seed);
  /// Encoder values copied from `pretrained`; class token and head are new.
  static ClassifierModel from_pretrained(const MaeParams<Scalar>& pretrained, Task task,
                                         std::vector<std::string> labels, std::uint64_t seed);
};

/// [B, C] head logits read from the class token.
template <typename Scalar>
Tensor<Scalar> classifier_logits(const ClassifierModel<Scalar>& model, const std::vector<const ByteImage*>& images);

struct LabeledSet {
  std::vector<ByteImage> images;
  std::vector<Index> labels;
};

struct FinetuneOptions {
  AdamWOptions adamw{1e-4, 0.9, 0.999, 1e-8, 0.05};
  Index batch_size = 16;
  Index epochs = 1;
  Index max_steps = -1;
  std::uint64_t seed = 0;
  /// Evaluate training accuracy after every step and stop at 100%.
  bool stop_at_full_accuracy = false;
};

template <typename Scalar>
struct FinetuneResult {
  ClassifierModel<Scalar> model;
  std::vector<LossRecord> trace;
  std::vector<double> class_weights;
  /// Step after which every training image was classified correctly.
  std::optional<Index> steps_to_full_accuracy;
};

/// Fine-tunes every parameter end to end. With `pretrained == nullptr` the
/// encoder starts from random weights (baseline mode).
template <typename Scalar>
FinetuneResult<Scalar> finetune(const MaeParams<Scalar>* pretrained, const ViTConfig& cfg, const LabeledSet& data,
                                Task task, std::vector<std::string> labels, const FinetuneOptions& options);

/// Resizes to the model resolution with the Lanczos resampler and adapts
/// the channel count (gray <-> RGB). Images already at model geometry are
/// returned unchanged.
ByteImage prepare_image(const ByteImage& img, const ViTConfig& cfg);

/// Class probabilities for one image at model geometry. Throws ShapeError
/// otherwise; see prepare_image.
template <typename Scalar>
Eigen::VectorXd predict(const ClassifierModel<Scalar>& model, const ByteImage& img);

/// [B, C] probabilities, evaluated in chunks without recording gradients.
template <typename Scalar>
Eigen::MatrixXd predict_batch(const ClassifierModel<Scalar>& model, const std::vector<const ByteImage*>& images,
                              Index chunk = 32);

/// Malicious iff P(malicious) > 0.5. detect requires a binary model.
Verdict detect_from_probability(double p_malicious);
template <typename Scalar>
Verdict detect(const ClassifierModel<Scalar>& model, const ByteImage& img);

template <typename Scalar>
double training_accuracy(const ClassifierModel<Scalar>& model, const LabeledSet& data);

template <typename Scalar>
void save_classifier(const std::filesystem::path& path, const ClassifierModel<Scalar>& model);
template <typename Scalar>
ClassifierModel<Scalar> load_classifier(const std::filesystem::path& path);

}  // namespace sherlock

#endif  // SHERLOCK_CLASSIFY_HPP_
