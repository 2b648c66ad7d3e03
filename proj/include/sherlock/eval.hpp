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

// Evaluation: confusion matrices, macro-averaged metrics, ROC curves, the
// masked reconstruction-error protocol and report files.

#ifndef SHERLOCK_EVAL_HPP_
#define SHERLOCK_EVAL_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sherlock/mae.hpp"

namespace sherlock {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// counts(actual, predicted).
struct ConfusionMatrix {
  std::vector<std::string> labels;
  CountMatrix counts;

  Index classes() const { return counts.rows(); }
  std::int64_t total() const { return counts.sum(); }
};

ConfusionMatrix confusion(std::span<const Index> predicted, std::span<const Index> actual,
                          std::vector<std::string> labels);

/// Merges classes: class i of `cm` becomes class mapping[i] of the result.
ConfusionMatrix collapse(const ConfusionMatrix& cm, std::span<const Index> mapping,
                         std::vector<std::string> labels);

struct MetricsReport {
  std::vector<std::string> labels;
  std::int64_t total = 0;
  double accuracy = 0.0;
  std::vector<double> precision;  // per class; 0/0 counts as 0
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1_harmonic = 0.0;   // 2 MP MR / (MP + MR)
  double macro_f1_classwise = 0.0;  // mean of per-class F1
};

MetricsReport macro_metrics(const ConfusionMatrix& cm);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // score >= threshold counts as positive
};

struct RocCurve {
  std::vector<RocPoint> points;  // starts at (0, 0) with threshold +inf
  double auc = 0.0;
};

/// Threshold sweep over the unique scores, tied scores entering together,
/// trapezoidal area. `positive[i]` marks the positive class.
RocCurve roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// Fills the hidden patches of an image given a mask plan.
using Compositor = std::function<ByteImage(const ByteImage&, const MaskPlan&)>;

struct ReconClass {
  std::string label;
  std::vector<ByteImage> images;
};

struct ReconOptions {
  Index n_masks = 10;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
  Index workers = 1;
};

struct ReconClassResult {
  std::string label;
  double mean_abs_error = 0.0;
  Index n_images = 0;
};

struct ReconReport {
  std::vector<ReconClassResult> classes;
  double overall = 0.0;  // mean of the class means
};

/// Seed of mask `mask_index` for an image.
std::uint64_t recon_mask_seed(std::uint64_t seed, const std::string& source_id, Index mask_index);

/// Mean absolute per-pixel error of one composite against its original.
double mean_abs_error(const ByteImage& a, const ByteImage& b);

/// Per image: n_masks plans at 1 - mask_ratio visible, composite, mean
/// absolute error over every pixel, averaged over masks; then averaged over
/// each class. Images must already be at model geometry.
ReconReport recon_error_eval(const Compositor& compositor, const std::vector<ReconClass>& classes,
                             const ViTConfig& cfg, const ReconOptions& options = {});

template <typename Scalar>
Compositor mae_compositor(const MaeParams<Scalar>& params);

/// Hidden patches filled with their own mean (a zero prediction in
/// normalized space).
Compositor patch_mean_compositor(const ViTConfig& cfg);

// Reports.
void write_metrics_json(const std::filesystem::path& path, const MetricsReport& report,
                        const std::optional<MetricsReport>& collapsed = std::nullopt,
                        const std::optional<double>& auc = std::nullopt);
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm);
void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc);
void write_recon_csv(const std::filesystem::path& path, const ReconReport& report);
/// Row-normalized heat map, one square cell per class pair.
void write_confusion_png(const std::filesystem::path& path, const ConfusionMatrix& cm);
/// ROC polyline over the chance diagonal.
void write_roc_png(const std::filesystem::path& path, const RocCurve& roc);

}  // namespace sherlock

#endif  // SHERLOCK_EVAL_HPP_
