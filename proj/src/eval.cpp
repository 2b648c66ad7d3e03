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

#include "sherlock/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace sherlock {

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

ConfusionMatrix confusion(std::span<const Index> predicted, std::span<const Index> actual,
                          std::vector<std::string> labels) {
  if (predicted.size() != actual.size()) throw std::invalid_argument("confusion: sequences differ in length");
  const Index C = static_cast<Index>(labels.size());
  if (C < 1) throw std::invalid_argument("confusion: no classes");
  ConfusionMatrix cm{std::move(labels), CountMatrix::Zero(C, C)};
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const Index p = predicted[i], a = actual[i];
    if (p < 0 || p >= C || a < 0 || a >= C) {
      throw std::out_of_range("confusion: class index out of range at sample " + std::to_string(i));
    }
    ++cm.counts(a, p);
  }
  return cm;
}

ConfusionMatrix collapse(const ConfusionMatrix& cm, std::span<const Index> mapping,
                         std::vector<std::string> labels) {
  if (static_cast<Index>(mapping.size()) != cm.classes()) throw std::invalid_argument("collapse: mapping size");
  const Index K = static_cast<Index>(labels.size());
  ConfusionMatrix out{std::move(labels), CountMatrix::Zero(K, K)};
  for (Index a = 0; a < cm.classes(); ++a) {
    for (Index p = 0; p < cm.classes(); ++p) {
      if (mapping[a] < 0 || mapping[a] >= K || mapping[p] < 0 || mapping[p] >= K) {
        throw std::out_of_range("collapse: mapping target out of range");
      }
      out.counts(mapping[a], mapping[p]) += cm.counts(a, p);
    }
  }
  return out;
}

MetricsReport macro_metrics(const ConfusionMatrix& cm) {
  const Index C = cm.classes();
  if (C == 0 || cm.total() <= 0) throw std::invalid_argument("macro_metrics: empty confusion matrix");
  if ((cm.counts.array() < 0).any()) throw std::invalid_argument("macro_metrics: negative count");
  MetricsReport r;
  r.labels = cm.labels;
  r.total = cm.total();
  r.accuracy = static_cast<double>(cm.counts.trace()) / static_cast<double>(r.total);
  const Eigen::VectorXd predicted = cm.counts.colwise().sum().cast<double>().transpose();
  const Eigen::VectorXd actual = cm.counts.rowwise().sum().cast<double>();
  for (Index c = 0; c < C; ++c) {
    const double tp = static_cast<double>(cm.counts(c, c));
    const double p = ratio(tp, predicted[c]);
    const double rc = ratio(tp, actual[c]);
    r.precision.push_back(p);
    r.recall.push_back(rc);
    r.f1.push_back(ratio(2.0 * p * rc, p + rc));
  }
  auto avg = [C](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / C; };
  r.macro_precision = avg(r.precision);
  r.macro_recall = avg(r.recall);
  r.macro_f1_harmonic = ratio(2.0 * r.macro_precision * r.macro_recall, r.macro_precision + r.macro_recall);
  r.macro_f1_classwise = avg(r.f1);
  return r;
}

RocCurve roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("roc_auc: scores and labels differ in length");
  const auto n_pos = std::count_if(positive.begin(), positive.end(), [](auto v) { return v != 0; });
  const auto n_neg = static_cast<std::int64_t>(positive.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc: both classes must be present");
  for (double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("roc_auc: NaN score");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (positive[order[i]] ? tp : fp) += 1;
    const RocPoint next{static_cast<double>(fp) / static_cast<double>(n_neg),
                        static_cast<double>(tp) / static_cast<double>(n_pos), s};
    const RocPoint& prev = roc.points.back();
    roc.auc += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) / 2.0;
    roc.points.push_back(next);
  }
  return roc;
}

std::uint64_t recon_mask_seed(std::uint64_t seed, const std::string& source_id, Index mask_index) {
  return derive_seed(seed, fnv1a(source_id), static_cast<std::uint64_t>(mask_index));
}

double mean_abs_error(const ByteImage& a, const ByteImage& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw ShapeError("mean_abs_error: image geometry differs");
  }
  return (a.pixels - b.pixels).abs().mean();
}

ReconReport recon_error_eval(const Compositor& compositor, const std::vector<ReconClass>& classes,
                             const ViTConfig& cfg, const ReconOptions& options) {
  if (options.n_masks < 1) throw std::invalid_argument("recon_error_eval: n_masks must be >= 1");
  if (!(options.mask_ratio > 0.0 && options.mask_ratio < 1.0)) {
    throw std::invalid_argument("recon_error_eval: mask_ratio must lie in (0, 1)");
  }
  if (classes.empty()) throw std::invalid_argument("recon_error_eval: no classes");
  std::vector<const ByteImage*> flat;
  for (const auto& c : classes) {
    if (c.images.empty()) throw std::invalid_argument("recon_error_eval: class '" + c.label + "' has no images");
    for (const auto& img : c.images) {
      if (img.width != cfg.image_size || img.height != cfg.image_size || img.channels != cfg.in_channels) {
        throw ShapeError("recon_error_eval: image " + img.source_id + " is not at model geometry");
      }
      flat.push_back(&img);
    }
  }

  const double keep = 1.0 - options.mask_ratio;
  std::vector<double> per_image(flat.size(), 0.0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < flat.size(); i = next++) {
      try {
        const ByteImage& img = *flat[i];
        double total = 0.0;
        for (Index m = 0; m < options.n_masks; ++m) {
          const auto plan = sample_mask(cfg.num_patches(), keep, recon_mask_seed(options.seed, img.source_id, m));
          total += mean_abs_error(compositor(img, plan), img);
        }
        per_image[i] = total / static_cast<double>(options.n_masks);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const Index workers = std::max<Index>(1, std::min<Index>(options.workers, static_cast<Index>(flat.size())));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (Index w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  ReconReport report;
  std::size_t k = 0;
  for (const auto& c : classes) {
    double sum = 0.0;
    for (std::size_t j = 0; j < c.images.size(); ++j) sum += per_image[k++];
    const Index n = static_cast<Index>(c.images.size());
    report.classes.push_back({c.label, sum / static_cast<double>(n), n});
    report.overall += report.classes.back().mean_abs_error;
  }
  report.overall /= static_cast<double>(report.classes.size());
  return report;
}

template <typename Scalar>
Compositor mae_compositor(const MaeParams<Scalar>& params) {
  return [&params](const ByteImage& img, const MaskPlan& plan) { return synthesize(img, plan, params); };
}

Compositor patch_mean_compositor(const ViTConfig& cfg) {
  return [cfg](const ByteImage& img, const MaskPlan& plan) {
    return synthesize(img, plan, Eigen::MatrixXd::Zero(cfg.num_patches(), cfg.patch_dim()), cfg);
  };
}

template Compositor mae_compositor<float>(const MaeParams<float>&);
template Compositor mae_compositor<double>(const MaeParams<double>&);

}  // namespace sherlock
