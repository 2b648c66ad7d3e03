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
#include <fstream>
#include <iomanip>

#include <json.hpp>

#include "sherlock/eval.hpp"

namespace sherlock {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << std::setprecision(17);
  return os;
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.labels.size(); ++c) {
    per_class.push_back({{"label", r.labels[c]}, {"precision", r.precision[c]}, {"recall", r.recall[c]},
                         {"f1", r.f1[c]}});
  }
  return {{"total", r.total},
          {"accuracy", r.accuracy},
          {"macro_precision", r.macro_precision},
          {"macro_recall", r.macro_recall},
          {"macro_f1_harmonic", r.macro_f1_harmonic},
          {"macro_f1_classwise", r.macro_f1_classwise},
          {"per_class", per_class}};
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

void plot_line(ByteImage& img, double x0, double y0, double x1, double y1, double r, double g, double b) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const auto x = static_cast<Index>(std::lround(x0 + t * (x1 - x0)));
    const auto y = static_cast<Index>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
  }
}

}  // namespace

void write_metrics_json(const std::filesystem::path& path, const MetricsReport& report,
                        const std::optional<MetricsReport>& collapsed, const std::optional<double>& auc) {
  auto doc = to_json(report);
  if (auc) doc["auc"] = *auc;
  if (collapsed) doc["collapsed_binary"] = to_json(*collapsed);
  auto os = open_out(path);
  os << doc.dump(2) << '\n';
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  auto os = open_out(path);
  os << "actual\\predicted";
  for (const auto& l : cm.labels) os << ',' << csv_field(l);
  os << '\n';
  for (Index a = 0; a < cm.classes(); ++a) {
    os << csv_field(cm.labels[a]);
    for (Index p = 0; p < cm.classes(); ++p) os << ',' << cm.counts(a, p);
    os << '\n';
  }
}

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc) {
  auto os = open_out(path);
  os << "fpr,tpr,threshold\n";
  for (const auto& p : roc.points) {
    os << p.fpr << ',' << p.tpr << ',';
    if (std::isinf(p.threshold)) {
      os << "inf\n";
    } else {
      os << p.threshold << '\n';
    }
  }
}

void write_recon_csv(const std::filesystem::path& path, const ReconReport& report) {
  auto os = open_out(path);
  os << "class,mean_abs_error,n_images\n";
  for (const auto& c : report.classes) os << csv_field(c.label) << ',' << c.mean_abs_error << ',' << c.n_images << '\n';
}

void write_confusion_png(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  const Index C = cm.classes();
  const Index cell = std::max<Index>(1, 512 / std::max<Index>(C, 1));
  ByteImage img(C * cell, C * cell, 1, path.filename().string());
  for (Index a = 0; a < C; ++a) {
    const double row = static_cast<double>(cm.counts.row(a).sum());
    for (Index p = 0; p < C; ++p) {
      const double v = row > 0 ? static_cast<double>(cm.counts(a, p)) / row : 0.0;
      for (Index y = a * cell; y < (a + 1) * cell; ++y) {
        for (Index x = p * cell; x < (p + 1) * cell; ++x) img.at(y, x) = 1.0 - v;
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_png(img, path);
}

void write_roc_png(const std::filesystem::path& path, const RocCurve& roc) {
  constexpr Index kSize = 256, kMargin = 8;
  ByteImage img(kSize, kSize, 3, path.filename().string());
  img.pixels.setOnes();
  const double span = static_cast<double>(kSize - 1 - 2 * kMargin);
  auto px = [&](double fpr) { return kMargin + fpr * span; };
  auto py = [&](double tpr) { return kSize - 1 - kMargin - tpr * span; };
  plot_line(img, px(0), py(0), px(1), py(0), 0.0, 0.0, 0.0);
  plot_line(img, px(0), py(0), px(0), py(1), 0.0, 0.0, 0.0);
  plot_line(img, px(0), py(0), px(1), py(1), 0.7, 0.7, 0.7);
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto& a = roc.points[i - 1];
    const auto& b = roc.points[i];
    plot_line(img, px(a.fpr), py(a.tpr), px(b.fpr), py(b.tpr), 0.8, 0.1, 0.1);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_png(img, path);
}

}  // namespace sherlock
