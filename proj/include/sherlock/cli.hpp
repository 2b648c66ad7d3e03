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

// Command-line front end: dataset manifests, run configuration and the
// convert / pretrain / finetune / evaluate / detect / recon-eval commands.

#ifndef SHERLOCK_CLI_HPP_
#define SHERLOCK_CLI_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sherlock/classify.hpp"
#include "sherlock/eval.hpp"

namespace sherlock {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitMalicious = 2;

struct ManifestRow {
  std::string id;                    // image_path exactly as written
  std::filesystem::path image_path;  // resolved against the manifest directory
  std::string binary_label;
  std::string type_label;
  std::string family_label;
  std::string split;  // train | val | test

  const std::string& label(Task task) const;
};

/// CSV with header `image_path,binary_label,type_label,family_label,split`.
struct DatasetManifest {
  std::vector<ManifestRow> rows;

  /// Validates the header, split names, split disjointness and (optionally)
  /// that every image exists.
  static DatasetManifest load(const std::filesystem::path& path, bool check_paths = true);

  std::vector<const ManifestRow*> split(const std::string& name) const;
  /// Every fine label must be known to the hierarchy.
  void check_labels(const LabelHierarchy& hierarchy) const;
};

/// Flat key=value configuration. Every key can also be given as --<key>.
struct RunConfig {
  ViTConfig model = ViTConfig::tiny();
  ConversionConfig conversion;
  std::optional<double> lr;  // default depends on the command
  std::optional<double> beta1;
  std::optional<double> beta2;
  double weight_decay = 0.05;
  Index batch_size = 8;
  Index epochs = 1;
  Index max_steps = -1;
  double keep_ratio = kDefaultKeepRatio;
  double mask_ratio_eval = 0.75;
  Index n_masks_eval = 10;
  std::uint64_t seed = 0;
  Task task = Task::Binary;
  Index workers = 1;

  /// All recognized keys, `preset` first.
  static const std::vector<std::string>& keys();

  /// Throws std::invalid_argument for unknown keys or malformed values.
  /// `preset` = tiny | paper replaces every model field.
  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);
  void validate() const;

  AdamWOptions pretrain_adamw() const;
  AdamWOptions finetune_adamw() const;
};

/// Reads a manifest image and brings it to model geometry. The source id is
/// the manifest path string, which keys per-image random streams.
ByteImage load_model_image(const ManifestRow& row, const ViTConfig& cfg);

/// Entry point behind the `sherlock` executable. Returns the process exit
/// code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sherlock

#endif  // SHERLOCK_CLI_HPP_
