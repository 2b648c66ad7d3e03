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

// SHLK1 checkpoint files.
//
//   SHLK1\n
//   key=value\n            (any number; config and metadata)
//   tensors=<count>\n
//   <name> <d0,d1,...> <byte offset>\n   (one per tensor, "-" for rank 0)
//   end\n
//   <payload: little-endian float32 arrays in manifest order>
//
// Offsets are relative to the first payload byte.

#ifndef SHERLOCK_CHECKPOINT_HPP_
#define SHERLOCK_CHECKPOINT_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sherlock/optim.hpp"
#include "sherlock/vit.hpp"

namespace sherlock {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<CheckpointTensor> tensors;

  void set(const std::string& key, const std::string& value);
  std::optional<std::string> find(const std::string& key) const;
  /// Throws CheckpointError when missing.
  std::string get(const std::string& key) const;
  const CheckpointTensor* tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void put_config(Checkpoint& ckpt, const ViTConfig& cfg);
ViTConfig get_config(const Checkpoint& ckpt);

/// Appends each parameter under `prefix + name`.
template <typename Scalar>
void put_parameters(Checkpoint& ckpt, const ParameterList<Scalar>& params, const std::string& prefix = {});

/// Copies values into existing tensors; every parameter must be present with
/// a matching shape.
template <typename Scalar>
void load_parameters(const Checkpoint& ckpt, ParameterList<Scalar>& params, const std::string& prefix = {});

/// Adam moments are stored as "<tag>.m.<name>" / "<tag>.v.<name>".
template <typename Scalar>
void put_optimizer(Checkpoint& ckpt, const ParameterList<Scalar>& params, const AdamWState<Scalar>& state,
                   const std::string& tag = "opt");
template <typename Scalar>
AdamWState<Scalar> load_optimizer(const Checkpoint& ckpt, const ParameterList<Scalar>& params,
                                  const std::string& tag = "opt");

}  // namespace sherlock

#endif  // SHERLOCK_CHECKPOINT_HPP_
