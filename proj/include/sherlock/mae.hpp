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

// Masked-autoencoder pretraining.
//
// Data flow for one image: patchify -> keep the visible subset -> embed and
// add positions -> encoder -> project to decoder width -> scatter back into
// the full grid with a shared mask token at every hidden position -> add
// decoder positions -> decoder -> per-patch pixel regression. The loss is the
// mean squared error over hidden patches against per-patch standardized
// targets.

#ifndef SHERLOCK_MAE_HPP_
#define SHERLOCK_MAE_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "sherlock/checkpoint.hpp"
#include "sherlock/optim.hpp"
#include "sherlock/vit.hpp"

namespace sherlock {

inline constexpr double kDefaultKeepRatio = 0.25;
inline constexpr double kPatchNormEps = 1e-6;

struct MaskPlan {
  Index n_patches = 0;
  std::vector<Index> visible;  // sorted
  std::vector<Index> masked;   // sorted
  std::uint64_t seed = 0;

  bool operator==(const MaskPlan&) const = default;
};

/// Uniform sample of round(keep_ratio * n) visible patches without
/// replacement: partial Fisher-Yates over 0..n-1 driven by
/// std::mt19937_64(seed) with rejection-sampled bounded integers.
MaskPlan sample_mask(Index n_patches, double keep_ratio, std::uint64_t seed);

/// (x - mean) / (std + eps) along the last axis, population std. The result
/// is a constant (regression targets carry no gradient).
template <typename Scalar>
Tensor<Scalar> patch_normalize(const Tensor<Scalar>& target, double eps = kPatchNormEps);

template <typename Scalar>
struct DecoderParams {
  Linear<Scalar> embed;          // [encoder_dim, decoder_dim]
  Tensor<Scalar> mask_token;     // [decoder_dim]
  std::vector<BlockParams<Scalar>> blocks;
  LayerNormParams<Scalar> norm;
  Linear<Scalar> pred;           // [decoder_dim, patch_dim]
  Tensor<Scalar> pos_table;      // [num_patches, decoder_dim], fixed

  static DecoderParams init(const ViTConfig& cfg, Rng& rng);
  ParameterList<Scalar> parameters() const;
};

template <typename Scalar>
struct MaeParams {
  ViTConfig cfg;
  EncoderParams<Scalar> encoder;
  DecoderParams<Scalar> decoder;

  static MaeParams init(const ViTConfig& cfg, std::uint64_t seed);
  ParameterList<Scalar> parameters() const;
};

template <typename Scalar>
struct MaeOutput {
  Tensor<Scalar> reconstruction;  // [B, N, P], normalized-pixel space
  Tensor<Scalar> loss;            // scalar
  Index encoder_input_length = 0;
};

/// The patches that enter the encoder: [B, |visible|, P].
template <typename Scalar>
Tensor<Scalar> mae_encoder_input(const Tensor<Scalar>& patches, const std::vector<MaskPlan>& plans);

template <typename Scalar>
MaeOutput<Scalar> mae_forward(const std::vector<const ByteImage*>& images, const std::vector<MaskPlan>& plans,
                              const MaeParams<Scalar>& params);

template <typename Scalar>
MaeOutput<Scalar> mae_forward(const ByteImage& img, const MaskPlan& plan, const MaeParams<Scalar>& params);

/// Mean squared error over the masked rows of [B, N, P] tensors.
template <typename Scalar>
Tensor<Scalar> masked_mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& target,
                          const std::vector<MaskPlan>& plans);

/// Loss of a single-image prediction [N, P] against the standardized patches
/// of `target_img`.
template <typename Scalar>
Tensor<Scalar> recon_loss(const Tensor<Scalar>& pred, const ByteImage& target_img, const MaskPlan& plan,
                          const ViTConfig& cfg);

/// Composite: visible patches copied from `img`, masked patches filled with
/// `normalized_pred` [N, P] mapped back through each original patch's mean
/// and std, clipped to [0, 1].
ByteImage synthesize(const ByteImage& img, const MaskPlan& plan, const Eigen::MatrixXd& normalized_pred,
                     const ViTConfig& cfg);

template <typename Scalar>
ByteImage synthesize(const ByteImage& img, const MaskPlan& plan, const MaeParams<Scalar>& params);

struct LossRecord {
  Index epoch = 0;  // 1-based
  Index step = 0;   // 1-based, global
  double loss = 0.0;

  bool operator==(const LossRecord&) const = default;
};

struct PretrainOptions {
  AdamWOptions adamw{1.5e-4, 0.9, 0.95, 1e-8, 0.05};
  Index batch_size = 8;
  Index epochs = 1;
  Index max_steps = -1;  // stop early once reached; -1 = no limit
  double keep_ratio = kDefaultKeepRatio;
  std::uint64_t seed = 0;
  /// When set, mae_epoch<N>.ckpt is written after every epoch.
  std::filesystem::path checkpoint_dir;
  std::function<void(const LossRecord&)> on_step;
};

template <typename Scalar>
struct PretrainState {
  MaeParams<Scalar> params;
  AdamWState<Scalar> optimizer;
  Index epochs_done = 0;
  std::vector<LossRecord> trace;
  std::vector<double> epoch_means;
};

/// Shuffled minibatch AdamW training. Epoch e visits images in an order drawn
/// from derive_seed(seed, kShuffleStream, e); image i in epoch e is masked
/// with derive_seed(seed, e, i). Passing `resume` continues its trajectory.
template <typename Scalar>
PretrainState<Scalar> pretrain(const std::vector<ByteImage>& dataset, const ViTConfig& cfg,
                               const PretrainOptions& options, std::optional<PretrainState<Scalar>> resume = {});

template <typename Scalar>
void save_mae_checkpoint(const std::filesystem::path& path, const PretrainState<Scalar>& state,
                         const PretrainOptions& options);

template <typename Scalar>
PretrainState<Scalar> load_mae_checkpoint(const std::filesystem::path& path);

}  // namespace sherlock

#endif  // SHERLOCK_MAE_HPP_
