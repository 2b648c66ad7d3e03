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

// Vision Transformer building blocks shared by pretraining and the
// classifiers: patch extraction, fixed 2-D sin/cos positions, pre-norm
// transformer blocks.

#ifndef SHERLOCK_VIT_HPP_
#define SHERLOCK_VIT_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "sherlock/byteplot.hpp"
#include "sherlock/optim.hpp"
#include "sherlock/random.hpp"
#include "sherlock/tensor.hpp"

namespace sherlock {

struct ViTConfig {
  Index image_size = 64;
  Index patch_size = 8;
  Index in_channels = 3;
  Index encoder_dim = 64;
  Index encoder_blocks = 4;
  Index heads = 4;
  Index mlp_ratio = 4;
  Index decoder_dim = 32;
  Index decoder_blocks = 2;
  bool use_class_token = false;

  /// ViT-B/16 at 224 pixels with a 384-wide, 4-block decoder.
  static ViTConfig base();
  /// Desk-scale default.
  static ViTConfig tiny();

  Index grid() const { return image_size / patch_size; }
  Index num_patches() const { return grid() * grid(); }
  Index patch_dim() const { return in_channels * patch_size * patch_size; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  bool operator==(const ViTConfig&) const = default;
};

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;  // [in, out]
  Tensor<Scalar> bias;    // [out]

  static Linear init(Index in, Index out, Rng& rng);
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
struct LayerNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;

  static LayerNormParams init(Index dim);
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
struct BlockParams {
  LayerNormParams<Scalar> norm1;
  Linear<Scalar> query, key, value, proj;
  LayerNormParams<Scalar> norm2;
  Linear<Scalar> fc1, fc2;

  static BlockParams init(Index dim, Index mlp_ratio, Rng& rng);
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
struct EncoderParams {
  Linear<Scalar> patch_embed;  // [patch_dim, encoder_dim]
  std::vector<BlockParams<Scalar>> blocks;
  LayerNormParams<Scalar> norm;
  Tensor<Scalar> class_token;  // [encoder_dim]; undefined unless use_class_token
  Tensor<Scalar> pos_table;    // [num_patches, encoder_dim], fixed

  static EncoderParams init(const ViTConfig& cfg, Rng& rng);
  ParameterList<Scalar> parameters() const;
};

/// Number of trainable encoder values for `cfg` (the positional table is
/// fixed and excluded; the class token is included when enabled).
std::int64_t encoder_parameter_count(const ViTConfig& cfg);

/// [N, P] patches, row-major over the patch grid; each patch is flattened
/// channel-major, then row-major within the patch.
template <typename Scalar>
Tensor<Scalar> patchify(const ByteImage& img, const ViTConfig& cfg);

/// Exact inverse of patchify. Values are copied verbatim (no clipping).
template <typename Scalar>
ByteImage unpatchify(const Tensor<Scalar>& patches, const ViTConfig& cfg);

/// Fixed sin/cos table: the first dim/2 columns encode the row index, the
/// rest the column index, each as [sin(p w_i), cos(p w_i)] with
/// w_i = 10000^(-i / (dim/4)).
template <typename Scalar>
Tensor<Scalar> pos_embed_2d(Index grid_h, Index grid_w, Index dim);

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Linear<Scalar>& l);

/// Multi-head self-attention on [B, T, D]. When `weights` is non-null it
/// receives the [B, H, T, T] attention matrix.
template <typename Scalar>
Tensor<Scalar> self_attention(const Tensor<Scalar>& x, const BlockParams<Scalar>& p, Index heads,
                              Tensor<Scalar>* weights = nullptr);

/// x + attn(LN(x)), then + MLP(LN(.)).
template <typename Scalar>
Tensor<Scalar> block_forward(const Tensor<Scalar>& x, const BlockParams<Scalar>& p, Index heads);

/// Runs every encoder block and the final norm over [B, T, encoder_dim].
template <typename Scalar>
Tensor<Scalar> encoder_forward(const Tensor<Scalar>& tokens, const EncoderParams<Scalar>& params,
                               const ViTConfig& cfg);

/// Stack a batch of images into [B, N, P] patches.
template <typename Scalar>
Tensor<Scalar> patchify_batch(const std::vector<const ByteImage*>& images, const ViTConfig& cfg);

}  // namespace sherlock

#endif  // SHERLOCK_VIT_HPP_
