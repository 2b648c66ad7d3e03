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

#include "sherlock/vit.hpp"

#include <cmath>
#include <stdexcept>

namespace sherlock {

ViTConfig ViTConfig::base() {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.in_channels = 3;
  c.encoder_dim = 768;
  c.encoder_blocks = 12;
  c.heads = 12;
  c.mlp_ratio = 4;
  c.decoder_dim = 384;
  c.decoder_blocks = 4;
  return c;
}

ViTConfig ViTConfig::tiny() { return ViTConfig{}; }

void ViTConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("ViTConfig: " + what);
  };
  require(image_size > 0 && patch_size > 0, "image_size and patch_size must be positive");
  require(image_size % patch_size == 0, "image_size " + std::to_string(image_size) +
                                            " not divisible by patch_size " + std::to_string(patch_size));
  require(in_channels == 1 || in_channels == 3, "in_channels must be 1 or 3");
  require(heads > 0 && mlp_ratio > 0, "heads and mlp_ratio must be positive");
  require(encoder_blocks >= 0 && decoder_blocks >= 0, "block counts must be non-negative");
  require(encoder_dim > 0 && encoder_dim % heads == 0, "encoder_dim must be divisible by heads");
  require(decoder_dim > 0 && decoder_dim % heads == 0, "decoder_dim must be divisible by heads");
  require(encoder_dim % 4 == 0 && decoder_dim % 4 == 0, "embedding widths must be divisible by 4");
}

template <typename Scalar>
Linear<Scalar> Linear<Scalar>::init(Index in, Index out, Rng& rng) {
  Linear l;
  l.weight = Tensor<Scalar>::zeros({in, out}, true);
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (Index i = 0; i < l.weight.size(); ++i) {
    l.weight.mutable_data()[i] = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
  }
  l.bias = Tensor<Scalar>::zeros({out}, true);
  return l;
}

template <typename Scalar>
void Linear<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

template <typename Scalar>
LayerNormParams<Scalar> LayerNormParams<Scalar>::init(Index dim) {
  return {Tensor<Scalar>::constant({dim}, Scalar(1), true), Tensor<Scalar>::zeros({dim}, true)};
}

template <typename Scalar>
void LayerNormParams<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

template <typename Scalar>
BlockParams<Scalar> BlockParams<Scalar>::init(Index dim, Index mlp_ratio, Rng& rng) {
  BlockParams b;
  b.norm1 = LayerNormParams<Scalar>::init(dim);
  b.query = Linear<Scalar>::init(dim, dim, rng);
  b.key = Linear<Scalar>::init(dim, dim, rng);
  b.value = Linear<Scalar>::init(dim, dim, rng);
  b.proj = Linear<Scalar>::init(dim, dim, rng);
  b.norm2 = LayerNormParams<Scalar>::init(dim);
  b.fc1 = Linear<Scalar>::init(dim, dim * mlp_ratio, rng);
  b.fc2 = Linear<Scalar>::init(dim * mlp_ratio, dim, rng);
  return b;
}

template <typename Scalar>
void BlockParams<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  query.collect(out, prefix + ".attn.query");
  key.collect(out, prefix + ".attn.key");
  value.collect(out, prefix + ".attn.value");
  proj.collect(out, prefix + ".attn.proj");
  norm2.collect(out, prefix + ".norm2");
  fc1.collect(out, prefix + ".mlp.fc1");
  fc2.collect(out, prefix + ".mlp.fc2");
}

template <typename Scalar>
EncoderParams<Scalar> EncoderParams<Scalar>::init(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams p;
  p.patch_embed = Linear<Scalar>::init(cfg.patch_dim(), cfg.encoder_dim, rng);
  for (Index i = 0; i < cfg.encoder_blocks; ++i) {
    p.blocks.push_back(BlockParams<Scalar>::init(cfg.encoder_dim, cfg.mlp_ratio, rng));
  }
  p.norm = LayerNormParams<Scalar>::init(cfg.encoder_dim);
  if (cfg.use_class_token) p.class_token = Tensor<Scalar>::zeros({cfg.encoder_dim}, true);
  p.pos_table = pos_embed_2d<Scalar>(cfg.grid(), cfg.grid(), cfg.encoder_dim);
  return p;
}

template <typename Scalar>
ParameterList<Scalar> EncoderParams<Scalar>::parameters() const {
  ParameterList<Scalar> out;
  patch_embed.collect(out, "encoder.patch_embed");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(out, "encoder.blocks." + std::to_string(i));
  }
  norm.collect(out, "encoder.norm");
  if (class_token.defined()) out.push_back({"encoder.class_token", class_token, false});
  return out;
}

std::int64_t encoder_parameter_count(const ViTConfig& cfg) {
  const std::int64_t d = cfg.encoder_dim;
  const std::int64_t hidden = d * cfg.mlp_ratio;
  const std::int64_t block = 2 * d                 // norm1
                             + 4 * (d * d + d)     // query, key, value, proj
                             + 2 * d               // norm2
                             + (d * hidden + hidden) + (hidden * d + d);
  std::int64_t total = cfg.patch_dim() * d + d + cfg.encoder_blocks * block + 2 * d;
  if (cfg.use_class_token) total += d;
  return total;
}

template <typename Scalar>
Tensor<Scalar> patchify(const ByteImage& img, const ViTConfig& cfg) {
  if (img.width != cfg.image_size || img.height != cfg.image_size || img.channels != cfg.in_channels) {
    throw ShapeError("patchify: image is " + std::to_string(img.width) + "x" + std::to_string(img.height) + "x" +
                     std::to_string(img.channels) + ", model expects " + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.in_channels));
  }
  const Index g = cfg.grid(), ps = cfg.patch_size, c = cfg.in_channels;
  const Index n = g * g, p = cfg.patch_dim();
  typename Tensor<Scalar>::Array out(n * p);
  for (Index gy = 0; gy < g; ++gy) {
    for (Index gx = 0; gx < g; ++gx) {
      Scalar* dst = out.data() + (gy * g + gx) * p;
      for (Index ch = 0; ch < c; ++ch) {
        for (Index y = 0; y < ps; ++y) {
          for (Index x = 0; x < ps; ++x) {
            *dst++ = static_cast<Scalar>(img.at(gy * ps + y, gx * ps + x, ch));
          }
        }
      }
    }
  }
  return Tensor<Scalar>({n, p}, std::move(out));
}

template <typename Scalar>
ByteImage unpatchify(const Tensor<Scalar>& patches, const ViTConfig& cfg) {
  const Index g = cfg.grid(), ps = cfg.patch_size, c = cfg.in_channels;
  if (patches.rank() != 2 || patches.dim(0) != g * g || patches.dim(1) != cfg.patch_dim()) {
    throw ShapeError("unpatchify: got " + shape_str(patches.shape()) + ", expected [" + std::to_string(g * g) +
                     "," + std::to_string(cfg.patch_dim()) + "]");
  }
  ByteImage img(cfg.image_size, cfg.image_size, c);
  const Scalar* src = patches.data().data();
  for (Index gy = 0; gy < g; ++gy) {
    for (Index gx = 0; gx < g; ++gx) {
      for (Index ch = 0; ch < c; ++ch) {
        for (Index y = 0; y < ps; ++y) {
          for (Index x = 0; x < ps; ++x) img.at(gy * ps + y, gx * ps + x, ch) = static_cast<double>(*src++);
        }
      }
    }
  }
  return img;
}

template <typename Scalar>
Tensor<Scalar> patchify_batch(const std::vector<const ByteImage*>& images, const ViTConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("patchify_batch: empty batch");
  const Index n = cfg.num_patches(), p = cfg.patch_dim();
  typename Tensor<Scalar>::Array out(static_cast<Index>(images.size()) * n * p);
  for (std::size_t b = 0; b < images.size(); ++b) {
    out.segment(static_cast<Index>(b) * n * p, n * p) = patchify<Scalar>(*images[b], cfg).data();
  }
  return Tensor<Scalar>({static_cast<Index>(images.size()), n, p}, std::move(out));
}

template <typename Scalar>
Tensor<Scalar> pos_embed_2d(Index grid_h, Index grid_w, Index dim) {
  if (dim % 4 != 0) throw std::invalid_argument("pos_embed_2d: dim must be divisible by 4");
  const Index quarter = dim / 4;
  typename Tensor<Scalar>::Array table(grid_h * grid_w * dim);
  for (Index r = 0; r < grid_h; ++r) {
    for (Index c = 0; c < grid_w; ++c) {
      Scalar* row = table.data() + (r * grid_w + c) * dim;
      for (Index i = 0; i < quarter; ++i) {
        const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = static_cast<Scalar>(std::sin(r * omega));
        row[quarter + i] = static_cast<Scalar>(std::cos(r * omega));
        row[2 * quarter + i] = static_cast<Scalar>(std::sin(c * omega));
        row[3 * quarter + i] = static_cast<Scalar>(std::cos(c * omega));
      }
    }
  }
  return Tensor<Scalar>({grid_h * grid_w, dim}, std::move(table));
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Linear<Scalar>& l) {
  return add(matmul(x, l.weight), l.bias);
}

template <typename Scalar>
Tensor<Scalar> self_attention(const Tensor<Scalar>& x, const BlockParams<Scalar>& p, Index heads,
                              Tensor<Scalar>* weights) {
  if (x.rank() != 3) throw ShapeError("self_attention: expected [B,T,D], got " + shape_str(x.shape()));
  const Index B = x.dim(0), T = x.dim(1), D = x.dim(2);
  const Index hd = D / heads;
  auto split_heads = [&](const Tensor<Scalar>& t, std::vector<Index> perm) {
    return permute(reshape(t, {B, T, heads, hd}), std::move(perm));
  };
  const auto q = split_heads(linear(x, p.query), {0, 2, 1, 3});  // [B,H,T,hd]
  const auto kt = split_heads(linear(x, p.key), {0, 2, 3, 1});   // [B,H,hd,T]
  const auto v = split_heads(linear(x, p.value), {0, 2, 1, 3});
  const auto scores = scale(matmul(q, kt), static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd))));
  const auto attn = softmax(scores, -1);
  if (weights) *weights = attn;
  const auto mixed = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, T, D});
  return linear(mixed, p.proj);
}

template <typename Scalar>
Tensor<Scalar> block_forward(const Tensor<Scalar>& x, const BlockParams<Scalar>& p, Index heads) {
  const auto h = add(x, self_attention(layernorm(x, p.norm1.gamma, p.norm1.beta), p, heads));
  const auto m = linear(gelu(linear(layernorm(h, p.norm2.gamma, p.norm2.beta), p.fc1)), p.fc2);
  return add(h, m);
}

template <typename Scalar>
Tensor<Scalar> encoder_forward(const Tensor<Scalar>& tokens, const EncoderParams<Scalar>& params,
                               const ViTConfig& cfg) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.encoder_dim) {
    throw ShapeError("encoder_forward: tokens " + shape_str(tokens.shape()) + " do not have width " +
                     std::to_string(cfg.encoder_dim));
  }
  Tensor<Scalar> x = tokens;
  for (const auto& b : params.blocks) x = block_forward(x, b, cfg.heads);
  return layernorm(x, params.norm.gamma, params.norm.beta);
}

#define SHERLOCK_INSTANTIATE_VIT(S)                                                                      \
  template struct Linear<S>;                                                                             \
  template struct LayerNormParams<S>;                                                                    \
  template struct BlockParams<S>;                                                                        \
  template struct EncoderParams<S>;                                                                      \
  template Tensor<S> patchify<S>(const ByteImage&, const ViTConfig&);                                    \
  template ByteImage unpatchify<S>(const Tensor<S>&, const ViTConfig&);                                  \
  template Tensor<S> patchify_batch<S>(const std::vector<const ByteImage*>&, const ViTConfig&);          \
  template Tensor<S> pos_embed_2d<S>(Index, Index, Index);                                               \
  template Tensor<S> linear<S>(const Tensor<S>&, const Linear<S>&);                                      \
  template Tensor<S> self_attention<S>(const Tensor<S>&, const BlockParams<S>&, Index, Tensor<S>*);      \
  template Tensor<S> block_forward<S>(const Tensor<S>&, const BlockParams<S>&, Index);                   \
  template Tensor<S> encoder_forward<S>(const Tensor<S>&, const EncoderParams<S>&, const ViTConfig&);

SHERLOCK_INSTANTIATE_VIT(float)
SHERLOCK_INSTANTIATE_VIT(double)

}  // namespace sherlock
