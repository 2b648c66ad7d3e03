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

#include "sherlock/mae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sherlock {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;     // "init"
constexpr std::uint64_t kShuffleStream = 0x73687566;  // "shuf"

std::vector<Index> shuffled_order(Index n, std::uint64_t seed) {
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(seed);
  for (Index i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  }
  return order;
}

void check_plan(const MaskPlan& plan, const ViTConfig& cfg) {
  if (plan.n_patches != cfg.num_patches()) {
    throw ShapeError("mask plan covers " + std::to_string(plan.n_patches) + " patches, model has " +
                     std::to_string(cfg.num_patches()));
  }
}

}  // namespace

MaskPlan sample_mask(Index n_patches, double keep_ratio, std::uint64_t seed) {
  if (!(keep_ratio > 0.0 && keep_ratio < 1.0)) {
    throw std::invalid_argument("sample_mask: keep_ratio must lie in (0, 1)");
  }
  const Index keep = static_cast<Index>(std::llround(keep_ratio * static_cast<double>(n_patches)));
  if (keep <= 0 || keep >= n_patches) {
    throw std::invalid_argument("sample_mask: keep_ratio " + std::to_string(keep_ratio) + " over " +
                                std::to_string(n_patches) + " patches leaves no visible or no masked patch");
  }
  std::vector<Index> perm(n_patches);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(seed);
  for (Index i = 0; i < keep; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n_patches - i)));
    std::swap(perm[i], perm[j]);
  }
  MaskPlan plan;
  plan.n_patches = n_patches;
  plan.seed = seed;
  plan.visible.assign(perm.begin(), perm.begin() + keep);
  plan.masked.assign(perm.begin() + keep, perm.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

template <typename Scalar>
Tensor<Scalar> patch_normalize(const Tensor<Scalar>& target, double eps) {
  const Index p = target.rank() == 0 ? 1 : target.dim(-1);
  if (p < 2) throw std::invalid_argument("patch_normalize: patches need at least 2 values");
  const auto rows = target.matrix().template cast<double>().array().eval();
  const Eigen::ArrayXd mu = rows.rowwise().mean();
  const Eigen::ArrayXXd centered = rows.colwise() - mu;
  const Eigen::ArrayXd sd = (centered.square().rowwise().sum() / static_cast<double>(p)).sqrt();
  const Eigen::ArrayXXd normalized = centered.colwise() / (sd + eps);
  typename Tensor<Scalar>::Array out(target.size());
  for (Index r = 0; r < normalized.rows(); ++r) {
    for (Index c = 0; c < p; ++c) out[r * p + c] = static_cast<Scalar>(normalized(r, c));
  }
  return Tensor<Scalar>(target.shape(), std::move(out));
}

template <typename Scalar>
DecoderParams<Scalar> DecoderParams<Scalar>::init(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  DecoderParams d;
  d.embed = Linear<Scalar>::init(cfg.encoder_dim, cfg.decoder_dim, rng);
  d.mask_token = Tensor<Scalar>::zeros({cfg.decoder_dim}, true);
  for (Index i = 0; i < cfg.decoder_dim; ++i) {
    d.mask_token.mutable_data()[i] = static_cast<Scalar>(rng.truncated_normal(0.02));
  }
  for (Index i = 0; i < cfg.decoder_blocks; ++i) {
    d.blocks.push_back(BlockParams<Scalar>::init(cfg.decoder_dim, cfg.mlp_ratio, rng));
  }
  d.norm = LayerNormParams<Scalar>::init(cfg.decoder_dim);
  d.pred = Linear<Scalar>::init(cfg.decoder_dim, cfg.patch_dim(), rng);
  d.pos_table = pos_embed_2d<Scalar>(cfg.grid(), cfg.grid(), cfg.decoder_dim);
  return d;
}

template <typename Scalar>
ParameterList<Scalar> DecoderParams<Scalar>::parameters() const {
  ParameterList<Scalar> out;
  embed.collect(out, "decoder.embed");
  out.push_back({"decoder.mask_token", mask_token, false});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, "decoder.blocks." + std::to_string(i));
  norm.collect(out, "decoder.norm");
  pred.collect(out, "decoder.pred");
  return out;
}

template <typename Scalar>
MaeParams<Scalar> MaeParams<Scalar>::init(const ViTConfig& cfg, std::uint64_t seed) {
  ViTConfig c = cfg;
  c.use_class_token = false;
  Rng rng(derive_seed(seed, kInitStream));
  MaeParams p;
  p.cfg = c;
  p.encoder = EncoderParams<Scalar>::init(c, rng);
  p.decoder = DecoderParams<Scalar>::init(c, rng);
  return p;
}

template <typename Scalar>
ParameterList<Scalar> MaeParams<Scalar>::parameters() const {
  auto out = encoder.parameters();
  auto dec = decoder.parameters();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

template <typename Scalar>
Tensor<Scalar> mae_encoder_input(const Tensor<Scalar>& patches, const std::vector<MaskPlan>& plans) {
  std::vector<std::vector<Index>> visible;
  visible.reserve(plans.size());
  for (const auto& p : plans) visible.push_back(p.visible);
  return batch_gather(patches, visible);
}

template <typename Scalar>
Tensor<Scalar> masked_mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& target,
                          const std::vector<MaskPlan>& plans) {
  if (pred.shape() != target.shape() || pred.rank() != 3 || static_cast<Index>(plans.size()) != pred.dim(0)) {
    throw ShapeError("masked_mse: prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()) + " with " + std::to_string(plans.size()) + " plans");
  }
  const Index B = pred.dim(0), N = pred.dim(1), P = pred.dim(2);
  Index masked_total = 0;
  for (const auto& p : plans) masked_total += static_cast<Index>(p.masked.size());
  const Scalar w = Scalar(1) / static_cast<Scalar>(masked_total * P);
  typename Tensor<Scalar>::Array weights = Tensor<Scalar>::Array::Zero(B * N * P);
  for (Index b = 0; b < B; ++b) {
    for (Index n : plans[b].masked) weights.segment((b * N + n) * P, P).setConstant(w);
  }
  const Tensor<Scalar> mask({B, N, P}, std::move(weights));
  const auto diff = sub(pred, target);
  return sum(mul(mul(diff, diff), mask));
}

template <typename Scalar>
Tensor<Scalar> recon_loss(const Tensor<Scalar>& pred, const ByteImage& target_img, const MaskPlan& plan,
                          const ViTConfig& cfg) {
  check_plan(plan, cfg);
  const auto target = patch_normalize(patchify<Scalar>(target_img, cfg));
  if (pred.shape() != target.shape()) {
    throw ShapeError("recon_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  const Shape batched{1, target.dim(0), target.dim(1)};
  return masked_mse(reshape(pred, batched), reshape(target, batched), {plan});
}

template <typename Scalar>
MaeOutput<Scalar> mae_forward(const std::vector<const ByteImage*>& images, const std::vector<MaskPlan>& plans,
                              const MaeParams<Scalar>& params) {
  const ViTConfig& cfg = params.cfg;
  if (images.size() != plans.size() || images.empty()) {
    throw std::invalid_argument("mae_forward: need one mask plan per image");
  }
  const Index B = static_cast<Index>(images.size());
  const Index N = cfg.num_patches();
  const Index V = static_cast<Index>(plans.front().visible.size());
  for (const auto& p : plans) {
    check_plan(p, cfg);
    if (static_cast<Index>(p.visible.size()) != V) throw ShapeError("mae_forward: plans differ in visible count");
  }

  const auto patches = patchify_batch<Scalar>(images, cfg);  // [B,N,P]
  const auto visible = mae_encoder_input(patches, plans);     // [B,V,P]

  // Positions of the visible patches, [B,V,D].
  const Index D = cfg.encoder_dim;
  typename Tensor<Scalar>::Array pos(B * V * D);
  for (Index b = 0; b < B; ++b) {
    for (Index j = 0; j < V; ++j) {
      pos.segment((b * V + j) * D, D) = params.encoder.pos_table.data().segment(plans[b].visible[j] * D, D);
    }
  }
  auto x = add(linear(visible, params.encoder.patch_embed), Tensor<Scalar>({B, V, D}, std::move(pos)));
  x = encoder_forward(x, params.encoder, cfg);

  // Back to the full grid: [visible..., mask tokens...] then undo the shuffle.
  const Index Dd = cfg.decoder_dim;
  const auto y = linear(x, params.decoder.embed);
  const auto tokens = add(Tensor<Scalar>::zeros({B, N - V, Dd}), params.decoder.mask_token);
  std::vector<std::vector<Index>> restore(B, std::vector<Index>(N));
  for (Index b = 0; b < B; ++b) {
    Index slot = 0;
    for (Index n : plans[b].visible) restore[b][n] = slot++;
    for (Index n : plans[b].masked) restore[b][n] = slot++;
  }
  auto z = batch_gather(concat<Scalar>({y, tokens}, 1), restore);
  z = add(z, params.decoder.pos_table);
  for (const auto& blk : params.decoder.blocks) z = block_forward(z, blk, cfg.heads);
  z = layernorm(z, params.decoder.norm.gamma, params.decoder.norm.beta);
  const auto pred = linear(z, params.decoder.pred);

  MaeOutput<Scalar> out;
  out.reconstruction = pred;
  out.loss = masked_mse(pred, patch_normalize(patches), plans);
  out.encoder_input_length = visible.dim(1);
  return out;
}

template <typename Scalar>
MaeOutput<Scalar> mae_forward(const ByteImage& img, const MaskPlan& plan, const MaeParams<Scalar>& params) {
  return mae_forward<Scalar>(std::vector<const ByteImage*>{&img}, std::vector<MaskPlan>{plan}, params);
}

ByteImage synthesize(const ByteImage& img, const MaskPlan& plan, const Eigen::MatrixXd& normalized_pred,
                     const ViTConfig& cfg) {
  check_plan(plan, cfg);
  const auto original = patchify<double>(img, cfg);
  const Index P = cfg.patch_dim();
  if (normalized_pred.rows() != cfg.num_patches() || normalized_pred.cols() != P) {
    throw ShapeError("synthesize: prediction has wrong shape");
  }
  auto out = original.data();
  for (Index n : plan.masked) {
    const Eigen::ArrayXd patch = original.data().segment(n * P, P);
    const double mu = patch.mean();
    const double sd = std::sqrt((patch - mu).square().sum() / static_cast<double>(P));
    for (Index c = 0; c < P; ++c) {
      out[n * P + c] = std::clamp(normalized_pred(n, c) * (sd + kPatchNormEps) + mu, 0.0, 1.0);
    }
  }
  ByteImage result = unpatchify(Tensor<double>(original.shape(), std::move(out)), cfg);
  result.source_id = img.source_id;
  return result;
}

template <typename Scalar>
ByteImage synthesize(const ByteImage& img, const MaskPlan& plan, const MaeParams<Scalar>& params) {
  NoGradGuard no_grad;
  const auto out = mae_forward(img, plan, params);
  const Index N = params.cfg.num_patches(), P = params.cfg.patch_dim();
  Eigen::MatrixXd pred(N, P);
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < P; ++c) pred(n, c) = static_cast<double>(out.reconstruction.data()[n * P + c]);
  }
  return synthesize(img, plan, pred, params.cfg);
}

template <typename Scalar>
PretrainState<Scalar> pretrain(const std::vector<ByteImage>& dataset, const ViTConfig& cfg,
                               const PretrainOptions& options, std::optional<PretrainState<Scalar>> resume) {
  if (dataset.empty()) throw std::invalid_argument("pretrain: empty dataset");
  if (options.batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  cfg.validate();
  PretrainState<Scalar> state =
      resume ? std::move(*resume) : PretrainState<Scalar>{MaeParams<Scalar>::init(cfg, options.seed), {}, 0, {}, {}};
  ViTConfig expected = cfg;
  expected.use_class_token = false;
  if (!(state.params.cfg == expected)) {
    throw std::invalid_argument("pretrain: resume checkpoint was trained with a different model config");
  }
  auto params = state.params.parameters();
  const Index n = static_cast<Index>(dataset.size());
  const Index N = cfg.num_patches();

  for (Index epoch = state.epochs_done; epoch < options.epochs; ++epoch) {
    if (options.max_steps >= 0 && state.optimizer.step >= options.max_steps) break;
    const auto order = shuffled_order(n, derive_seed(options.seed, kShuffleStream, epoch));
    double epoch_total = 0.0;
    Index epoch_batches = 0;
    for (Index start = 0; start < n; start += options.batch_size) {
      if (options.max_steps >= 0 && state.optimizer.step >= options.max_steps) break;
      const Index stop = std::min(n, start + options.batch_size);
      std::vector<const ByteImage*> batch;
      std::vector<MaskPlan> plans;
      for (Index k = start; k < stop; ++k) {
        const Index i = order[k];
        batch.push_back(&dataset[i]);
        plans.push_back(sample_mask(N, options.keep_ratio, derive_seed(options.seed, epoch, i)));
      }
      zero_grad(params);
      const auto out = mae_forward(batch, plans, state.params);
      const double loss = static_cast<double>(out.loss.item());
      if (!std::isfinite(loss)) {
        throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(state.optimizer.step + 1));
      }
      backward(out.loss);
      adamw_step(params, state.optimizer, options.adamw);
      const LossRecord rec{epoch + 1, static_cast<Index>(state.optimizer.step), loss};
      state.trace.push_back(rec);
      if (options.on_step) options.on_step(rec);
      epoch_total += loss;
      ++epoch_batches;
    }
    if (epoch_batches == 0) break;
    state.epoch_means.push_back(epoch_total / static_cast<double>(epoch_batches));
    state.epochs_done = epoch + 1;
    if (!options.checkpoint_dir.empty()) {
      std::filesystem::create_directories(options.checkpoint_dir);
      save_mae_checkpoint(options.checkpoint_dir / ("mae_epoch" + std::to_string(epoch + 1) + ".ckpt"), state,
                          options);
    }
  }
  return state;
}

template <typename Scalar>
void save_mae_checkpoint(const std::filesystem::path& path, const PretrainState<Scalar>& state,
                         const PretrainOptions& options) {
  Checkpoint ckpt;
  ckpt.set("kind", "mae");
  put_config(ckpt, state.params.cfg);
  ckpt.set("epochs_done", std::to_string(state.epochs_done));
  ckpt.set("seed", std::to_string(options.seed));
  ckpt.set("keep_ratio", std::to_string(options.keep_ratio));
  const auto params = state.params.parameters();
  put_parameters(ckpt, params);
  put_optimizer(ckpt, params, state.optimizer);
  write_checkpoint(path, ckpt);
}

template <typename Scalar>
PretrainState<Scalar> load_mae_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (ckpt.get("kind") != "mae") throw CheckpointError(path.string() + " is not a pretraining checkpoint");
  PretrainState<Scalar> state;
  state.params = MaeParams<Scalar>::init(get_config(ckpt), 0);
  auto params = state.params.parameters();
  load_parameters(ckpt, params);
  state.optimizer = load_optimizer(ckpt, params);
  state.epochs_done = std::stoll(ckpt.get("epochs_done"));
  return state;
}

#define SHERLOCK_INSTANTIATE_MAE(S)                                                                           \
  template Tensor<S> patch_normalize<S>(const Tensor<S>&, double);                                            \
  template struct DecoderParams<S>;                                                                           \
  template struct MaeParams<S>;                                                                               \
  template Tensor<S> mae_encoder_input<S>(const Tensor<S>&, const std::vector<MaskPlan>&);                    \
  template MaeOutput<S> mae_forward<S>(const std::vector<const ByteImage*>&, const std::vector<MaskPlan>&,    \
                                       const MaeParams<S>&);                                                  \
  template MaeOutput<S> mae_forward<S>(const ByteImage&, const MaskPlan&, const MaeParams<S>&);               \
  template Tensor<S> masked_mse<S>(const Tensor<S>&, const Tensor<S>&, const std::vector<MaskPlan>&);         \
  template Tensor<S> recon_loss<S>(const Tensor<S>&, const ByteImage&, const MaskPlan&, const ViTConfig&);    \
  template ByteImage synthesize<S>(const ByteImage&, const MaskPlan&, const MaeParams<S>&);                   \
  template PretrainState<S> pretrain<S>(const std::vector<ByteImage>&, const ViTConfig&,                      \
                                        const PretrainOptions&, std::optional<PretrainState<S>>);             \
  template void save_mae_checkpoint<S>(const std::filesystem::path&, const PretrainState<S>&,                 \
                                       const PretrainOptions&);                                               \
  template PretrainState<S> load_mae_checkpoint<S>(const std::filesystem::path&);

SHERLOCK_INSTANTIATE_MAE(float)
SHERLOCK_INSTANTIATE_MAE(double)

}  // namespace sherlock
