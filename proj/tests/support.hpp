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

// Shared fixtures for the unit tests and the acceptance runner.

#ifndef SHERLOCK_TESTS_SUPPORT_HPP_
#define SHERLOCK_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sherlock/classify.hpp"
#include "sherlock/dex.hpp"
#include "sherlock/eval.hpp"
#include "sherlock/mae.hpp"

namespace sherlock::testing {

// ---------------------------------------------------------------------------
// Finite-difference gradient checks.

/// Central-difference step and the denominator floor of the relative error
/// |a - n| / max(|a|, |n|, floor).
inline constexpr double kFdStep = 1e-4;
inline constexpr double kFdFloor = 1e-6;
inline constexpr double kFdTolerance = 1e-4;

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  Index probes = 0;
};

/// Compares the tape gradients of `f` with respect to `inputs` against
/// central differences at `probes` random coordinates.
inline GradCheckResult check_gradients(const std::string& name, const std::function<Tensord()>& f,
                                       std::vector<Tensord> inputs, Index probes, std::uint64_t seed) {
  for (auto& t : inputs) t.zero_grad();
  const auto loss = f();
  backward(loss);
  std::vector<Eigen::ArrayXd> analytic;
  for (const auto& t : inputs) analytic.push_back(t.has_grad() ? t.grad() : Eigen::ArrayXd::Zero(t.size()));

  Rng rng(seed);
  GradCheckResult r{name, 0.0, probes};
  NoGradGuard no_grad;
  for (Index p = 0; p < probes; ++p) {
    const auto which = static_cast<std::size_t>(rng.below(inputs.size()));
    auto& t = inputs[which];
    const auto i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(t.size())));
    const double saved = t.data()[i];
    t.mutable_data()[i] = saved + kFdStep;
    const double up = f().item();
    t.mutable_data()[i] = saved - kFdStep;
    const double down = f().item();
    t.mutable_data()[i] = saved;
    const double numeric = (up - down) / (2.0 * kFdStep);
    const double a = analytic[which][i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFdFloor});
    r.max_rel_error = std::max(r.max_rel_error, rel);
  }
  return r;
}

inline Tensord random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  const Index n = numel(shape);
  Eigen::ArrayXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return Tensord(std::move(shape), std::move(v), requires_grad);
}

/// Replaces every trainable value with a random draw so that zero-initialized
/// residual projections do not hide gradient paths.
template <typename Scalar>
void randomize(const ParameterList<Scalar>& params, Rng& rng, double scale = 0.3) {
  for (auto p : params) {
    auto& d = p.tensor.mutable_data();
    for (Index i = 0; i < d.size(); ++i) d[i] = static_cast<Scalar>(scale * rng.normal());
    if (p.name.find("norm") != std::string::npos && p.name.find("gamma") != std::string::npos) d += Scalar(1);
  }
}

/// Small double-precision config used by full-model gradient checks.
inline ViTConfig gradcheck_config() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.in_channels = 3;
  c.encoder_dim = 8;
  c.encoder_blocks = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 8;
  c.decoder_blocks = 1;
  return c;
}

inline ByteImage random_image(Index w, Index h, Index c, Rng& rng, const std::string& id = "img") {
  ByteImage img(w, h, c, id);
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = rng.uniform();
  return img;
}

/// The full gradient suite: every primitive, one encoder block and the MAE
/// loss. Each entry runs at least `probes` probes.
inline std::vector<GradCheckResult> gradient_suite(Index probes = 120, std::uint64_t seed = 7) {
  std::vector<GradCheckResult> out;
  Rng rng(seed);
  auto weighted = [&rng](Shape s) { return random_tensor(std::move(s), rng, 1.0, false); };
  auto run = [&](const std::string& name, std::vector<Tensord> inputs, std::function<Tensord()> op) {
    out.push_back(check_gradients(name, op, std::move(inputs), probes, derive_seed(seed, fnv1a(name))));
  };

  {
    auto a = random_tensor({3, 4, 5}, rng), b = random_tensor({4, 5}, rng);
    auto r = weighted({3, 4, 5});
    run("add", {a, b}, [=] { return sum(mul(add(a, b), r)); });
    run("sub", {a, b}, [=] { return sum(mul(sub(a, b), r)); });
    run("mul", {a, b}, [=] { return sum(mul(mul(a, b), r)); });
    run("scale", {a}, [=] { return sum(mul(scale(a, 0.7), r)); });
    run("sum", {a}, [=] { return sum(a); });
    run("mean", {a}, [=] { return mean(mul(a, a)); });
  }
  {
    auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({2, 4, 5}, rng);
    auto r = weighted({2, 3, 5});
    run("matmul", {a, b}, [=] { return sum(mul(matmul(a, b), r)); });
    run("matmul_batched", {a, c}, [=] { return sum(mul(matmul(a, c), r)); });
  }
  {
    auto x = random_tensor({2, 3, 4}, rng);
    auto r1 = weighted({4, 6}), r2 = weighted({4, 2, 3}), r3 = weighted({2, 4, 3});
    run("reshape", {x}, [=] { return sum(mul(reshape(x, {4, 6}), r1)); });
    run("permute", {x}, [=] { return sum(mul(permute(x, {2, 0, 1}), r2)); });
    run("transpose", {x}, [=] { return sum(mul(transpose(x), r3)); });
  }
  {
    auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 2, 4}, rng);
    auto r = weighted({2, 5, 4}), rs = weighted({2, 3, 4}), rg = weighted({2, 3, 4});
    run("concat", {a, b}, [=] { return sum(mul(concat<double>({a, b}, 1), r)); });
    run("index_select", {a}, [=] { return sum(mul(index_select(a, 1, {2, 0, 2}), rs)); });
    run("batch_gather", {a}, [=] { return sum(mul(batch_gather(a, {{1, 1, 0}, {2, 0, 1}}), rg)); });
  }
  {
    auto x = random_tensor({3, 4, 6}, rng);
    auto g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    auto r = weighted({3, 4, 6}), r0 = weighted({3, 4, 6});
    run("softmax", {x}, [=] { return sum(mul(softmax(x), r)); });
    run("softmax_axis0", {x}, [=] { return sum(mul(softmax(x, 0), r0)); });
    run("layernorm", {x, g, b}, [=] { return sum(mul(layernorm(x, g, b), r)); });
    run("gelu", {x}, [=] { return sum(mul(gelu(x), r)); });
  }
  {
    auto logits = random_tensor({5, 4}, rng);
    const std::vector<Index> labels{0, 3, 1, 3, 2};
    const std::vector<double> w{1.0, 0.5, 2.0, 0.25};
    run("weighted_cross_entropy", {logits}, [=] { return weighted_cross_entropy(logits, labels, w); });
  }
  {
    const auto cfg = gradcheck_config();
    Rng init(derive_seed(seed, 11));
    auto blk = BlockParams<double>::init(cfg.encoder_dim, cfg.mlp_ratio, init);
    ParameterList<double> params;
    blk.collect(params, "block");
    randomize(params, rng);
    auto x = random_tensor({2, 5, cfg.encoder_dim}, rng);
    auto r = weighted({2, 5, cfg.encoder_dim});
    std::vector<Tensord> inputs{x};
    for (const auto& p : params) inputs.push_back(p.tensor);
    run("encoder_block", inputs, [=] { return sum(mul(block_forward(x, blk, cfg.heads), r)); });
  }
  {
    const auto cfg = gradcheck_config();
    auto model = MaeParams<double>::init(cfg, seed);
    const auto params = model.parameters();
    randomize(params, rng);
    std::vector<ByteImage> images{random_image(8, 8, 3, rng, "a"), random_image(8, 8, 3, rng, "b")};
    const std::vector<const ByteImage*> batch{&images[0], &images[1]};
    const std::vector<MaskPlan> plans{sample_mask(cfg.num_patches(), 0.25, 1), sample_mask(cfg.num_patches(), 0.25, 2)};
    std::vector<Tensord> inputs;
    for (const auto& p : params) inputs.push_back(p.tensor);
    run("mae_loss", inputs, [=] { return mae_forward(batch, plans, model).loss; });
  }
  return out;
}

// ---------------------------------------------------------------------------
// DEX fixtures.

inline void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) b[at + k] = static_cast<std::uint8_t>((v >> (8 * k)) & 0xff);
}

/// A bare DEX header with magic, header_size and endian tag; every table
/// empty. Further tables are declared with put_u32 at their (size, off)
/// fields.
inline std::vector<std::uint8_t> dex_skeleton(std::size_t file_size) {
  std::vector<std::uint8_t> b(file_size, 0);
  const char magic[8] = {'d', 'e', 'x', '\n', '0', '3', '5', '\0'};
  std::copy(magic, magic + 8, b.begin());
  put_u32(b, 32, static_cast<std::uint32_t>(file_size));
  put_u32(b, 36, 0x70);
  put_u32(b, 40, 0x12345678);
  return b;
}

/// data_off = 0x70, data_size = 16, file_size = 0x80; payload bytes
/// 0x70..0x7f hold 0x10 * k + 15.
inline std::vector<std::uint8_t> dex_fixture() {
  auto b = dex_skeleton(0x80);
  put_u32(b, 104, 16);
  put_u32(b, 108, 0x70);
  for (std::size_t k = 0; k < 16; ++k) b[0x70 + k] = static_cast<std::uint8_t>(0x10 * k + 15);
  return b;
}

/// Header, string ids, type ids, a gap, class defs, data and trailing bytes.
inline std::vector<std::uint8_t> dex_rich_fixture() {
  auto b = dex_skeleton(0x200);
  put_u32(b, 56, 4);      // string_ids: 4 x 4 bytes at 0x70
  put_u32(b, 60, 0x70);
  put_u32(b, 64, 2);      // type_ids: 2 x 4 bytes at 0x80
  put_u32(b, 68, 0x80);
  put_u32(b, 96, 2);      // class_defs: 2 x 32 bytes at 0xa0 (gap 0x88..0xa0)
  put_u32(b, 100, 0xa0);
  put_u32(b, 104, 0x100);  // data: 0xe0..0x1e0 (tail 0x1e0..0x200 unsegmented)
  put_u32(b, 108, 0xe0);
  for (std::size_t i = 0x70; i < b.size(); ++i) b[i] = static_cast<std::uint8_t>((i * 37) & 0xff);
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic image corpora for the learning checks.

/// 8 periodic textures whose period divides the patch size, so every patch
/// of an image carries the same standardized pattern.
inline std::vector<ByteImage> texture_corpus(Index size) {
  std::vector<ByteImage> out;
  for (int k = 0; k < 8; ++k) {
    ByteImage img(size, size, 3, "texture" + std::to_string(k));
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        double v = 0.0;
        switch (k) {
          case 0: v = (x / 2) % 2; break;                 // vertical stripes
          case 1: v = (y / 2) % 2; break;                 // horizontal stripes
          case 2: v = ((x / 2) + (y / 2)) % 2; break;     // checkerboard
          case 3: v = ((x + y) / 2) % 2; break;           // diagonal stripes
          case 4: v = (x % 4) / 3.0; break;               // ramp
          case 5: v = (y % 4) / 3.0; break;
          case 6: v = ((x / 4) + (y / 4)) % 2; break;     // coarse checkerboard
          case 7: v = (x % 2) * (y % 2); break;           // dots
        }
        for (Index c = 0; c < 3; ++c) img.at(y, x, c) = c == k % 3 ? v : 0.5 * v;
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

/// Two-class toy set: `n` images, half striped (label 0) and half
/// checkered (label 1), with per-image random period, phase, contrast and
/// noise.
inline LabeledSet toy_classification_set(Index n, Index size, std::uint64_t seed) {
  LabeledSet set;
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    const Index label = i % 2;
    const Index period = 2 + static_cast<Index>(rng.below(3));
    const Index phase = static_cast<Index>(rng.below(static_cast<std::uint64_t>(period)));
    const double lo = 0.1 * rng.uniform(), hi = 0.7 + 0.3 * rng.uniform();
    ByteImage img(size, size, 3, "toy" + std::to_string(i));
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        const bool on = label == 0 ? ((x + phase) / period) % 2 == 1
                                   : (((x + phase) / period) + ((y + phase) / period)) % 2 == 1;
        const double base = on ? hi : lo;
        for (Index c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(base + 0.05 * rng.normal(), 0.0, 1.0);
      }
    }
    set.images.push_back(std::move(img));
    set.labels.push_back(label);
  }
  return set;
}

/// Brute-force macro metrics straight from the per-class definitions.
struct OracleMetrics {
  double accuracy, mp, mr, f1_harmonic, f1_classwise;
};

inline OracleMetrics oracle_metrics(const CountMatrix& m) {
  const Index C = m.rows();
  double total = 0, diag = 0, sp = 0, sr = 0, sf = 0;
  for (Index i = 0; i < C; ++i) {
    for (Index j = 0; j < C; ++j) total += static_cast<double>(m(i, j));
    diag += static_cast<double>(m(i, i));
  }
  for (Index c = 0; c < C; ++c) {
    double tp = static_cast<double>(m(c, c)), fp = 0, fn = 0;
    for (Index k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += static_cast<double>(m(k, c));
      fn += static_cast<double>(m(c, k));
    }
    const double p = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
    const double r = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
    sp += p;
    sr += r;
    sf += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  const double mp = sp / C, mr = sr / C;
  return {diag / total, mp, mr, (mp + mr) > 0 ? 2 * mp * mr / (mp + mr) : 0.0, sf / C};
}

/// AUC as the probability that a random positive outscores a random
/// negative, ties counting one half.
inline double mann_whitney_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& positive) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      pairs += 1;
      if (scores[i] > scores[j]) wins += 1;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

/// Direct 2-D Lanczos-3 resampling: every output pixel sums kernel products
/// over the full (edge-clamped) source neighbourhood, then normalizes once.
inline ByteImage lanczos_oracle(const ByteImage& img, Index out_w, Index out_h) {
  auto kernel = [](double x) {
    if (x == 0.0) return 1.0;
    if (std::abs(x) >= 3.0) return 0.0;
    const double px = M_PI * x;
    return std::sin(px) / px * std::sin(px / 3.0) / (px / 3.0);
  };
  const double sx = static_cast<double>(img.width) / out_w, sy = static_cast<double>(img.height) / out_h;
  const double fx = std::max(sx, 1.0), fy = std::max(sy, 1.0);
  ByteImage out(out_w, out_h, img.channels);
  for (Index oy = 0; oy < out_h; ++oy) {
    for (Index ox = 0; ox < out_w; ++ox) {
      const double cx = (ox + 0.5) * sx, cy = (oy + 0.5) * sy;
      for (Index c = 0; c < img.channels; ++c) {
        double acc = 0.0, norm = 0.0;
        for (Index j = -40; j < img.height + 40; ++j) {
          const double wy = kernel((j + 0.5 - cy) / fy);
          if (wy == 0.0) continue;
          for (Index i = -40; i < img.width + 40; ++i) {
            const double w = wy * kernel((i + 0.5 - cx) / fx);
            if (w == 0.0) continue;
            const Index yy = std::clamp<Index>(j, 0, img.height - 1), xx = std::clamp<Index>(i, 0, img.width - 1);
            acc += w * img.at(yy, xx, c);
            norm += w;
          }
        }
        out.at(oy, ox, c) = std::clamp(acc / norm, 0.0, 1.0);
      }
    }
  }
  return out;
}

/// Recomputes the patch-mean reconstruction error without the library's
/// patch helpers: hidden pixels take their patch's per-channel-pooled mean.
inline double patch_mean_error_oracle(const ByteImage& img, const ViTConfig& cfg, const MaskPlan& plan) {
  const Index p = cfg.patch_size, g = cfg.grid();
  double err = 0.0;
  for (Index n : plan.masked) {
    const Index py = n / g, px = n % g;
    double mu = 0.0;
    for (Index c = 0; c < img.channels; ++c) {
      for (Index y = 0; y < p; ++y) {
        for (Index x = 0; x < p; ++x) mu += img.at(py * p + y, px * p + x, c);
      }
    }
    mu /= static_cast<double>(p * p * img.channels);
    for (Index c = 0; c < img.channels; ++c) {
      for (Index y = 0; y < p; ++y) {
        for (Index x = 0; x < p; ++x) err += std::abs(std::clamp(mu, 0.0, 1.0) - img.at(py * p + y, px * p + x, c));
      }
    }
  }
  return err / static_cast<double>(img.pixels.size());
}

}  // namespace sherlock::testing

#endif  // SHERLOCK_TESTS_SUPPORT_HPP_
