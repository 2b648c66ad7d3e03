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

// Binary-to-image conversion: grayscale byteplots, Lanczos resampling and
// DEX-section RGB encoding.

#ifndef SHERLOCK_BYTEPLOT_HPP_
#define SHERLOCK_BYTEPLOT_HPP_

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sherlock/dex.hpp"

namespace sherlock {

/// Pixel grid with values in [0, 1]. Storage is row-major with channels
/// interleaved: pixels[(y * width + x) * channels + c].
struct ByteImage {
  Eigen::Index width = 0;
  Eigen::Index height = 0;
  Eigen::Index channels = 1;
  Eigen::ArrayXd pixels;
  std::string source_id;

  ByteImage() = default;
  ByteImage(Eigen::Index w, Eigen::Index h, Eigen::Index c, std::string id = {})
      : width(w), height(h), channels(c), pixels(Eigen::ArrayXd::Zero(w * h * c)),
        source_id(std::move(id)) {}

  double& at(Eigen::Index y, Eigen::Index x, Eigen::Index c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(Eigen::Index y, Eigen::Index x, Eigen::Index c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }

  /// Throws std::invalid_argument if the size or value-range invariant fails.
  void validate() const;
};

enum class ColorMode { Grayscale, DexSections };

struct ConversionConfig {
  Eigen::Index fixed_width = 256;
  Eigen::Index canonical_size = 256;
  ColorMode color_mode = ColorMode::DexSections;

  void validate() const;
};

ColorMode parse_color_mode(std::string_view s);  // "gray" | "dex"
std::string_view to_string(ColorMode m);

/// One pixel per byte, row-major at cfg.fixed_width; the ragged final row is
/// padded with black.
ByteImage bytes_to_grayscale(std::span<const std::uint8_t> raw, const ConversionConfig& cfg);

/// Separable Lanczos-3 resampling with clamp-to-edge, per-pixel weight
/// renormalization and output clipped to [0, 1]. When shrinking, the kernel is
/// stretched by the scale factor so every source pixel contributes.
ByteImage lanczos_resize(const ByteImage& img, Eigen::Index out_w, Eigen::Index out_h);

/// Normalized 1-D Lanczos-3 taps for resampling `in_size` samples to
/// `out_size`. Row i of the result lists (source index, weight) pairs.
struct ResampleTap {
  Eigen::Index source;
  double weight;
};
std::vector<std::vector<ResampleTap>> lanczos_taps(Eigen::Index in_size, Eigen::Index out_size);

double lanczos_kernel(double x);

/// Section-colored byteplot at file resolution: each byte's gray value goes
/// to exactly one channel (Header/Ids/Unsegmented -> R, ClassDefs -> G,
/// Data -> B).
ByteImage encode_rgb_unscaled(std::span<const std::uint8_t> raw, const DexSectionMap& map,
                              const ConversionConfig& cfg);

/// encode_rgb_unscaled followed by resizing to canonical_size squared.
ByteImage encode_rgb(std::span<const std::uint8_t> raw, const DexSectionMap& map,
                     const ConversionConfig& cfg);

/// Sum of channels, clipped to 1.
ByteImage decode_to_grayscale(const ByteImage& img);

/// Replicate (1 -> c) or decode (3 -> 1) channels.
ByteImage to_channels(const ByteImage& img, Eigen::Index channels);

ByteImage convert_bytes(std::span<const std::uint8_t> raw, const ConversionConfig& cfg,
                        std::string source_id = {});
ByteImage convert_file(const std::filesystem::path& path, const ConversionConfig& cfg);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

struct ConversionResult {
  std::filesystem::path path;
  std::optional<ByteImage> image;
  std::string error;
};

/// Converts every path on `workers` threads. Results are in input order and
/// do not depend on the worker count.
std::vector<ConversionResult> convert_batch(const std::vector<std::filesystem::path>& paths,
                                            const ConversionConfig& cfg, unsigned workers);

// 8-bit PNG I/O. Values are quantized as round(v * 255).
void write_png(const ByteImage& img, const std::filesystem::path& path);
ByteImage read_png(const std::filesystem::path& path);

}  // namespace sherlock

#endif  // SHERLOCK_BYTEPLOT_HPP_
