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

#include "sherlock/byteplot.hpp"

#include <png.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <thread>

namespace sherlock {

using Eigen::Index;

void ByteImage::validate() const {
  if (width < 1 || height < 1 || (channels != 1 && channels != 3)) {
    throw std::invalid_argument("ByteImage: bad geometry " + std::to_string(width) + "x" +
                                std::to_string(height) + "x" + std::to_string(channels));
  }
  if (pixels.size() != width * height * channels) {
    throw std::invalid_argument("ByteImage: pixel count does not match geometry");
  }
  if (pixels.size() > 0 && (pixels.minCoeff() < 0.0 || pixels.maxCoeff() > 1.0)) {
    throw std::invalid_argument("ByteImage: pixel values outside [0, 1]");
  }
}

void ConversionConfig::validate() const {
  if (fixed_width < 1) throw std::invalid_argument("fixed_width must be >= 1");
  if (canonical_size < 1) throw std::invalid_argument("canonical_size must be >= 1");
}

ColorMode parse_color_mode(std::string_view s) {
  if (s == "gray" || s == "grayscale") return ColorMode::Grayscale;
  if (s == "dex") return ColorMode::DexSections;
  throw std::invalid_argument("unknown color mode '" + std::string(s) + "' (want gray|dex)");
}

std::string_view to_string(ColorMode m) {
  return m == ColorMode::Grayscale ? "gray" : "dex";
}

ByteImage bytes_to_grayscale(std::span<const std::uint8_t> raw, const ConversionConfig& cfg) {
  if (raw.empty()) throw std::invalid_argument("bytes_to_grayscale: empty input");
  cfg.validate();
  const Index n = static_cast<Index>(raw.size());
  const Index height = (n + cfg.fixed_width - 1) / cfg.fixed_width;
  ByteImage img(cfg.fixed_width, height, 1);
  for (Index i = 0; i < n; ++i) img.pixels[i] = raw[i] / 255.0;
  return img;
}

double lanczos_kernel(double x) {
  constexpr double a = 3.0;
  if (x == 0.0) return 1.0;
  if (std::abs(x) >= a) return 0.0;
  // sin(pi k) is not exactly zero in floating point; integer taps must vanish
  // so that same-size resampling is an exact copy.
  if (x == std::round(x)) return 0.0;
  const double px = M_PI * x;
  return a * std::sin(px) * std::sin(px / a) / (px * px);
}

std::vector<std::vector<ResampleTap>> lanczos_taps(Index in_size, Index out_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  const double stretch = std::max(scale, 1.0);
  const double support = 3.0 * stretch;
  std::vector<std::vector<ResampleTap>> taps(out_size);
  for (Index i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) * scale;
    const auto lo = static_cast<Index>(std::floor(center - support - 1.0));
    const auto hi = static_cast<Index>(std::ceil(center + support + 1.0));
    auto& row = taps[i];
    double total = 0.0;
    for (Index j = lo; j <= hi; ++j) {
      const double w = lanczos_kernel((j + 0.5 - center) / stretch);
      if (w == 0.0) continue;
      const Index src = std::clamp<Index>(j, 0, in_size - 1);
      if (!row.empty() && row.back().source == src) {
        row.back().weight += w;
      } else {
        row.push_back({src, w});
      }
      total += w;
    }
    for (auto& t : row) t.weight /= total;
  }
  return taps;
}

ByteImage lanczos_resize(const ByteImage& img, Index out_w, Index out_h) {
  img.validate();
  if (out_w < 1 || out_h < 1) throw std::invalid_argument("lanczos_resize: output size must be >= 1");
  const Index c = img.channels;
  const auto xtaps = lanczos_taps(img.width, out_w);
  const auto ytaps = lanczos_taps(img.height, out_h);

  // Horizontal pass: height x out_w.
  Eigen::ArrayXd tmp = Eigen::ArrayXd::Zero(img.height * out_w * c);
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < out_w; ++x) {
      for (Index ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (const auto& t : xtaps[x]) acc += t.weight * img.at(y, t.source, ch);
        tmp[(y * out_w + x) * c + ch] = acc;
      }
    }
  }
  ByteImage out(out_w, out_h, c, img.source_id);
  for (Index y = 0; y < out_h; ++y) {
    for (Index x = 0; x < out_w; ++x) {
      for (Index ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (const auto& t : ytaps[y]) acc += t.weight * tmp[(t.source * out_w + x) * c + ch];
        out.at(y, x, ch) = std::clamp(acc, 0.0, 1.0);
      }
    }
  }
  return out;
}

ByteImage encode_rgb_unscaled(std::span<const std::uint8_t> raw, const DexSectionMap& map,
                              const ConversionConfig& cfg) {
  if (map.total_size != raw.size()) {
    throw std::invalid_argument("encode_rgb: section map covers " + std::to_string(map.total_size) +
                                " bytes but input has " + std::to_string(raw.size()));
  }
  if (raw.empty()) throw std::invalid_argument("encode_rgb: empty input");
  cfg.validate();
  const Index n = static_cast<Index>(raw.size());
  const Index height = (n + cfg.fixed_width - 1) / cfg.fixed_width;
  ByteImage img(cfg.fixed_width, height, 3);
  for (const auto& r : map.ranges) {
    Index channel = 0;
    if (r.section == SectionClass::ClassDefs) channel = 1;
    if (r.section == SectionClass::Data) channel = 2;
    for (std::size_t i = r.start; i < r.end; ++i) {
      img.pixels[static_cast<Index>(i) * 3 + channel] = raw[i] / 255.0;
    }
  }
  return img;
}

ByteImage encode_rgb(std::span<const std::uint8_t> raw, const DexSectionMap& map,
                     const ConversionConfig& cfg) {
  return lanczos_resize(encode_rgb_unscaled(raw, map, cfg), cfg.canonical_size, cfg.canonical_size);
}

ByteImage decode_to_grayscale(const ByteImage& img) {
  if (img.channels != 3) {
    throw std::invalid_argument("decode_to_grayscale: expected 3 channels, got " +
                                std::to_string(img.channels));
  }
  ByteImage out(img.width, img.height, 1, img.source_id);
  for (Index i = 0; i < img.width * img.height; ++i) {
    const double s = img.pixels[3 * i] + img.pixels[3 * i + 1] + img.pixels[3 * i + 2];
    out.pixels[i] = std::clamp(s, 0.0, 1.0);
  }
  return out;
}

ByteImage to_channels(const ByteImage& img, Index channels) {
  if (img.channels == channels) return img;
  if (img.channels == 3 && channels == 1) return decode_to_grayscale(img);
  if (img.channels == 1 && channels == 3) {
    ByteImage out(img.width, img.height, 3, img.source_id);
    for (Index i = 0; i < img.width * img.height; ++i) {
      out.pixels.segment(3 * i, 3).setConstant(img.pixels[i]);
    }
    return out;
  }
  throw std::invalid_argument("to_channels: cannot convert " + std::to_string(img.channels) +
                              " channels to " + std::to_string(channels));
}

ByteImage convert_bytes(std::span<const std::uint8_t> raw, const ConversionConfig& cfg,
                        std::string source_id) {
  if (raw.empty()) throw std::invalid_argument("convert: empty input");
  cfg.validate();
  ByteImage plot;
  if (cfg.color_mode == ColorMode::DexSections) {
    plot = encode_rgb_unscaled(raw, parse_dex_header(raw), cfg);
  } else {
    plot = bytes_to_grayscale(raw, cfg);
  }
  ByteImage out = lanczos_resize(plot, cfg.canonical_size, cfg.canonical_size);
  out.source_id = std::move(source_id);
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("error reading " + path.string());
  return bytes;
}

ByteImage convert_file(const std::filesystem::path& path, const ConversionConfig& cfg) {
  const auto bytes = read_file_bytes(path);
  if (bytes.empty()) throw std::runtime_error("empty file " + path.string());
  return convert_bytes(bytes, cfg, path.filename().string());
}

std::vector<ConversionResult> convert_batch(const std::vector<std::filesystem::path>& paths,
                                            const ConversionConfig& cfg, unsigned workers) {
  std::vector<ConversionResult> results(paths.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < paths.size(); i = next++) {
      results[i].path = paths[i];
      try {
        results[i].image = convert_file(paths[i], cfg);
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
    }
  };
  workers = std::max(1u, workers);
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return results;
}

void write_png(const ByteImage& img, const std::filesystem::path& path) {
  img.validate();
  std::vector<png_byte> buf(static_cast<std::size_t>(img.pixels.size()));
  for (Index i = 0; i < img.pixels.size(); ++i) {
    buf[i] = static_cast<png_byte>(std::lround(img.pixels[i] * 255.0));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("write_png " + path.string() + ": " + msg);
  }
}

ByteImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw std::runtime_error("read_png " + path.string() + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("read_png " + path.string() + ": " + msg);
  }
  ByteImage img(image.width, image.height, color ? 3 : 1, path.filename().string());
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = buf[i] / 255.0;
  return img;
}

}  // namespace sherlock
