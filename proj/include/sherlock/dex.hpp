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

// Coarse section map of a DEX file, recovered from its fixed 112-byte header.

#ifndef SHERLOCK_DEX_HPP_
#define SHERLOCK_DEX_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sherlock {

enum class SectionClass : std::uint8_t {
  Header,
  Ids,  // string/type/proto/field/method id tables
  ClassDefs,
  Data,  // data and link sections
  Unsegmented,
};

std::string_view to_string(SectionClass s);

struct SectionRange {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  SectionClass section = SectionClass::Unsegmented;

  std::size_t size() const { return end - start; }
  bool operator==(const SectionRange&) const = default;
};

/// Ordered, non-overlapping ranges that jointly cover [0, total_size).
struct DexSectionMap {
  std::size_t total_size = 0;
  std::vector<SectionRange> ranges;
  /// Set when a DEX magic was found but the header could not be trusted.
  std::optional<std::string> warning;

  bool operator==(const DexSectionMap&) const = default;
};

inline constexpr std::size_t kDexHeaderSize = 0x70;

/// Parse the DEX header and partition the file. Inputs without a DEX magic
/// and a complete header map to a single Unsegmented range. Throws
/// std::invalid_argument on empty input.
DexSectionMap parse_dex_header(std::span<const std::uint8_t> raw);

/// Section containing `offset`. Throws std::out_of_range outside the file.
SectionClass classify_offset(const DexSectionMap& map, std::size_t offset);

}  // namespace sherlock

#endif  // SHERLOCK_DEX_HPP_
