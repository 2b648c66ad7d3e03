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

#include "sherlock/dex.hpp"

#include <algorithm>
#include <stdexcept>

namespace sherlock {

namespace {

constexpr std::uint32_t kEndianConstant = 0x12345678;

std::uint32_t read_u32(std::span<const std::uint8_t> raw, std::size_t at) {
  return static_cast<std::uint32_t>(raw[at]) |
         static_cast<std::uint32_t>(raw[at + 1]) << 8 |
         static_cast<std::uint32_t>(raw[at + 2]) << 16 |
         static_cast<std::uint32_t>(raw[at + 3]) << 24;
}

bool has_dex_magic(std::span<const std::uint8_t> raw) {
  if (raw.size() < 8) return false;
  if (raw[0] != 'd' || raw[1] != 'e' || raw[2] != 'x' || raw[3] != '\n') {
    return false;
  }
  for (std::size_t i = 4; i < 7; ++i) {
    if (raw[i] < '0' || raw[i] > '9') return false;
  }
  return raw[7] == 0;
}

DexSectionMap unsegmented(std::size_t total, std::optional<std::string> warning) {
  DexSectionMap map;
  map.total_size = total;
  map.ranges.push_back({0, total, SectionClass::Unsegmented});
  map.warning = std::move(warning);
  return map;
}

// (size field offset, offset field offset, element width, class)
struct TableField {
  std::size_t size_at;
  std::size_t off_at;
  std::uint64_t item_bytes;
  SectionClass section;
  const char* name;
};

constexpr TableField kTables[] = {
    {44, 48, 1, SectionClass::Data, "link"},
    {56, 60, 4, SectionClass::Ids, "string_ids"},
    {64, 68, 4, SectionClass::Ids, "type_ids"},
    {72, 76, 12, SectionClass::Ids, "proto_ids"},
    {80, 84, 8, SectionClass::Ids, "field_ids"},
    {88, 92, 8, SectionClass::Ids, "method_ids"},
    {96, 100, 32, SectionClass::ClassDefs, "class_defs"},
    {104, 108, 1, SectionClass::Data, "data"},
};

}  // namespace

std::string_view to_string(SectionClass s) {
  switch (s) {
    case SectionClass::Header: return "header";
    case SectionClass::Ids: return "ids";
    case SectionClass::ClassDefs: return "class_defs";
    case SectionClass::Data: return "data";
    case SectionClass::Unsegmented: return "unsegmented";
  }
  return "?";
}

DexSectionMap parse_dex_header(std::span<const std::uint8_t> raw) {
  if (raw.empty()) throw std::invalid_argument("parse_dex_header: empty input");
  const std::size_t total = raw.size();
  if (!has_dex_magic(raw) || total < kDexHeaderSize) {
    return unsegmented(total, std::nullopt);
  }
  if (read_u32(raw, 40) != kEndianConstant) {
    return unsegmented(total, "unsupported endian tag");
  }
  if (read_u32(raw, 36) != kDexHeaderSize) {
    return unsegmented(total, "unexpected header_size");
  }

  std::vector<SectionRange> declared;
  for (const auto& t : kTables) {
    const std::uint64_t count = read_u32(raw, t.size_at);
    const std::uint64_t off = read_u32(raw, t.off_at);
    if (count == 0) continue;
    const std::uint64_t end = off + count * t.item_bytes;
    if (off < kDexHeaderSize || end > total) {
      return unsegmented(total, std::string(t.name) + " section exceeds file bounds");
    }
    declared.push_back({static_cast<std::size_t>(off), static_cast<std::size_t>(end), t.section});
  }
  std::sort(declared.begin(), declared.end(),
            [](const SectionRange& a, const SectionRange& b) { return a.start < b.start; });

  DexSectionMap map;
  map.total_size = total;
  auto append = [&map](std::size_t start, std::size_t end, SectionClass s) {
    if (start == end) return;
    if (!map.ranges.empty() && map.ranges.back().section == s &&
        map.ranges.back().end == start) {
      map.ranges.back().end = end;
    } else {
      map.ranges.push_back({start, end, s});
    }
  };
  append(0, kDexHeaderSize, SectionClass::Header);
  std::size_t cursor = kDexHeaderSize;
  for (const auto& r : declared) {
    if (r.start < cursor) return unsegmented(total, "overlapping sections");
    append(cursor, r.start, SectionClass::Unsegmented);
    append(r.start, r.end, r.section);
    cursor = r.end;
  }
  append(cursor, total, SectionClass::Unsegmented);
  return map;
}

SectionClass classify_offset(const DexSectionMap& map, std::size_t offset) {
  if (offset >= map.total_size) {
    throw std::out_of_range("classify_offset: offset " + std::to_string(offset) +
                            " outside file of size " + std::to_string(map.total_size));
  }
  auto it = std::upper_bound(map.ranges.begin(), map.ranges.end(), offset,
                             [](std::size_t off, const SectionRange& r) { return off < r.start; });
  return std::prev(it)->section;
}

}  // namespace sherlock
