// SPDX-License-Identifier: Apache-2.0
//
// LOCKT1 tensor archive:
//
//   bytes 0..5   magic "LOCKT1"
//   bytes 6..13  manifest length M, uint64 little-endian
//   next M bytes UTF-8 JSON manifest:
//                {name: {"dtype": "f64", "shape": [...], "offset": o, "pretrained": b}, ...}
//   remainder    raw float64 little-endian buffers, row-major; `offset` is the
//                byte offset of a tensor from the start of this section
//
// Manifest keys are sorted, buffers are laid out in key order, so equal
// archives serialize to identical bytes.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltt/encoders.hpp"
#include "ltt/tensor.hpp"

namespace ltt {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArchiveEntry {
  Shape shape;
  std::vector<double> data;
  bool pretrained = false;

  bool operator==(const ArchiveEntry&) const = default;
};

using Archive = std::map<std::string, ArchiveEntry>;

std::string encode_archive(const Archive& archive);
Archive decode_archive(const std::string& bytes);
void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

/// Copies a tower into `archive` with every name prefixed by `prefix`.
void add_tower(Archive& archive, const TowerWeights& weights, const std::string& prefix = "");
/// Extracts entries under `prefix` (prefix stripped) as a tower.
TowerWeights extract_tower(const Archive& archive, const std::string& prefix = "");

void save_tower(const std::filesystem::path& path, const TowerWeights& weights);
TowerWeights load_tower(const std::filesystem::path& path);

}  // namespace ltt
