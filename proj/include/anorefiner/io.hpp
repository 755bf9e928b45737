// Copyright 2026 The AnoRefiner Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "anorefiner/tensor.hpp"

namespace anorefiner {

namespace fs = std::filesystem;

// ANR1 tensor container: "ANR1", u32 rank, rank x u32 dims, then
// product(dims) float32 values; all little-endian, row-major.
inline constexpr std::size_t kMaxTensorRank = 8;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);
void write_tensor(const fs::path& path, const Tensor& t);
Tensor read_tensor(const fs::path& path);

// Binary PNM. Images are [H, W, ch] tensors in [0, 1]; P5 gives ch = 1 and
// P6 gives ch = 3. Writers quantise with round-half-up of 255 * v after
// clamping to [0, 1].
Tensor read_pnm(const fs::path& path);
void write_pnm(const fs::path& path, const Tensor& image);
std::vector<std::uint8_t> encode_pnm(const Tensor& image);
Tensor decode_pnm(const std::vector<std::uint8_t>& bytes);

/// Writes an [H, W, 1] map as a P5 heatmap.
void export_heatmap(const Tensor& map, const fs::path& path);

std::vector<std::uint8_t> read_file(const fs::path& path);
void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

struct ManifestRecord {
  std::string image_id;
  std::string path;
  std::string category;
  std::optional<std::string> gt_mask_path;
  std::optional<int> gt_label;
  // Externally computed inputs for the external scorer.
  std::optional<std::string> feature_path;
  std::optional<std::string> anomaly_path;
};

/// JSON-lines manifest; relative paths resolve against `base_dir`.
struct Manifest {
  fs::path base_dir;
  std::vector<ManifestRecord> records;

  fs::path resolve(const std::string& p) const;
  std::vector<std::string> categories() const;
};

Manifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const Manifest& manifest);
std::string manifest_record_json(const ManifestRecord& r);

}  // namespace anorefiner
