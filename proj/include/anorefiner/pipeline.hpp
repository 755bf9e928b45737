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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "anorefiner/io.hpp"
#include "anorefiner/metrics.hpp"
#include "anorefiner/pgt.hpp"

namespace anorefiner {

struct RunConfig {
  PgtConfig pgt;
  std::size_t input_size = 64;
  ScorerKind scorer = ScorerKind::kBuiltin;
  std::optional<std::filesystem::path> texture_dir;
  std::filesystem::path manifest;
  std::filesystem::path output_dir = "out";
  std::vector<std::uint64_t> seeds = {0};
  std::optional<std::string> category;

  void validate() const;
};

/// Parses a JSON config. Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& cfg);

struct MetricRow {
  std::string category;
  std::string level;  // "image" or "pixel"
  MetricTriple metrics;
};

std::string format_results_csv(const std::vector<MetricRow>& rows);

/// Reads `<dir>/scores.csv` and the maps under `<dir>/<maps_subdir>/` and
/// evaluates them against the manifest's ground truth.
std::vector<MetricRow> evaluate_outputs(const Manifest& manifest, const std::filesystem::path& dir,
                                        const std::string& maps_subdir = "maps",
                                        const std::optional<std::string>& category = {});

/// Images of one category in stream order, loaded for the configured scorer.
std::vector<StreamImage> load_stream(const Manifest& manifest, const std::string& category, const RunConfig& cfg);

Tensor load_gt_mask(const Manifest& manifest, const ManifestRecord& r, std::size_t height, std::size_t width);

/// Runs PGT for every category and writes the output tree for one seed:
/// maps/, coarse/, refined/, heatmaps/, model/<category>/, scores.csv,
/// results.csv and coarse_results.csv (when ground truth is available).
void run_pipeline(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir, std::ostream& log);

/// Coarse maps only: coarse_patch/, coarse/ and scores.csv.
void score_pipeline(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);

/// Heatmap PGM for every ANR1 map in `maps_dir`.
std::size_t export_heatmaps(const std::filesystem::path& maps_dir, const std::filesystem::path& out_dir);

/// Entry point shared by the CLI binary and the tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace anorefiner
