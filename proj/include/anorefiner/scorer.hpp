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

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "anorefiner/tensor.hpp"

namespace anorefiner {

/// Per-patch feature grid [h_p, w_p, C] of one image.
struct PatchFeatureMap {
  Tensor grid;
  std::size_t patch_size = 0;
  std::size_t source_height = 0;
  std::size_t source_width = 0;

  std::size_t grid_height() const { return grid.dim(0); }
  std::size_t grid_width() const { return grid.dim(1); }
  std::size_t channels() const { return grid.dim(2); }
};

/// Per-patch scalar scores [h_p, w_p, 1].
struct CoarseAnomalyMap {
  Tensor grid;
  bool normalized = false;
};

inline constexpr std::size_t kFilterBankSize = 8;

using Filter3x3 = std::array<float, 9>;

/// Zero-mean, unit-norm random 3x3 filters drawn from `seed`.
std::vector<Filter3x3> make_filter_bank(std::uint64_t seed, std::size_t count = kFilterBankSize);

/// Feature width for an image with `channels` colour channels.
constexpr std::size_t feature_channels(std::size_t channels) { return channels + 1 + kFilterBankSize; }

/// Hand-crafted stand-in for a frozen backbone. Each patch is described by
/// its per-channel mean, intensity standard deviation and the mean absolute
/// response of the filter bank, computed over the full patch and over its
/// four sub-blocks; the two scales are averaged.
PatchFeatureMap extract_patch_features(const Tensor& image, std::size_t patch_size, std::uint64_t bank_seed);

/// Mean over the other maps j of the distance from each patch of `query` to
/// its nearest patch in j. `skip` excludes one reference index.
Tensor raw_mutual_scores(const PatchFeatureMap& query, std::span<const PatchFeatureMap> refs,
                         std::ptrdiff_t skip = -1);

struct ScoreRange {
  double lo = 0.0;
  double hi = 0.0;
  bool degenerate() const { return !(hi > lo); }
};

ScoreRange score_range(std::span<const Tensor> raw);
/// Maps raw scores into [0, 1] with `range`, clamping; a degenerate range
/// yields all zeros.
CoarseAnomalyMap normalize_scores(const Tensor& raw, const ScoreRange& range);
/// Per-group min-max normalisation.
std::vector<CoarseAnomalyMap> normalize_group(std::span<const Tensor> raw);

/// Inter-image comparison scorer for one group. Requires at least two
/// maps of identical geometry.
std::vector<CoarseAnomalyMap> mutual_score(std::span<const PatchFeatureMap> features);

/// Frozen scoring context of one group, used to score images that were not
/// part of the group (e.g. pseudo-anomalies) on the group's scale.
class GroupScorer {
 public:
  explicit GroupScorer(std::vector<PatchFeatureMap> features);

  const std::vector<PatchFeatureMap>& features() const { return features_; }
  const std::vector<CoarseAnomalyMap>& coarse_maps() const { return coarse_; }
  const ScoreRange& range() const { return range_; }

  /// Scores `query` against every group member except `exclude`.
  CoarseAnomalyMap score(const PatchFeatureMap& query, std::ptrdiff_t exclude) const;

 private:
  std::vector<PatchFeatureMap> features_;
  std::vector<CoarseAnomalyMap> coarse_;
  ScoreRange range_;
};

float image_score(const CoarseAnomalyMap& map);

/// Loads an externally computed (features, scores) pair from ANR1 files.
std::pair<PatchFeatureMap, CoarseAnomalyMap> load_external(const std::filesystem::path& feature_path,
                                                           const std::filesystem::path& anomaly_path,
                                                           std::size_t patch_size);

}  // namespace anorefiner
