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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "anorefiner/ard.hpp"
#include "anorefiner/scorer.hpp"
#include "anorefiner/synth.hpp"
#include "anorefiner/tensor.hpp"

namespace anorefiner {

struct PgtConfig {
  std::size_t group_size = 30;      // u
  std::size_t pseudo_normals = 5;   // r
  std::size_t per_normal = 4;       // l
  std::size_t epochs = 20;
  float lr = 0.001f;
  SynthStrategy strategy = SynthStrategy::kPerlinTexture;
  std::uint64_t base_seed = 0;
  std::size_t patch_size = 8;
  double dice_eps = 1.0;
  /// Perlin threshold for pseudo-anomaly masks.
  double mask_threshold = 0.75;
  /// Filter-bank seed of the built-in feature extractor.
  std::uint64_t bank_seed = 0;
  /// Scale of the decoder's uniform kernel initialisation (He-uniform).
  double init_gain = 2.449489742783178;
  /// Fraction of pseudo-normal slots deliberately filled with images whose
  /// ground-truth label is 1 (robustness experiments only).
  double contamination = 0.0;
  std::vector<Tensor> textures;

  /// Throws UsageError when an invariant is violated.
  void validate() const;
};

/// Contiguous near-equal partition of `n` stream positions into
/// ceil(n / u) groups; the first n mod g groups are one larger.
std::vector<std::vector<std::size_t>> partition_groups(std::size_t n, std::size_t group_size);

/// Positions of the r lowest scores, ties broken by lower position; ordered
/// by ascending score.
std::vector<std::size_t> select_lowest(std::span<const float> scores, std::size_t r);
std::vector<std::size_t> select_pseudo_normals(std::span<const CoarseAnomalyMap> maps, std::size_t r);

/// Scalar Dice loss 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
double dice_loss_value(const Tensor& pred, const Tensor& mask, double eps);

/// Decoder inputs and target for one pseudo-anomaly.
struct TrainingSample {
  PatchFeatureMap features;
  CoarseAnomalyMap coarse;
  Tensor mask;
  std::size_t source_index = 0;
  std::size_t copy_index = 0;
};

/// Extracts features of each synthesised image and scores it against the
/// group, leaving out the pseudo-normal it was made from.
std::vector<TrainingSample> prepare_samples(std::span<const SynthPair> pairs, const GroupScorer& scorer,
                                            std::span<const std::size_t> source_positions, const PgtConfig& cfg);

struct TrainReport {
  std::vector<double> epoch_loss;  // mean Dice loss per epoch
  double final_loss() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
};

/// SGD with batch size 1 over `samples` in a seeded per-epoch shuffle,
/// continuing from the incoming parameters. `shuffle_seed` should be
/// unique per (category, group).
TrainReport train_group(ArdModel& model, std::span<const TrainingSample> samples, const PgtConfig& cfg,
                        std::uint64_t shuffle_seed);

/// Coarse map bilinearly upsampled by the patch size.
Tensor upsample_coarse(const CoarseAnomalyMap& map, std::size_t patch_size);

/// Elementwise (a + b) / 2.
Tensor average_maps(const Tensor& a, const Tensor& b);

struct RefinedImage {
  Tensor coarse;   // upsampled coarse map
  Tensor refined;  // decoder output
  Tensor final;    // (coarse + refined) / 2
};

/// Refines one group with a model trained on earlier groups.
std::vector<RefinedImage> refine_group(const ArdModel& model, bool trained, std::span<const PatchFeatureMap> features,
                                       std::span<const CoarseAnomalyMap> coarse, std::size_t patch_size);

/// One image of a category stream.
struct StreamImage {
  std::string id;
  Tensor image;                                // [H, W, ch]; needed for synthesis
  std::optional<PatchFeatureMap> features;     // external scorer only
  std::optional<CoarseAnomalyMap> coarse;      // external scorer only
  std::optional<int> gt_label;
};

struct GroupState {
  std::size_t index = 0;
  std::vector<std::size_t> positions;
  std::vector<std::string> ids;
  std::vector<CoarseAnomalyMap> coarse;
  std::vector<RefinedImage> outputs;
  std::vector<std::size_t> pseudo_normals;  // positions within the group
  bool trained_through = false;
  TrainReport train;
  double seconds = 0.0;
};

struct PgtResult {
  std::vector<GroupState> groups;
  ArdModel model;
};

enum class ScorerKind { kBuiltin, kExternal };

using GroupCallback = std::function<void(const GroupState&)>;

/// Progressive group-wise test-time training over one category stream.
/// Group 1 passes its upsampled coarse maps through; each later group is
/// refined by the decoder trained on all earlier groups.
PgtResult run_pgt(std::span<const StreamImage> stream, const PgtConfig& cfg, ScorerKind scorer,
                  std::uint64_t category_seed, const GroupCallback& on_group = {});

}  // namespace anorefiner
