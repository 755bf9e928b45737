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

#include "anorefiner/pgt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "anorefiner/autodiff.hpp"
#include "anorefiner/errors.hpp"
#include "anorefiner/rng.hpp"

namespace anorefiner {
namespace {

constexpr std::uint64_t kModelSalt = 0x4D4F44454CULL;
constexpr std::uint64_t kContaminationSalt = 0xC047A41ULL;

std::vector<std::size_t> choose_pseudo_normals(const GroupState& group, std::span<const StreamImage> stream,
                                               const PgtConfig& cfg, std::uint64_t category_seed) {
  std::vector<float> scores;
  for (const auto& m : group.coarse) scores.push_back(image_score(m));
  if (cfg.contamination <= 0.0) return select_lowest(scores, cfg.pseudo_normals);

  std::vector<std::size_t> defects;
  for (std::size_t i = 0; i < group.positions.size(); ++i) {
    if (stream[group.positions[i]].gt_label.value_or(0) == 1) defects.push_back(i);
  }
  const auto wanted = static_cast<std::size_t>(std::llround(cfg.contamination * static_cast<double>(cfg.pseudo_normals)));
  const std::size_t k = std::min(wanted, defects.size());
  Rng rng(derive_seed(cfg.base_seed, category_seed, group.index, kContaminationSalt));
  for (std::size_t i = 0; i < k; ++i) std::swap(defects[i], defects[i + rng.below(defects.size() - i)]);
  std::vector<std::size_t> chosen(defects.begin(), defects.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<float> masked = scores;
  for (std::size_t i : chosen) masked[i] = std::numeric_limits<float>::infinity();
  for (std::size_t i : select_lowest(masked, cfg.pseudo_normals - k)) chosen.push_back(i);
  return chosen;
}

}  // namespace

void PgtConfig::validate() const {
  if (group_size < 1) throw UsageError("config: group size u must be >= 1");
  if (pseudo_normals < 1 || pseudo_normals > group_size) throw UsageError("config: need 1 <= r <= u");
  if (per_normal < 1) throw UsageError("config: l must be >= 1");
  if (epochs < 1) throw UsageError("config: epochs must be >= 1");
  if (!(lr > 0.0f)) throw UsageError("config: lr must be positive");
  if (patch_size < 4 || patch_size % 4 != 0) throw UsageError("config: patch size must be a positive multiple of 4");
  if (!(dice_eps >= 0.0)) throw UsageError("config: dice eps must be >= 0");
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) throw UsageError("config: mask threshold must be in (0, 1)");
  if (!(contamination >= 0.0 && contamination <= 1.0)) throw UsageError("config: contamination must be in [0, 1]");
  if (!(init_gain > 0.0)) throw UsageError("config: init gain must be positive");
}

std::vector<std::vector<std::size_t>> partition_groups(std::size_t n, std::size_t group_size) {
  if (n < 2) throw ProtocolError("partition_groups: need at least 2 images, got " + std::to_string(n));
  if (group_size < 1) throw ProtocolError("partition_groups: group size must be >= 1");
  const std::size_t g = (n + group_size - 1) / group_size;
  const std::size_t base = n / g, extra = n % g;
  std::vector<std::vector<std::size_t>> groups(g);
  std::size_t next = 0;
  for (std::size_t k = 0; k < g; ++k) {
    const std::size_t size = base + (k < extra ? 1 : 0);
    groups[k].resize(size);
    std::iota(groups[k].begin(), groups[k].end(), next);
    next += size;
  }
  return groups;
}

std::vector<std::size_t> select_lowest(std::span<const float> scores, std::size_t r) {
  if (r > scores.size()) throw ProtocolError("select_pseudo_normals: r exceeds group size");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  idx.resize(r);
  return idx;
}

std::vector<std::size_t> select_pseudo_normals(std::span<const CoarseAnomalyMap> maps, std::size_t r) {
  std::vector<float> scores;
  scores.reserve(maps.size());
  for (const auto& m : maps) scores.push_back(image_score(m));
  return select_lowest(scores, r);
}

double dice_loss_value(const Tensor& pred, const Tensor& mask, double eps) {
  Graph g;
  return g.value(g.dice_loss(g.input(pred), g.input(mask), eps))[0];
}

std::vector<TrainingSample> prepare_samples(std::span<const SynthPair> pairs, const GroupScorer& scorer,
                                            std::span<const std::size_t> source_positions, const PgtConfig& cfg) {
  if (pairs.size() != source_positions.size()) throw ProtocolError("prepare_samples: one source position per pair");
  std::vector<TrainingSample> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    TrainingSample s;
    s.features = extract_patch_features(pairs[i].image, cfg.patch_size, cfg.bank_seed);
    s.coarse = scorer.score(s.features, static_cast<std::ptrdiff_t>(source_positions[i]));
    s.mask = pairs[i].mask;
    s.source_index = pairs[i].source_index;
    s.copy_index = pairs[i].copy_index;
    out.push_back(std::move(s));
  }
  return out;
}

TrainReport train_group(ArdModel& model, std::span<const TrainingSample> samples, const PgtConfig& cfg,
                        std::uint64_t shuffle_seed) {
  TrainReport report;
  if (samples.empty()) return report;
  const auto params = model.parameters();
  reset_grads(params);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(shuffle_seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    for (std::size_t idx : order) {
      const TrainingSample& s = samples[idx];
      Graph g;
      const Value pred = ard_forward(g, g.input(s.features.grid), g.input(s.coarse.grid), model,
                                     s.mask.dim(0), s.mask.dim(1));
      const Value loss = g.dice_loss(pred, g.input(s.mask), cfg.dice_eps);
      const float value = g.value(loss)[0];
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << (epoch + 1) << ", pair " << s.source_index << "/"
            << s.copy_index;
        throw NumericError(msg.str());
      }
      g.backward(loss);
      for (Tensor* p : params) {
        for (float v : p->grad()) {
          if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "non-finite gradient at epoch " << (epoch + 1) << ", pair " << s.source_index << "/"
                << s.copy_index;
            throw NumericError(msg.str());
          }
        }
      }
      sgd_step(params, cfg.lr);
      total += value;
    }
    report.epoch_loss.push_back(total / static_cast<double>(samples.size()));
  }
  return report;
}

Tensor upsample_coarse(const CoarseAnomalyMap& map, std::size_t patch_size) {
  Graph g;
  return g.value(g.upsample_bilinear(g.input(map.grid), static_cast<double>(patch_size)));
}

Tensor average_maps(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) throw ShapeError("average_maps: dims differ");
  Tensor out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] + b[i]) * 0.5f;
  return out;
}

std::vector<RefinedImage> refine_group(const ArdModel& model, bool trained, std::span<const PatchFeatureMap> features,
                                       std::span<const CoarseAnomalyMap> coarse, std::size_t patch_size) {
  if (!trained) throw ProtocolError("refine_group: decoder has not been trained on a preceding group");
  if (features.size() != coarse.size()) throw ProtocolError("refine_group: one coarse map per feature map");
  std::vector<RefinedImage> out;
  out.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    RefinedImage r;
    r.coarse = upsample_coarse(coarse[i], patch_size);
    r.refined = ard_infer(model, features[i], coarse[i]);
    r.final = average_maps(r.coarse, r.refined);
    out.push_back(std::move(r));
  }
  return out;
}

PgtResult run_pgt(std::span<const StreamImage> stream, const PgtConfig& cfg, ScorerKind scorer,
                  std::uint64_t category_seed, const GroupCallback& on_group) {
  if (stream.empty()) throw ProtocolError("run_pgt: empty image stream");
  cfg.validate();
  const auto partition = partition_groups(stream.size(), cfg.group_size);

  std::vector<PatchFeatureMap> features;
  features.reserve(stream.size());
  for (const auto& img : stream) {
    if (scorer == ScorerKind::kExternal) {
      if (!img.features || !img.coarse) throw ProtocolError("run_pgt: external scorer needs features and maps for " + img.id);
      features.push_back(*img.features);
    } else {
      features.push_back(extract_patch_features(img.image, cfg.patch_size, cfg.bank_seed));
    }
  }
  for (const auto& f : features) {
    if (f.grid.dims() != features[0].grid.dims()) throw ShapeError("run_pgt: images of one category differ in geometry");
  }

  ArdConfig arch;
  arch.feature_channels = features[0].channels();
  arch.grid_height = features[0].grid_height();
  arch.grid_width = features[0].grid_width();
  arch.patch_size = cfg.patch_size;
  arch.init_gain = cfg.init_gain;

  PgtResult result;
  result.model = ArdModel::initialize(arch, derive_seed(cfg.base_seed, category_seed, kModelSalt));
  bool trained = false;

  SynthOptions synth;
  synth.strategy = cfg.strategy;
  synth.base_seed = derive_seed(cfg.base_seed, category_seed);
  synth.mask_threshold = cfg.mask_threshold;
  synth.textures = cfg.textures;

  for (std::size_t k = 0; k < partition.size(); ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    GroupState group;
    group.index = k;
    group.positions = partition[k];
    std::vector<PatchFeatureMap> group_features;
    for (std::size_t pos : group.positions) {
      group.ids.push_back(stream[pos].id);
      group_features.push_back(features[pos]);
    }

    std::optional<GroupScorer> context;
    if (scorer == ScorerKind::kBuiltin || k + 1 < partition.size()) {
      // Built-in scoring context; for the external scorer it only scores
      // pseudo-anomalies.
      std::vector<PatchFeatureMap> builtin;
      if (scorer == ScorerKind::kBuiltin) {
        builtin = group_features;
      } else {
        for (std::size_t pos : group.positions) {
          builtin.push_back(extract_patch_features(stream[pos].image, cfg.patch_size, cfg.bank_seed));
        }
      }
      if (scorer == ScorerKind::kExternal && builtin[0].channels() != arch.feature_channels) {
        throw ProtocolError("run_pgt: external features have width " + std::to_string(arch.feature_channels) +
                            " but pseudo-anomalies are scored with the built-in extractor (width " +
                            std::to_string(builtin[0].channels()) + ")");
      }
      if (builtin.size() >= 2) context.emplace(std::move(builtin));
    }
    if (scorer == ScorerKind::kBuiltin) {
      if (!context) throw ProtocolError("mutual_score: a group needs at least 2 images");
      group.coarse = context->coarse_maps();
    } else {
      std::vector<Tensor> raw;
      for (std::size_t pos : group.positions) raw.push_back(stream[pos].coarse->grid);
      group.coarse = normalize_group(raw);
    }

    if (k == 0) {
      for (const auto& m : group.coarse) {
        RefinedImage r;
        r.coarse = upsample_coarse(m, cfg.patch_size);
        r.final = r.coarse;
        group.outputs.push_back(std::move(r));
      }
    } else {
      group.outputs = refine_group(result.model, trained, group_features, group.coarse, cfg.patch_size);
    }

    if (k + 1 < partition.size()) {
      if (!context) throw ProtocolError("run_pgt: training needs at least 2 images per group");
      if (stream[group.positions[0]].image.empty()) throw ProtocolError("run_pgt: synthesis needs the source images");
      group.pseudo_normals = choose_pseudo_normals(group, stream, cfg, category_seed);
      std::vector<Tensor> normals;
      std::vector<std::size_t> source_ids;
      for (std::size_t p : group.pseudo_normals) {
        normals.push_back(stream[group.positions[p]].image);
        source_ids.push_back(group.positions[p]);
      }
      const auto pairs = synthesize_set(normals, source_ids, cfg.per_normal, synth);
      std::vector<std::size_t> source_positions;
      for (const auto& pair : pairs) {
        const auto it = std::find(source_ids.begin(), source_ids.end(), pair.source_index);
        source_positions.push_back(group.pseudo_normals[static_cast<std::size_t>(it - source_ids.begin())]);
      }
      const auto samples = prepare_samples(pairs, *context, source_positions, cfg);
      group.train = train_group(result.model, samples, cfg, derive_seed(cfg.base_seed, category_seed, k));
      group.trained_through = true;
      trained = true;
    }
    group.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_group) on_group(group);
    result.groups.push_back(std::move(group));
  }
  return result;
}

}  // namespace anorefiner
