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

#include "anorefiner/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>

#include "anorefiner/errors.hpp"

namespace anorefiner {
namespace {

void validate(const ScoredSet& s, bool need_negative) {
  if (s.scores.size() != s.labels.size()) throw MetricError("scored set: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : s.labels) {
    if (l != 0 && l != 1) throw MetricError("scored set: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  if (pos == 0) throw MetricError("metric undefined: no positive labels");
  if (need_negative && pos == s.labels.size()) throw MetricError("metric undefined: no negative labels");
}

// Indices ordered by descending score, negatives before positives on ties,
// then by index.
std::vector<std::size_t> ranking(const ScoredSet& s) {
  std::vector<std::size_t> idx(s.scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (s.scores[a] != s.scores[b]) return s.scores[a] > s.scores[b];
    if (s.labels[a] != s.labels[b]) return s.labels[a] < s.labels[b];
    return a < b;
  });
  return idx;
}

}  // namespace

double auroc(const ScoredSet& s) {
  validate(s, true);
  std::vector<std::size_t> idx(s.scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  std::uint64_t wins = 0, ties = 0, neg_below = 0, pos_total = 0, neg_total = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
      (s.labels[idx[j]] ? pos : neg) += 1;
      ++j;
    }
    wins += pos * neg_below;
    ties += pos * neg;
    neg_below += neg;
    pos_total += pos;
    neg_total += neg;
    i = j;
  }
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
         (static_cast<double>(pos_total) * static_cast<double>(neg_total));
}

double average_precision(const ScoredSet& s) {
  validate(s, false);
  const auto idx = ranking(s);
  std::uint64_t tp = 0, positives = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (!s.labels[idx[r]]) continue;
    ++tp;
    ++positives;
    total += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  return total / static_cast<double>(positives);
}

double f1_max(const ScoredSet& s) {
  validate(s, false);
  const auto idx = ranking(s);
  const auto positives = static_cast<std::uint64_t>(std::count(s.labels.begin(), s.labels.end(), 1));
  double best = 0.0;
  std::uint64_t tp = 0, fp = 0;
  // Each threshold admits every item with score >= t, i.e. whole tie blocks.
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
      (s.labels[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    const std::uint64_t fn = positives - tp;
    const std::uint64_t denom = 2 * tp + fp + fn;
    const double f1 = denom ? static_cast<double>(2 * tp) / static_cast<double>(denom) : 0.0;
    best = std::max(best, f1);
    i = j;
  }
  return best;
}

MetricTriple evaluate_set(const ScoredSet& s) { return {auroc(s), f1_max(s), average_precision(s)}; }

MetricTriple evaluate_pixel(std::span<const Tensor> maps, std::span<const Tensor> masks) {
  if (maps.size() != masks.size()) throw ShapeError("evaluate_pixel: one mask per map required");
  ScoredSet s;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].dims() != masks[i].dims()) {
      throw ShapeError("evaluate_pixel: map " + shape_string(maps[i].dims()) + " vs mask " +
                       shape_string(masks[i].dims()));
    }
    for (std::size_t k = 0; k < maps[i].size(); ++k) {
      const float m = masks[i][k];
      if (m != 0.0f && m != 1.0f) throw ShapeError("evaluate_pixel: masks must be binary");
      s.scores.push_back(maps[i][k]);
      s.labels.push_back(m == 1.0f ? 1 : 0);
    }
  }
  return evaluate_set(s);
}

MetricTriple evaluate_image(std::span<const double> scores, std::span<const int> labels) {
  return evaluate_set(ScoredSet{{scores.begin(), scores.end()}, {labels.begin(), labels.end()}});
}

}  // namespace anorefiner
