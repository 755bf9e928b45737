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

#include <span>
#include <vector>

#include "anorefiner/tensor.hpp"

namespace anorefiner {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 or 1
};

struct MetricTriple {
  double auroc = 0.0;
  double f1max = 0.0;
  double ap = 0.0;
};

/// Mann-Whitney statistic (wins + ties / 2) / (P N). Throws MetricError
/// unless both classes are present.
double auroc(const ScoredSet& s);

/// Mean precision at the rank of each positive, ranking by descending score
/// with negatives placed before positives on equal scores.
double average_precision(const ScoredSet& s);

/// Best F1 over thresholds at the distinct scores (predict score >= t).
double f1_max(const ScoredSet& s);

MetricTriple evaluate_set(const ScoredSet& s);

/// Flattens every pixel of every map into one scored set.
MetricTriple evaluate_pixel(std::span<const Tensor> maps, std::span<const Tensor> masks);
MetricTriple evaluate_image(std::span<const double> scores, std::span<const int> labels);

}  // namespace anorefiner
