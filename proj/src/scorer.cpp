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

#include "anorefiner/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "anorefiner/errors.hpp"
#include "anorefiner/io.hpp"
#include "anorefiner/rng.hpp"

namespace anorefiner {
namespace {

// Statistics of the pixel block [y0, y0+h) x [x0, x0+w).
void block_features(const Tensor& image, const Tensor& intensity, const std::vector<Tensor>& responses,
                    std::size_t y0, std::size_t x0, std::size_t h, std::size_t w, std::vector<double>& out) {
  const std::size_t ch = image.dim(2);
  const double n = static_cast<double>(h * w);
  std::size_t k = 0;
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::size_t y = y0; y < y0 + h; ++y)
      for (std::size_t x = x0; x < x0 + w; ++x) s += image.at(y, x, c);
    out[k++] = s / n;
  }
  double mean = 0.0;
  for (std::size_t y = y0; y < y0 + h; ++y)
    for (std::size_t x = x0; x < x0 + w; ++x) mean += intensity.at(y, x, 0);
  mean /= n;
  double var = 0.0;
  for (std::size_t y = y0; y < y0 + h; ++y)
    for (std::size_t x = x0; x < x0 + w; ++x) {
      const double d = intensity.at(y, x, 0) - mean;
      var += d * d;
    }
  out[k++] = std::sqrt(var / n);
  for (const Tensor& r : responses) {
    double s = 0.0;
    for (std::size_t y = y0; y < y0 + h; ++y)
      for (std::size_t x = x0; x < x0 + w; ++x) s += r.at(y, x, 0);
    out[k++] = s / n;
  }
}

double patch_distance(const float* a, const float* b, std::size_t c) {
  double s = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

std::vector<Filter3x3> make_filter_bank(std::uint64_t seed, std::size_t count) {
  Rng rng(derive_seed(seed, 0xF17E5ULL));
  std::vector<Filter3x3> bank(count);
  for (auto& f : bank) {
    double mean = 0.0;
    for (float& v : f) {
      v = static_cast<float>(rng.uniform(-1.0, 1.0));
      mean += v;
    }
    mean /= 9.0;
    double norm = 0.0;
    for (float& v : f) {
      v = static_cast<float>(v - mean);
      norm += static_cast<double>(v) * v;
    }
    norm = std::sqrt(norm);
    for (float& v : f) v = static_cast<float>(v / norm);
  }
  return bank;
}

PatchFeatureMap extract_patch_features(const Tensor& image, std::size_t patch_size, std::uint64_t bank_seed) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw ShapeError("extract_patch_features: image must be [H,W,1] or [H,W,3], got " + shape_string(image.dims()));
  }
  if (patch_size < 2 || patch_size % 2 != 0) {
    throw ShapeError("extract_patch_features: patch size must be even and >= 2");
  }
  const std::size_t H = image.dim(0), W = image.dim(1), ch = image.dim(2);
  if (H < patch_size || W < patch_size) {
    throw ShapeError("extract_patch_features: image " + shape_string(image.dims()) + " smaller than one patch");
  }

  Tensor intensity(Shape{H, W, 1});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0.0;
      for (std::size_t c = 0; c < ch; ++c) s += image.at(y, x, c);
      intensity.at(y, x, 0) = static_cast<float>(s / static_cast<double>(ch));
    }

  // Absolute filter responses with replicated borders.
  const auto bank = make_filter_bank(bank_seed);
  std::vector<Tensor> responses;
  responses.reserve(bank.size());
  for (const auto& f : bank) {
    Tensor r(Shape{H, W, 1});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto sy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(H) - 1));
            const auto sx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(W) - 1));
            s += static_cast<double>(f[static_cast<std::size_t>((dy + 1) * 3 + dx + 1)]) * intensity.at(sy, sx, 0);
          }
        r.at(y, x, 0) = static_cast<float>(std::abs(s));
      }
    responses.push_back(std::move(r));
  }

  const std::size_t hp = H / patch_size, wp = W / patch_size, C = feature_channels(ch);
  const std::size_t half = patch_size / 2;
  PatchFeatureMap out{Tensor(Shape{hp, wp, C}), patch_size, H, W};
  std::vector<double> full(C), sub(C), acc(C);
  for (std::size_t py = 0; py < hp; ++py)
    for (std::size_t px = 0; px < wp; ++px) {
      const std::size_t y0 = py * patch_size, x0 = px * patch_size;
      block_features(image, intensity, responses, y0, x0, patch_size, patch_size, full);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t by = 0; by < 2; ++by)
        for (std::size_t bx = 0; bx < 2; ++bx) {
          block_features(image, intensity, responses, y0 + by * half, x0 + bx * half, half, half, sub);
          for (std::size_t k = 0; k < C; ++k) acc[k] += sub[k];
        }
      for (std::size_t k = 0; k < C; ++k) out.grid.at(py, px, k) = static_cast<float>(0.5 * (full[k] + acc[k] / 4.0));
    }
  return out;
}

Tensor raw_mutual_scores(const PatchFeatureMap& query, std::span<const PatchFeatureMap> refs, std::ptrdiff_t skip) {
  const std::size_t hp = query.grid_height(), wp = query.grid_width(), C = query.channels();
  const std::size_t np = hp * wp;
  std::size_t used = 0;
  std::vector<double> acc(np, 0.0);
  for (std::size_t j = 0; j < refs.size(); ++j) {
    if (static_cast<std::ptrdiff_t>(j) == skip) continue;
    const Tensor& ref = refs[j].grid;
    if (ref.dim(2) != C) throw ShapeError("mutual_score: feature width mismatch");
    const std::size_t nr = ref.dim(0) * ref.dim(1);
    for (std::size_t p = 0; p < np; ++p) {
      double best = std::numeric_limits<double>::infinity();
      const float* fp = query.grid.data().data() + p * C;
      for (std::size_t q = 0; q < nr; ++q) best = std::min(best, patch_distance(fp, ref.data().data() + q * C, C));
      acc[p] += best;
    }
    ++used;
  }
  if (used == 0) throw ProtocolError("mutual_score: need at least one reference image");
  Tensor out(Shape{hp, wp, 1});
  for (std::size_t p = 0; p < np; ++p) out[p] = static_cast<float>(acc[p] / static_cast<double>(used));
  return out;
}

ScoreRange score_range(std::span<const Tensor> raw) {
  ScoreRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Tensor& t : raw)
    for (float v : t.data()) {
      r.lo = std::min(r.lo, static_cast<double>(v));
      r.hi = std::max(r.hi, static_cast<double>(v));
    }
  return r;
}

CoarseAnomalyMap normalize_scores(const Tensor& raw, const ScoreRange& range) {
  CoarseAnomalyMap m{Tensor(raw.dims()), true};
  if (range.degenerate()) return m;
  const double span = range.hi - range.lo;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    m.grid[i] = static_cast<float>(std::clamp((raw[i] - range.lo) / span, 0.0, 1.0));
  }
  return m;
}

std::vector<CoarseAnomalyMap> normalize_group(std::span<const Tensor> raw) {
  const ScoreRange range = score_range(raw);
  std::vector<CoarseAnomalyMap> out;
  out.reserve(raw.size());
  for (const Tensor& t : raw) out.push_back(normalize_scores(t, range));
  return out;
}

std::vector<CoarseAnomalyMap> mutual_score(std::span<const PatchFeatureMap> features) {
  if (features.size() < 2) throw ProtocolError("mutual_score: a group needs at least 2 images");
  for (const auto& f : features) {
    if (f.grid.dims() != features[0].grid.dims()) {
      throw ShapeError("mutual_score: feature grids differ: " + shape_string(f.grid.dims()) + " vs " +
                       shape_string(features[0].grid.dims()));
    }
  }
  std::vector<Tensor> raw;
  raw.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    raw.push_back(raw_mutual_scores(features[i], features, static_cast<std::ptrdiff_t>(i)));
  }
  return normalize_group(raw);
}

GroupScorer::GroupScorer(std::vector<PatchFeatureMap> features) : features_(std::move(features)) {
  if (features_.size() < 2) throw ProtocolError("mutual_score: a group needs at least 2 images");
  std::vector<Tensor> raw;
  raw.reserve(features_.size());
  for (const auto& f : features_) {
    if (f.grid.dims() != features_[0].grid.dims()) throw ShapeError("mutual_score: feature grids differ");
  }
  for (std::size_t i = 0; i < features_.size(); ++i) {
    raw.push_back(raw_mutual_scores(features_[i], features_, static_cast<std::ptrdiff_t>(i)));
  }
  range_ = score_range(raw);
  for (const Tensor& t : raw) coarse_.push_back(normalize_scores(t, range_));
}

CoarseAnomalyMap GroupScorer::score(const PatchFeatureMap& query, std::ptrdiff_t exclude) const {
  return normalize_scores(raw_mutual_scores(query, features_, exclude), range_);
}

float image_score(const CoarseAnomalyMap& map) {
  const auto d = map.grid.data();
  return *std::max_element(d.begin(), d.end());
}

std::pair<PatchFeatureMap, CoarseAnomalyMap> load_external(const std::filesystem::path& feature_path,
                                                           const std::filesystem::path& anomaly_path,
                                                           std::size_t patch_size) {
  Tensor f = read_tensor(feature_path);
  Tensor a = read_tensor(anomaly_path);
  if (f.rank() != 3) throw FormatError(feature_path.string() + ": feature rank must be 3");
  if (a.rank() != 3) throw FormatError(anomaly_path.string() + ": anomaly rank must be 3");
  if (a.dim(2) != 1) throw FormatError(anomaly_path.string() + ": anomaly last dim must be 1");
  if (a.dim(0) != f.dim(0) || a.dim(1) != f.dim(1)) {
    throw FormatError(anomaly_path.string() + ": anomaly spatial dims " + shape_string(a.dims()) +
                      " do not match features " + shape_string(f.dims()));
  }
  const std::size_t H = f.dim(0) * patch_size, W = f.dim(1) * patch_size;
  return {PatchFeatureMap{std::move(f), patch_size, H, W}, CoarseAnomalyMap{std::move(a), false}};
}

}  // namespace anorefiner
