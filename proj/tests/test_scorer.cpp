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

#include <cmath>
#include <filesystem>
#include <numeric>

#include <doctest.h>

#include "anorefiner/errors.hpp"
#include "anorefiner/io.hpp"
#include "anorefiner/scorer.hpp"
#include "oracles.hpp"

using namespace anorefiner;
using oracle::random_tensor;

namespace {

PatchFeatureMap fmap(Tensor grid) {
  PatchFeatureMap f;
  f.patch_size = 8;
  f.source_height = grid.dim(0) * 8;
  f.source_width = grid.dim(1) * 8;
  f.grid = std::move(grid);
  return f;
}

// Triple loop over (image, patch, reference patch) straight from the
// definition of the score.
std::vector<std::vector<float>> brute_raw(const std::vector<PatchFeatureMap>& fs) {
  std::vector<std::vector<float>> out;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const Tensor& a = fs[i].grid;
    const std::size_t C = a.dim(2), n = a.dim(0) * a.dim(1);
    std::vector<float> s(n);
    for (std::size_t p = 0; p < n; ++p) {
      double sum = 0.0;
      for (std::size_t j = 0; j < fs.size(); ++j) {
        if (j == i) continue;
        const Tensor& b = fs[j].grid;
        double best = INFINITY;
        for (std::size_t q = 0; q < b.dim(0) * b.dim(1); ++q) {
          double d2 = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double d = static_cast<double>(a[p * C + c]) - b[q * C + c];
            d2 += d * d;
          }
          best = std::min(best, std::sqrt(d2));
        }
        sum += best;
      }
      s[p] = static_cast<float>(sum / static_cast<double>(fs.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

Tensor shifted(const Tensor& img, std::size_t dy, std::size_t dx) {
  Tensor out(img.dims());
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.dim(2);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = img.at((y + H - dy) % H, (x + W - dx) % W, c);
  return out;
}

}  // namespace

TEST_CASE("feature extraction shapes and constancy") {
  const auto f = extract_patch_features(random_tensor({16, 16, 3}, 1, 0.0, 1.0), 8, 0);
  CHECK(f.grid.dims() == Shape{2, 2, 12});
  CHECK(feature_channels(3) == 12);
  CHECK(feature_channels(1) == 10);
  CHECK(extract_patch_features(random_tensor({20, 17, 1}, 2, 0.0, 1.0), 8, 0).grid.dims() == Shape{2, 2, 10});

  const auto c = extract_patch_features(Tensor({24, 16, 3}, 0.4f), 8, 5);
  for (std::size_t p = 0; p < 6; ++p) {
    for (std::size_t k = 0; k < 12; ++k) CHECK(c.grid[p * 12 + k] == c.grid[k]);
    CHECK(c.grid[p * 12 + 3] == 0.0f);
    CHECK(std::abs(c.grid[p * 12] - 0.4f) < 1e-6);
  }
  CHECK_THROWS_AS(extract_patch_features(Tensor({4, 16, 3}), 8, 0), ShapeError);
  CHECK_THROWS_AS(extract_patch_features(Tensor({16, 16, 2}), 8, 0), ShapeError);
}

TEST_CASE("filter bank is zero-mean, unit-norm and seeded") {
  const auto a = make_filter_bank(3), b = make_filter_bank(3), c = make_filter_bank(4);
  CHECK(a.size() == kFilterBankSize);
  CHECK(a == b);
  CHECK(a != c);
  for (const auto& f : a) {
    double s = 0.0, n = 0.0;
    for (float v : f) {
      s += v;
      n += static_cast<double>(v) * v;
    }
    CHECK(std::abs(s) < 1e-6);
    CHECK(std::abs(n - 1.0) < 1e-6);
  }
}

TEST_CASE("features are translation-consistent on interior patches") {
  const Tensor img = random_tensor({48, 48, 3}, 9, 0.0, 1.0);
  const auto f0 = extract_patch_features(img, 8, 1);
  const auto f1 = extract_patch_features(shifted(img, 8, 8), 8, 1);
  // Interior patches only: border patches see different replicated pixels.
  for (std::size_t py = 1; py + 2 < 6; ++py)
    for (std::size_t px = 1; px + 2 < 6; ++px)
      for (std::size_t k = 0; k < 12; ++k) CHECK(f1.grid.at(py + 1, px + 1, k) == f0.grid.at(py, px, k));
}

TEST_CASE("mutual scores match the triple loop exactly") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::vector<PatchFeatureMap> fs;
    for (int i = 0; i < 3; ++i) fs.push_back(fmap(random_tensor({2, 2, 4}, 10 * s + i)));
    const auto want = brute_raw(fs);
    for (std::size_t i = 0; i < fs.size(); ++i) {
      const Tensor got = raw_mutual_scores(fs[i], fs, static_cast<std::ptrdiff_t>(i));
      for (std::size_t p = 0; p < 4; ++p) CHECK(got[p] == want[i][p]);
    }
    // Normalised output follows the group min-max of the same raw values.
    float lo = INFINITY, hi = -INFINITY;
    for (const auto& v : want)
      for (float x : v) lo = std::min(lo, x), hi = std::max(hi, x);
    const auto maps = mutual_score(fs);
    for (std::size_t i = 0; i < fs.size(); ++i) {
      CHECK(maps[i].normalized);
      for (std::size_t p = 0; p < 4; ++p) {
        const double expect = (static_cast<double>(want[i][p]) - lo) / (static_cast<double>(hi) - lo);
        CHECK(maps[i].grid[p] == static_cast<float>(expect));
      }
    }
  }
}

TEST_CASE("mutual score edge cases") {
  const Tensor g = random_tensor({3, 3, 5}, 4);
  std::vector<PatchFeatureMap> same = {fmap(g), fmap(g)};
  for (const auto& m : mutual_score(same))
    for (float v : m.grid.data()) CHECK(v == 0.0f);

  std::vector<PatchFeatureMap> group;
  for (int i = 0; i < 4; ++i) group.push_back(fmap(Tensor({3, 3, 5}, 0.2f)));
  group[2].grid.at(1, 2, 3) = 3.0f;
  const auto maps = mutual_score(group);
  CHECK(maps[2].grid.at(1, 2, 0) == 1.0f);
  CHECK(image_score(maps[2]) == 1.0f);

  std::vector<PatchFeatureMap> one = {fmap(g)};
  CHECK_THROWS_AS(mutual_score(one), ProtocolError);
  std::vector<PatchFeatureMap> mixed = {fmap(g), fmap(random_tensor({2, 3, 5}, 1))};
  CHECK_THROWS_AS(mutual_score(mixed), ShapeError);
}

TEST_CASE("mutual score is permutation-equivariant") {
  std::vector<PatchFeatureMap> fs;
  for (int i = 0; i < 5; ++i) fs.push_back(fmap(random_tensor({3, 2, 6}, 40 + i)));
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  std::vector<PatchFeatureMap> permuted;
  for (std::size_t p : perm) permuted.push_back(fs[p]);
  const auto a = mutual_score(fs), b = mutual_score(permuted);
  for (std::size_t i = 0; i < perm.size(); ++i) CHECK(bitwise_equal(b[i].grid, a[perm[i]].grid));
}

TEST_CASE("normalisation keeps the per-image argmax") {
  std::vector<PatchFeatureMap> fs;
  for (int i = 0; i < 4; ++i) fs.push_back(fmap(random_tensor({4, 4, 3}, 60 + i)));
  const auto maps = mutual_score(fs);
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const Tensor raw = raw_mutual_scores(fs[i], fs, static_cast<std::ptrdiff_t>(i));
    const auto ra = std::max_element(raw.data().begin(), raw.data().end()) - raw.data().begin();
    const auto na = std::max_element(maps[i].grid.data().begin(), maps[i].grid.data().end()) - maps[i].grid.data().begin();
    CHECK(ra == na);
  }
}

TEST_CASE("group scorer reproduces the group's maps and clamps outsiders") {
  std::vector<PatchFeatureMap> fs;
  for (int i = 0; i < 4; ++i) fs.push_back(fmap(random_tensor({3, 3, 4}, 80 + i)));
  const GroupScorer sc(fs);
  const auto maps = mutual_score(fs);
  for (std::size_t i = 0; i < fs.size(); ++i) {
    CHECK(bitwise_equal(sc.score(fs[i], static_cast<std::ptrdiff_t>(i)).grid, maps[i].grid));
  }
  PatchFeatureMap far = fmap(Tensor({3, 3, 4}, 50.0f));
  const CoarseAnomalyMap clamped = sc.score(far, 0);
  for (float v : clamped.grid.data()) CHECK(v == 1.0f);
}

TEST_CASE("image score is the max") {
  CoarseAnomalyMap m{Tensor({2, 2, 1}, std::vector<float>{0.1f, 0.7f, 0.3f, 0.2f}), true};
  CHECK(image_score(m) == 0.7f);
  CHECK(image_score(CoarseAnomalyMap{Tensor({3, 1, 1}, 0.25f), true}) == 0.25f);
}

TEST_CASE("external score files") {
  const auto dir = std::filesystem::temp_directory_path() / "anorefiner_test_external";
  std::filesystem::remove_all(dir);
  const Tensor f = random_tensor({4, 4, 12}, 1), a = random_tensor({4, 4, 1}, 2, 0.0, 1.0);
  write_tensor(dir / "f.anr", f);
  write_tensor(dir / "a.anr", a);
  const auto [pf, pa] = load_external(dir / "f.anr", dir / "a.anr", 8);
  CHECK(bitwise_equal(pf.grid, f));
  CHECK(bitwise_equal(pa.grid, a));
  CHECK(pf.source_height == 32);

  write_tensor(dir / "bad.anr", random_tensor({4, 4, 2}, 3));
  try {
    load_external(dir / "f.anr", dir / "bad.anr", 8);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("last dim must be 1") != std::string::npos);
  }
  write_tensor(dir / "small.anr", random_tensor({2, 4, 1}, 4));
  CHECK_THROWS_AS(load_external(dir / "f.anr", dir / "small.anr", 8), FormatError);
  write_tensor(dir / "flat.anr", random_tensor({16, 12}, 5));
  CHECK_THROWS_AS(load_external(dir / "flat.anr", dir / "a.anr", 8), FormatError);
  std::filesystem::remove_all(dir);
}
