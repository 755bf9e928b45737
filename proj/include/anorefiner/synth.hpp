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
#include <span>
#include <string>
#include <vector>

#include "anorefiner/tensor.hpp"

namespace anorefiner {

/// Multi-octave 2-D gradient noise with seeded unit lattice gradients.
class PerlinField {
 public:
  /// `cell` is the lattice spacing of the first octave in pixels; each
  /// further octave halves the spacing and scales amplitude by `persistence`.
  PerlinField(std::uint64_t seed, double cell, int octaves = 2, double persistence = 0.5);

  double sample(double y, double x) const;
  /// Single octave at lattice spacing `cell`.
  double octave(int index, double y, double x) const;

 private:
  std::uint64_t seed_;
  double cell_;
  int octaves_;
  double persistence_;
};

inline constexpr double kMaxMaskCoverage = 0.5;
inline constexpr int kMaskRetries = 16;

/// Raw (unnormalised) field on an H x W grid, lattice cell H/4.
std::vector<double> perlin_values(std::size_t height, std::size_t width, std::uint64_t seed, int octaves);

/// Thresholded, min-max-normalised Perlin field as a binary [H, W, 1] mask.
/// Empty masks or masks covering more than half the image are redrawn with
/// seed + 1, up to 16 times.
Tensor perlin_mask(std::size_t height, std::size_t width, std::uint64_t seed, int octaves = 2,
                   double threshold = 0.5);

/// Single draw without the coverage guard.
Tensor perlin_mask_once(std::size_t height, std::size_t width, std::uint64_t seed, int octaves, double threshold);

enum class TextureKind { kChecker, kStripes, kValueNoise };

TextureKind parse_texture_kind(const std::string& s);
std::string to_string(TextureKind k);

/// Procedural texture in [0, 1] with `channels` channels.
Tensor procedural_texture(TextureKind kind, std::size_t height, std::size_t width, std::uint64_t seed,
                          std::size_t channels = 1);
/// Period in pixels of the checker texture for `seed`.
std::size_t checker_period(std::uint64_t seed);

enum class SynthStrategy { kPerlinTexture, kCutPaste };

SynthStrategy parse_strategy(const std::string& s);
std::string to_string(SynthStrategy s);

inline constexpr double kMinOpacity = 0.15;
inline constexpr double kMaxOpacity = 1.0;

struct SynthParams {
  std::uint64_t seed = 0;
  SynthStrategy strategy = SynthStrategy::kPerlinTexture;
  double opacity = 1.0;
};

/// A pseudo-anomaly image with its binary mask.
struct SynthPair {
  Tensor image;  // [H, W, ch]
  Tensor mask;   // [H, W, 1]
  std::size_t source_index = 0;
  std::size_t copy_index = 0;
  SynthParams params;
};

/// out = (1 - M) I + M (opacity T + (1 - opacity) I). Pixels outside the
/// mask are copied from `image` unchanged.
Tensor blend_anomaly(const Tensor& image, const Tensor& mask, const Tensor& texture, double opacity);
SynthPair paste_anomaly(const Tensor& image, const Tensor& mask, const Tensor& texture, double opacity);

struct SynthOptions {
  SynthStrategy strategy = SynthStrategy::kPerlinTexture;
  std::uint64_t base_seed = 0;
  double mask_threshold = 0.5;
  int octaves = 2;
  /// Optional texture images used instead of procedural textures.
  std::vector<Tensor> textures;
};

/// Pseudo-anomalies for each pseudo-normal. `source_ids` carries the
/// stream index of each image and feeds the per-pair seed.
std::vector<SynthPair> synthesize_set(std::span<const Tensor> pseudo_normals, std::span<const std::size_t> source_ids,
                                      std::size_t per_image, const SynthOptions& options);

/// One pair, reproducible from (base_seed, source id, copy index) alone.
SynthPair synthesize_pair(std::span<const Tensor> pseudo_normals, std::span<const std::size_t> source_ids,
                          std::size_t which, std::size_t copy_index, const SynthOptions& options);

/// Loads every .pgm/.ppm file of `dir`, sorted by file name.
std::vector<Tensor> load_texture_dir(const std::filesystem::path& dir);

}  // namespace anorefiner
