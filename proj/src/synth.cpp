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

#include "anorefiner/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "anorefiner/errors.hpp"
#include "anorefiner/io.hpp"
#include "anorefiner/rng.hpp"

namespace anorefiner {
namespace {

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double lerp(double a, double b, double t) { return a + t * (b - a); }

// Tiles (and channel-adapts) a texture to [H, W, ch].
Tensor fit_texture(const Tensor& tex, std::size_t H, std::size_t W, std::size_t ch, std::size_t oy = 0,
                   std::size_t ox = 0, std::size_t th = 0, std::size_t tw = 0) {
  if (th == 0) th = tex.dim(0);
  if (tw == 0) tw = tex.dim(1);
  const std::size_t tc = tex.dim(2);
  Tensor out(Shape{H, W, ch});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t sy = oy + y % th, sx = ox + x % tw;
      for (std::size_t c = 0; c < ch; ++c) {
        float v;
        if (tc == ch) {
          v = tex.at(sy, sx, c);
        } else if (tc == 1) {
          v = tex.at(sy, sx, 0);
        } else {
          double s = 0.0;
          for (std::size_t k = 0; k < tc; ++k) s += tex.at(sy, sx, k);
          v = static_cast<float>(s / static_cast<double>(tc));
        }
        out.at(y, x, c) = v;
      }
    }
  return out;
}

// Maps a [0, 1] pattern onto a random two-colour ramp.
Tensor colourise(const std::vector<double>& pattern, std::size_t H, std::size_t W, std::size_t ch, Rng& rng) {
  std::vector<double> lo(ch), hi(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    lo[c] = rng.uniform(0.0, 0.4);
    hi[c] = rng.uniform(0.6, 1.0);
  }
  if (rng.bernoulli(0.5)) std::swap(lo, hi);
  Tensor out(Shape{H, W, ch});
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < ch; ++c) out[i * ch + c] = static_cast<float>(lerp(lo[c], hi[c], pattern[i]));
  return out;
}

}  // namespace

PerlinField::PerlinField(std::uint64_t seed, double cell, int octaves, double persistence)
    : seed_(seed), cell_(cell), octaves_(octaves), persistence_(persistence) {}

double PerlinField::octave(int index, double y, double x) const {
  const double cell = cell_ / std::ldexp(1.0, index);
  const double fy = y / cell, fx = x / cell;
  const double y0 = std::floor(fy), x0 = std::floor(fx);
  const double ty = fy - y0, tx = fx - x0;
  auto corner = [&](double ly, double lx, double dy, double dx) {
    const auto iy = static_cast<std::int64_t>(ly), ix = static_cast<std::int64_t>(lx);
    const std::uint64_t h = derive_seed(seed_, static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(iy),
                                        static_cast<std::uint64_t>(ix));
    const double angle = 2.0 * std::numbers::pi * (static_cast<double>(h >> 11) * 0x1.0p-53);
    return std::cos(angle) * dx + std::sin(angle) * dy;
  };
  const double n00 = corner(y0, x0, ty, tx);
  const double n01 = corner(y0, x0 + 1, ty, tx - 1.0);
  const double n10 = corner(y0 + 1, x0, ty - 1.0, tx);
  const double n11 = corner(y0 + 1, x0 + 1, ty - 1.0, tx - 1.0);
  const double u = fade(tx), v = fade(ty);
  return lerp(lerp(n00, n01, u), lerp(n10, n11, u), v);
}

double PerlinField::sample(double y, double x) const {
  double total = 0.0, amp = 1.0;
  for (int o = 0; o < octaves_; ++o) {
    total += amp * octave(o, y, x);
    amp *= persistence_;
  }
  return total;
}

std::vector<double> perlin_values(std::size_t height, std::size_t width, std::uint64_t seed, int octaves) {
  const PerlinField field(seed, static_cast<double>(height) / 4.0, octaves, 0.5);
  std::vector<double> v(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      v[y * width + x] = field.sample(static_cast<double>(y), static_cast<double>(x));
  return v;
}

Tensor perlin_mask_once(std::size_t height, std::size_t width, std::uint64_t seed, int octaves, double threshold) {
  const auto v = perlin_values(height, width, seed, octaves);
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  Tensor mask(Shape{height, width, 1});
  if (!(span > 0.0)) return mask;
  for (std::size_t i = 0; i < v.size(); ++i) mask[i] = (v[i] - lo) / span > threshold ? 1.0f : 0.0f;
  return mask;
}

Tensor perlin_mask(std::size_t height, std::size_t width, std::uint64_t seed, int octaves, double threshold) {
  if (height < 8 || width < 8) throw SynthesisError("perlin_mask: image must be at least 8x8");
  if (!(threshold > 0.0 && threshold < 1.0)) throw SynthesisError("perlin_mask: threshold must be in (0, 1)");
  for (int attempt = 0; attempt <= kMaskRetries; ++attempt) {
    Tensor mask = perlin_mask_once(height, width, seed + static_cast<std::uint64_t>(attempt), octaves, threshold);
    double on = 0.0;
    for (float m : mask.data()) on += m;
    if (on >= 1.0 && on <= kMaxMaskCoverage * static_cast<double>(mask.size())) return mask;
  }
  throw SynthesisError("perlin_mask: no admissible mask after " + std::to_string(kMaskRetries) + " retries");
}

TextureKind parse_texture_kind(const std::string& s) {
  if (s == "checker") return TextureKind::kChecker;
  if (s == "stripes") return TextureKind::kStripes;
  if (s == "value_noise") return TextureKind::kValueNoise;
  throw UsageError("unknown texture kind: " + s);
}

std::string to_string(TextureKind k) {
  switch (k) {
    case TextureKind::kChecker: return "checker";
    case TextureKind::kStripes: return "stripes";
    case TextureKind::kValueNoise: return "value_noise";
  }
  return "?";
}

std::size_t checker_period(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 1));
  return 2 + rng.below(15);
}

Tensor procedural_texture(TextureKind kind, std::size_t height, std::size_t width, std::uint64_t seed,
                          std::size_t channels) {
  Rng rng(derive_seed(seed, 2));
  std::vector<double> pattern(height * width);
  switch (kind) {
    case TextureKind::kChecker: {
      const std::size_t p = checker_period(seed);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) pattern[y * width + x] = ((y / p + x / p) % 2) ? 1.0 : 0.0;
      break;
    }
    case TextureKind::kStripes: {
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double period = rng.uniform(3.0, 12.0);
      const double cy = std::sin(angle), cx = std::cos(angle);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double t = (static_cast<double>(x) * cx + static_cast<double>(y) * cy) / period;
          pattern[y * width + x] = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * t);
        }
      break;
    }
    case TextureKind::kValueNoise: {
      const std::size_t spacing = rng.bernoulli(0.5) ? 4 : 8;
      const std::size_t gh = height / spacing + 2, gw = width / spacing + 2;
      std::vector<double> lattice(gh * gw);
      for (double& v : lattice) v = rng.uniform();
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const std::size_t ly = y / spacing, lx = x / spacing;
          const double ty = fade(static_cast<double>(y % spacing) / static_cast<double>(spacing));
          const double tx = fade(static_cast<double>(x % spacing) / static_cast<double>(spacing));
          const double top = lerp(lattice[ly * gw + lx], lattice[ly * gw + lx + 1], tx);
          const double bot = lerp(lattice[(ly + 1) * gw + lx], lattice[(ly + 1) * gw + lx + 1], tx);
          pattern[y * width + x] = lerp(top, bot, ty);
        }
      const auto [lo, hi] = std::minmax_element(pattern.begin(), pattern.end());
      const double a = *lo, span = *hi - *lo;
      for (double& v : pattern) v = span > 0.0 ? (v - a) / span : 0.0;
      break;
    }
  }
  return colourise(pattern, height, width, channels, rng);
}

SynthStrategy parse_strategy(const std::string& s) {
  if (s == "perlin_texture") return SynthStrategy::kPerlinTexture;
  if (s == "cutpaste") return SynthStrategy::kCutPaste;
  throw UsageError("unknown synthesis strategy: " + s);
}

std::string to_string(SynthStrategy s) {
  return s == SynthStrategy::kCutPaste ? "cutpaste" : "perlin_texture";
}

Tensor blend_anomaly(const Tensor& image, const Tensor& mask, const Tensor& texture, double opacity) {
  if (image.rank() != 3 || mask.rank() != 3 || mask.dim(2) != 1 || image.dim(0) != mask.dim(0) ||
      image.dim(1) != mask.dim(1) || texture.dims() != image.dims()) {
    throw ShapeError("paste_anomaly: image " + shape_string(image.dims()) + ", mask " + shape_string(mask.dims()) +
                     ", texture " + shape_string(texture.dims()) + " are incompatible");
  }
  const std::size_t ch = image.dim(2);
  const float d = static_cast<float>(opacity);
  Tensor out = image;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const float m = mask[p];
    if (m == 0.0f) continue;
    for (std::size_t c = 0; c < ch; ++c) {
      const float i = image[p * ch + c];
      const float blended = d * texture[p * ch + c] + (1.0f - d) * i;
      out[p * ch + c] = std::clamp((1.0f - m) * i + m * blended, 0.0f, 1.0f);
    }
  }
  return out;
}

SynthPair paste_anomaly(const Tensor& image, const Tensor& mask, const Tensor& texture, double opacity) {
  if (!(opacity >= kMinOpacity && opacity <= kMaxOpacity)) {
    throw SynthesisError("paste_anomaly: opacity must be in [0.15, 1]");
  }
  SynthPair pair;
  pair.image = blend_anomaly(image, mask, texture, opacity);
  pair.mask = mask;
  pair.params.opacity = opacity;
  return pair;
}

SynthPair synthesize_pair(std::span<const Tensor> normals, std::span<const std::size_t> source_ids, std::size_t which,
                          std::size_t copy_index, const SynthOptions& opt) {
  const Tensor& base = normals[which];
  const std::size_t H = base.dim(0), W = base.dim(1), ch = base.dim(2);
  const std::uint64_t seed = derive_seed(opt.base_seed, source_ids[which], copy_index);
  Rng rng(seed);
  const Tensor mask = perlin_mask(H, W, rng.next_u64(), opt.octaves, opt.mask_threshold);
  const double opacity = rng.uniform(kMinOpacity, kMaxOpacity);

  Tensor texture;
  if (opt.strategy == SynthStrategy::kCutPaste) {
    std::size_t donor = rng.below(normals.size() - 1);
    if (donor >= which) ++donor;
    const Tensor& d = normals[donor];
    const std::size_t th = std::max<std::size_t>(1, d.dim(0) / 4 + rng.below(d.dim(0) / 4 + 1));
    const std::size_t tw = std::max<std::size_t>(1, d.dim(1) / 4 + rng.below(d.dim(1) / 4 + 1));
    const std::size_t oy = rng.below(d.dim(0) - th + 1), ox = rng.below(d.dim(1) - tw + 1);
    texture = fit_texture(d, H, W, ch, oy, ox, th, tw);
  } else if (!opt.textures.empty()) {
    texture = fit_texture(opt.textures[rng.below(opt.textures.size())], H, W, ch);
  } else {
    const auto kind = static_cast<TextureKind>(rng.below(3));
    texture = procedural_texture(kind, H, W, rng.next_u64(), ch);
  }

  SynthPair pair = paste_anomaly(base, mask, texture, opacity);
  pair.source_index = source_ids[which];
  pair.copy_index = copy_index;
  pair.params = {seed, opt.strategy, opacity};
  return pair;
}

std::vector<SynthPair> synthesize_set(std::span<const Tensor> normals, std::span<const std::size_t> source_ids,
                                      std::size_t per_image, const SynthOptions& opt) {
  if (per_image < 1) throw ProtocolError("synthesize_set: l must be >= 1");
  if (normals.size() != source_ids.size()) throw ProtocolError("synthesize_set: one source id per image required");
  if (normals.empty()) throw ProtocolError("synthesize_set: no pseudo-normal images");
  if (opt.strategy == SynthStrategy::kCutPaste && normals.size() < 2) {
    throw ProtocolError("synthesize_set: cutpaste needs at least 2 pseudo-normal images");
  }
  std::vector<SynthPair> out;
  out.reserve(normals.size() * per_image);
  for (std::size_t i = 0; i < normals.size(); ++i)
    for (std::size_t k = 0; k < per_image; ++k) out.push_back(synthesize_pair(normals, source_ids, i, k, opt));
  return out;
}

std::vector<Tensor> load_texture_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  if (ec) throw IoError("cannot list texture directory " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<Tensor> out;
  for (const auto& f : files) out.push_back(read_pnm(f));
  if (out.empty()) throw IoError("texture directory " + dir.string() + " holds no PGM/PPM images");
  return out;
}

}  // namespace anorefiner
