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

#include "anorefiner/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "anorefiner/errors.hpp"
#include "anorefiner/rng.hpp"
#include "anorefiner/synth.hpp"

namespace anorefiner {
namespace {

struct ProductStyle {
  double ring_radius, ring_width;
  std::vector<double> ring, background_a, background_b;
};

ProductStyle product_style(const DatasetSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0x57A7EULL));
  const double H = static_cast<double>(spec.input_size);
  ProductStyle s;
  s.ring_radius = H * rng.uniform(0.24, 0.32);
  s.ring_width = H * rng.uniform(0.06, 0.09);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    s.ring.push_back(rng.uniform(0.55, 0.8));
    s.background_a.push_back(rng.uniform(0.2, 0.35));
    s.background_b.push_back(rng.uniform(0.3, 0.45));
  }
  return s;
}

std::string image_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%04zu", i);
  return buf;
}

}  // namespace

GeneratedImage generate_image(const DatasetSpec& spec, std::size_t index, bool defective) {
  const std::size_t H = spec.input_size, W = spec.input_size, ch = spec.channels;
  const ProductStyle style = product_style(spec);
  Rng rng(derive_seed(spec.seed, 0x1A6EULL, index));

  const double cy = static_cast<double>(H) / 2.0 + rng.uniform(-1.5, 1.5);
  const double cx = static_cast<double>(W) / 2.0 + rng.uniform(-1.5, 1.5);
  const double gain = rng.uniform(-0.03, 0.03);
  const Tensor grain = procedural_texture(TextureKind::kValueNoise, H, W, rng.next_u64(), 1);

  GeneratedImage out{Tensor(Shape{H, W, ch}), Tensor(Shape{H, W, 1}), defective};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double r = std::sqrt(dy * dy + dx * dx);
      // Soft ring profile.
      const double ring = std::exp(-0.5 * std::pow((r - style.ring_radius) / (0.5 * style.ring_width), 2.0));
      const double t = static_cast<double>(x + y) / static_cast<double>(H + W - 2);
      const double noise = 0.04 * (grain.at(y, x, 0) - 0.5) + 0.01 * (rng.uniform() - 0.5);
      for (std::size_t c = 0; c < ch; ++c) {
        const double bg = style.background_a[c] + t * (style.background_b[c] - style.background_a[c]);
        const double v = bg + ring * (style.ring[c] - bg) + gain + noise;
        out.image.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  if (!defective) return out;

  // Irregular blob: a Perlin field restricted to a random ellipse.
  const double ey = rng.uniform(0.2, 0.8) * static_cast<double>(H);
  const double ex = rng.uniform(0.2, 0.8) * static_cast<double>(W);
  const double ry = rng.uniform(0.06, 0.18) * static_cast<double>(H);
  const double rx = rng.uniform(0.06, 0.18) * static_cast<double>(W);
  const auto field = perlin_values(H, W, rng.next_u64(), 2);
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double span = std::max(*hi - *lo, 1e-12);
  std::size_t on = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (static_cast<double>(y) - ey) / ry, v = (static_cast<double>(x) - ex) / rx;
      const double inside = 1.0 - (u * u + v * v);
      const double f = (field[y * W + x] - *lo) / span;
      if (inside > 0.0 && f + inside > 0.7) {
        out.mask.at(y, x, 0) = 1.0f;
        ++on;
      }
    }
  if (on == 0) {
    const auto y = static_cast<std::size_t>(ey), x = static_cast<std::size_t>(ex);
    out.mask.at(y, x, 0) = 1.0f;
  }

  if (rng.bernoulli(0.5)) {
    const double shift = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.15, 0.35);
    for (std::size_t p = 0; p < H * W; ++p) {
      if (out.mask[p] == 0.0f) continue;
      for (std::size_t c = 0; c < ch; ++c) {
        out.image[p * ch + c] = static_cast<float>(std::clamp(out.image[p * ch + c] + shift, 0.0, 1.0));
      }
    }
  } else {
    const auto kind = static_cast<TextureKind>(rng.below(3));
    const Tensor tex = procedural_texture(kind, H, W, rng.next_u64(), ch);
    out.image = blend_anomaly(out.image, out.mask, tex, rng.uniform(0.6, 1.0));
  }
  return out;
}

Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.n_images < 4) throw UsageError("gen: need at least 4 images");
  if (!(spec.defect_rate >= 0.0 && spec.defect_rate < 1.0)) throw UsageError("gen: defect rate must be in [0, 1)");
  if (spec.input_size < 8) throw UsageError("gen: input size must be >= 8");
  if (spec.channels != 1 && spec.channels != 3) throw UsageError("gen: channels must be 1 or 3");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  Manifest m;
  m.base_dir = out_dir;
  Rng defects(derive_seed(spec.seed, kDefectStreamSalt));
  const std::string ext = spec.channels == 1 ? ".pgm" : ".ppm";
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    const bool defective = defects.uniform() < spec.defect_rate;
    const GeneratedImage g = generate_image(spec, i, defective);
    ManifestRecord r;
    r.image_id = image_id(i);
    r.category = spec.category;
    r.path = "images/" + r.image_id + ext;
    r.gt_label = defective ? 1 : 0;
    write_pnm(out_dir / r.path, g.image);
    if (defective) {
      r.gt_mask_path = "masks/" + r.image_id + ".pgm";
      write_pnm(out_dir / *r.gt_mask_path, g.mask);
    }
    m.records.push_back(std::move(r));
  }
  write_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

}  // namespace anorefiner
