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
#include <string>

#include "anorefiner/io.hpp"
#include "anorefiner/tensor.hpp"

namespace anorefiner {

struct DatasetSpec {
  std::size_t n_images = 120;
  double defect_rate = 0.3;
  std::size_t input_size = 64;
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  std::string category = "product";
};

/// Salt of the Bernoulli stream that decides which images carry a defect:
/// image i is defective iff the i-th draw of Rng(derive_seed(seed, salt))
/// satisfies uniform() < defect_rate.
inline constexpr std::uint64_t kDefectStreamSalt = 0xDEFEC7ULL;

struct GeneratedImage {
  Tensor image;
  Tensor mask;  // [H, W, 1]; all zero for normal images
  bool defective = false;
};

/// Deterministic procedural product image number `index`.
GeneratedImage generate_image(const DatasetSpec& spec, std::size_t index, bool defective);

/// Writes images/, masks/ and manifest.jsonl under `out_dir`.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

}  // namespace anorefiner
