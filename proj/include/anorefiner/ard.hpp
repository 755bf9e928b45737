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

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "anorefiner/autodiff.hpp"
#include "anorefiner/scorer.hpp"
#include "anorefiner/tensor.hpp"

namespace anorefiner {

/// Geometry and channel plan of the refinement decoder.
struct ArdConfig {
  std::size_t feature_channels = 12;
  std::size_t grid_height = 8;
  std::size_t grid_width = 8;
  std::size_t patch_size = 8;

  std::size_t anomaly_init_width = 64;
  std::size_t image_init_width = 256;
  std::array<std::size_t, 2> image_widths = {192, 128};
  std::array<std::size_t, 2> anomaly_widths = {48, 32};
  std::size_t head_width = 32;
  /// Kernels are drawn from U(-g/sqrt(fan_in), +g/sqrt(fan_in)).
  double init_gain = 1.0;

  std::size_t output_height() const { return grid_height * patch_size; }
  std::size_t output_width() const { return grid_width * patch_size; }
};

struct ConvParams {
  Tensor kernel;  // [k, k, c_in, c_out]
  Tensor bias;    // [c_out]
};

struct AttentionParams {
  ConvParams adj_top;
  ConvParams adj_down;
  Tensor beta;  // [h, w, 1], one learnable coefficient per location
  ConvParams w_conv1;
  ConvParams w_conv2;  // single output channel
};

struct StageParams {
  ConvParams img_conv;  // 5x5
  ConvParams ano_conv;  // 3x3
  AttentionParams aa;
  ConvParams fuse_conv;  // 1x1 over concat(attended image, anomaly)
};

struct BiParams {
  ConvParams f2a_conv1;
  ConvParams f2a_conv2;
  ConvParams a2f_conv1;
  ConvParams a2f_conv2;
};

struct HeadParams {
  ConvParams fuse;  // 1x1
  ConvParams out;   // 3x3 -> 1
};

/// All learnable state of the decoder.
class ArdModel {
 public:
  ArdModel() = default;
  /// Kernels ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, beta = 1,
  /// and zeroed residual convolutions in the BI block.
  static ArdModel initialize(const ArdConfig& config, std::uint64_t seed);

  const ArdConfig& config() const { return config_; }

  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  std::vector<Tensor*> parameters();

  void save(const std::filesystem::path& dir) const;
  static ArdModel load(const std::filesystem::path& dir);

  ConvParams init_a_conv;
  ConvParams init_f_conv;
  std::array<StageParams, 2> stages;
  BiParams bi;
  HeadParams head;

 private:
  ArdConfig config_;
};

bool bitwise_equal(const ArdModel& a, const ArdModel& b);

/// Image and anomaly branch activations flowing through the decoder.
struct Branches {
  Value image;
  Value anomaly;
};

/// Intermediate nodes of one anomaly-attention evaluation.
struct AttentionTrace {
  Value y_fuse;
  Value zeta;
  Value weighted;
  Value weight;
};

Value conv(Graph& g, Value x, ConvParams& p);

/// Lifts A to the anomaly width and fuses it with F into the initial image
/// feature.
Branches init_features(Graph& g, Value features, Value anomaly, ArdModel& model);

/// zeta = exp((beta - 1) * Y_fuse), Y = Y_fuse * zeta, W = sigmoid of two
/// 3x3 convs of Y; returns W * Y_down.
Value anomaly_attention(Graph& g, Value y_top, Value y_down, AttentionParams& p, AttentionTrace* trace = nullptr);

/// x2 upsampling of both branches followed by attention and fusion.
Branches ar_block(Graph& g, Branches in, StageParams& p);

/// Cross-branch residual refinement:
///   A' = A + conv(relu(conv(F))),  F' = F + conv(relu(conv(A))).
Branches bi_block(Graph& g, Branches in, BiParams& p);

/// Full decoder. Returns the [H, W, 1] sigmoid map.
Value ard_forward(Graph& g, Value features, Value anomaly, ArdModel& model, std::size_t target_height,
                  std::size_t target_width);

/// Inference-only forward pass; the model is not modified.
Tensor ard_infer(const ArdModel& model, const PatchFeatureMap& features, const CoarseAnomalyMap& anomaly);

}  // namespace anorefiner
