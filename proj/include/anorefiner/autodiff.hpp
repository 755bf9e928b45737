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
#include <span>
#include <vector>

#include "anorefiner/tensor.hpp"

namespace anorefiner {

/// Handle to a node of a Graph. Only meaningful for the graph that issued it.
struct Value {
  std::uint32_t id = 0;
};

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kConv2d,
  kUpsample,
  kAdd,
  kSub,
  kMul,
  kExp,
  kSigmoid,
  kRelu,
  kConcat,
  kSum,
  kDice,
};

/// Tape of differentiable operations, rebuilt for every forward pass.
///
/// Parameters are bound by reference: backward() accumulates into
/// Tensor::grad of each bound parameter, so those tensors must outlive the
/// graph. Repeated backward() calls without zeroing accumulate.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Value constant(Tensor t);
  /// Gradients flow into `t.grad` when t.requires_grad() is set.
  Value parameter(Tensor& t);
  /// Binds `t` without copying; no gradient is tracked.
  Value input(const Tensor& t);
  Value input(Tensor&&) = delete;

  /// With gradients disabled, parameter() never writes to the bound
  /// tensor and behaves like input().
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  const Tensor& value(Value v) const;
  /// Node-local gradient from the last backward(); empty if not reached.
  std::span<const float> grad(Value v) const;

  /// Stride-1 convolution with zero "same" padding; k must be 1, 3 or 5.
  Value conv2d(Value input, Value kernel, Value bias);
  /// Bilinear resampling with half-pixel centres (align_corners = false).
  Value upsample_bilinear(Value input, double factor);

  // Binary ops accept identical dims, or `b` with a trailing channel dim of
  // 1 that is broadcast across the channels of `a`.
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);

  Value exp(Value a);
  Value sigmoid(Value a);
  Value relu(Value a);

  Value concat_channels(Value a, Value b);
  Value sum(Value a);
  /// 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps). `mask` takes no gradient.
  Value dice_loss(Value pred, Value mask, double eps);

  void backward(Value loss);

  std::size_t size() const { return nodes_.size(); }
  Op op(Value v) const { return nodes_.at(v.id).op; }

 private:
  struct Node {
    Op op = Op::kConstant;
    std::uint32_t in0 = 0;
    std::uint32_t in1 = 0;
    std::uint32_t in2 = 0;
    double attr = 0.0;
    bool needs_grad = false;
    Tensor value;
    const Tensor* bound = nullptr;
    Tensor* grad_target = nullptr;
    std::vector<float> grad;
  };

  Value push(Node node);
  Node& node(Value v) { return nodes_.at(v.id); }
  const Node& node(Value v) const { return nodes_.at(v.id); }
  const Tensor& val(std::uint32_t id) const;
  std::vector<float>& grad_buf(std::uint32_t id);
  Value binary(Op op, Value a, Value b);
  Value unary(Op op, Value a);

  void backward_conv(const Node& n);
  void backward_upsample(const Node& n);
  void backward_binary(const Node& n);
  void backward_unary(const Node& n);
  void backward_concat(const Node& n);
  void backward_sum(const Node& n);
  void backward_dice(const Node& n);

  std::vector<Node> nodes_;
  std::vector<float> scratch_;
  bool grad_enabled_ = true;
};

/// param -= lr * grad, then zero the gradient. Throws ShapeError if a
/// parameter has no gradient buffer.
void sgd_step(std::span<Tensor* const> params, float lr);
void reset_grads(std::span<Tensor* const> params);

}  // namespace anorefiner
