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

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace anorefiner {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& dims);
std::string shape_string(const Shape& dims);

/// Dense row-major float32 tensor with an optional gradient buffer.
///
/// Activations use [height, width, channels]; convolution kernels use
/// [kh, kw, c_in, c_out].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape dims, float fill = 0.0f);
  Tensor(Shape dims, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-3 [h, w, c] accessors.
  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * dims_[1] + x) * dims_[2] + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * dims_[1] + x) * dims_[2] + c];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<float> ensure_grad();
  std::span<const float> grad() const;
  std::span<float> grad_mut();
  void zero_grad();
  void clear_grad() { grad_.reset(); }

  /// Throws ShapeError unless every value is finite.
  void check_finite(const char* what) const;

 private:
  Shape dims_;
  std::vector<float> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<float>> grad_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace anorefiner
