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

#include "anorefiner/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "anorefiner/errors.hpp"

namespace anorefiner {

std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape dims, float fill) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_string(dims_));
  }
  data_.assign(shape_size(dims_), fill);
}

Tensor::Tensor(Shape dims, std::vector<float> values) : dims_(std::move(dims)), data_(std::move(values)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_string(dims_));
  }
  if (shape_size(dims_) != data_.size()) {
    throw ShapeError("tensor dims " + shape_string(dims_) + " do not match " +
                     std::to_string(data_.size()) + " values");
  }
}

std::span<float> Tensor::ensure_grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0f);
  return *grad_;
}

std::span<const float> Tensor::grad() const {
  if (!grad_) return {};
  return *grad_;
}

std::span<float> Tensor::grad_mut() {
  if (!grad_) return {};
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
}

void Tensor::check_finite(const char* what) const {
  for (float v : data_) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace anorefiner
