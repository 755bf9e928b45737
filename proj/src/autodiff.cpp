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

#include "anorefiner/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "anorefiner/errors.hpp"

namespace anorefiner {
namespace {

struct ConvGeom {
  std::size_t h, w, cin, cout, k;
};

// Row p of `col` holds the k*k*cin receptive field of output pixel p in
// kernel order [dy][dx][c]; out-of-image taps stay zero.
void im2col(const float* in, const ConvGeom& g, float* col) {
  const std::size_t kkc = g.k * g.k * g.cin;
  const long r = static_cast<long>(g.k / 2);
  std::fill(col, col + g.h * g.w * kkc, 0.0f);
  for (std::size_t y = 0; y < g.h; ++y) {
    for (std::size_t x = 0; x < g.w; ++x) {
      float* row = col + (y * g.w + x) * kkc;
      for (std::size_t dy = 0; dy < g.k; ++dy) {
        const long sy = static_cast<long>(y + dy) - r;
        if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
        for (std::size_t dx = 0; dx < g.k; ++dx) {
          const long sx = static_cast<long>(x + dx) - r;
          if (sx < 0 || sx >= static_cast<long>(g.w)) continue;
          const float* src = in + (static_cast<std::size_t>(sy) * g.w + static_cast<std::size_t>(sx)) * g.cin;
          std::copy(src, src + g.cin, row + (dy * g.k + dx) * g.cin);
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, float* in_grad) {
  const std::size_t kkc = g.k * g.k * g.cin;
  const long r = static_cast<long>(g.k / 2);
  for (std::size_t y = 0; y < g.h; ++y) {
    for (std::size_t x = 0; x < g.w; ++x) {
      const float* row = col + (y * g.w + x) * kkc;
      for (std::size_t dy = 0; dy < g.k; ++dy) {
        const long sy = static_cast<long>(y + dy) - r;
        if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
        for (std::size_t dx = 0; dx < g.k; ++dx) {
          const long sx = static_cast<long>(x + dx) - r;
          if (sx < 0 || sx >= static_cast<long>(g.w)) continue;
          float* dst = in_grad + (static_cast<std::size_t>(sy) * g.w + static_cast<std::size_t>(sx)) * g.cin;
          const float* src = row + (dy * g.k + dx) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

struct AxisSample {
  std::size_t i0, i1;
  float w;
};

std::size_t upsampled_extent(std::size_t n, double factor) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * factor));
}

std::vector<AxisSample> axis_samples(std::size_t in, std::size_t out, double factor) {
  std::vector<AxisSample> s(out);
  const double hi = static_cast<double>(in - 1);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, hi);
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    s[o].i0 = i0;
    s[o].i1 = std::min(i0 + 1, in - 1);
    s[o].w = static_cast<float>(src - static_cast<double>(i0));
  }
  return s;
}

bool broadcastable(const Shape& a, const Shape& b) {
  if (a == b) return true;
  if (a.size() != b.size() || a.empty() || b.back() != 1) return false;
  return std::equal(a.begin(), a.end() - 1, b.begin());
}

float sigmoidf(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

}  // namespace

Value Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::val(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.bound ? *n.bound : n.value;
}

const Tensor& Graph::value(Value v) const { return val(v.id); }

std::span<const float> Graph::grad(Value v) const { return node(v).grad; }

std::vector<float>& Graph::grad_buf(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(val(id).size(), 0.0f);
  return n.grad;
}

Value Graph::constant(Tensor t) {
  Node n;
  n.op = Op::kConstant;
  t.set_requires_grad(false);
  t.clear_grad();
  n.value = std::move(t);
  return push(std::move(n));
}

Value Graph::parameter(Tensor& t) {
  if (!grad_enabled_) return input(t);
  Node n;
  n.op = Op::kParameter;
  n.bound = &t;
  n.grad_target = &t;
  n.needs_grad = t.requires_grad();
  return push(std::move(n));
}

Value Graph::input(const Tensor& t) {
  Node n;
  n.op = Op::kConstant;
  n.bound = &t;
  return push(std::move(n));
}

Value Graph::conv2d(Value input, Value kernel, Value bias) {
  const Tensor& x = value(input);
  const Tensor& kt = value(kernel);
  const Tensor& b = value(bias);
  if (x.rank() != 3) throw ShapeError("conv2d: input must be [h,w,c], got " + shape_string(x.dims()));
  if (kt.rank() != 4 || kt.dim(0) != kt.dim(1) || kt.dim(0) % 2 == 0 || kt.dim(0) > 5) {
    throw ShapeError("conv2d: kernel must be [k,k,c_in,c_out] with k in {1,3,5}, got " +
                     shape_string(kt.dims()));
  }
  if (kt.dim(2) != x.dim(2)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(2)) + " channels, kernel expects " +
                     std::to_string(kt.dim(2)));
  }
  if (b.size() != kt.dim(3)) throw ShapeError("conv2d: bias length must equal c_out");

  const ConvGeom g{x.dim(0), x.dim(1), x.dim(2), kt.dim(3), kt.dim(0)};
  const std::size_t px = g.h * g.w;
  const std::size_t kkc = g.k * g.k * g.cin;
  Tensor out(Shape{g.h, g.w, g.cout});
  float* o = out.data().data();
  for (std::size_t p = 0; p < px; ++p) std::copy(b.data().begin(), b.data().end(), o + p * g.cout);

  const float* a = x.data().data();
  if (g.k > 1) {
    scratch_.resize(px * kkc);
    im2col(a, g, scratch_.data());
    a = scratch_.data();
  }
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(px), static_cast<int>(g.cout),
              static_cast<int>(kkc), 1.0f, a, static_cast<int>(kkc), kt.data().data(), static_cast<int>(g.cout),
              1.0f, o, static_cast<int>(g.cout));

  Node n;
  n.op = Op::kConv2d;
  n.in0 = input.id;
  n.in1 = kernel.id;
  n.in2 = bias.id;
  n.needs_grad = node(input).needs_grad || node(kernel).needs_grad || node(bias).needs_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::upsample_bilinear(Value input, double factor) {
  if (!(factor >= 1.0)) throw ShapeError("upsample_bilinear: factor must be >= 1 (downsampling unsupported)");
  const Tensor& x = value(input);
  if (x.rank() != 3) throw ShapeError("upsample_bilinear: input must be [h,w,c]");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t oh = upsampled_extent(h, factor), ow = upsampled_extent(w, factor);
  const auto sy = axis_samples(h, oh, factor);
  const auto sx = axis_samples(w, ow, factor);
  Tensor out(Shape{oh, ow, c});
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xo = 0; xo < ow; ++xo) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float v00 = x.at(sy[y].i0, sx[xo].i0, ch);
        const float v01 = x.at(sy[y].i0, sx[xo].i1, ch);
        const float v10 = x.at(sy[y].i1, sx[xo].i0, ch);
        const float v11 = x.at(sy[y].i1, sx[xo].i1, ch);
        const float top = v00 + sx[xo].w * (v01 - v00);
        const float bot = v10 + sx[xo].w * (v11 - v10);
        out.at(y, xo, ch) = top + sy[y].w * (bot - top);
      }
    }
  }
  Node n;
  n.op = Op::kUpsample;
  n.in0 = input.id;
  n.attr = factor;
  n.needs_grad = node(input).needs_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::binary(Op op, Value av, Value bv) {
  const Tensor& a = value(av);
  const Tensor& b = value(bv);
  if (!broadcastable(a.dims(), b.dims())) {
    throw ShapeError("elementwise: incompatible dims " + shape_string(a.dims()) + " and " + shape_string(b.dims()));
  }
  const std::size_t c = a.rank() ? a.dims().back() : 1;
  const bool bc = a.dims() != b.dims();
  Tensor out(a.dims());
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const float bi = bc ? bd[i / c] : bd[i];
    switch (op) {
      case Op::kAdd: od[i] = ad[i] + bi; break;
      case Op::kSub: od[i] = ad[i] - bi; break;
      default: od[i] = ad[i] * bi; break;
    }
  }
  Node n;
  n.op = op;
  n.in0 = av.id;
  n.in1 = bv.id;
  n.needs_grad = node(av).needs_grad || node(bv).needs_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::add(Value a, Value b) { return binary(Op::kAdd, a, b); }
Value Graph::sub(Value a, Value b) { return binary(Op::kSub, a, b); }
Value Graph::mul(Value a, Value b) { return binary(Op::kMul, a, b); }

Value Graph::unary(Op op, Value av) {
  const Tensor& a = value(av);
  Tensor out(a.dims());
  const auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    switch (op) {
      case Op::kExp: od[i] = std::exp(ad[i]); break;
      case Op::kSigmoid: od[i] = sigmoidf(ad[i]); break;
      default: od[i] = ad[i] > 0.0f ? ad[i] : 0.0f; break;
    }
  }
  Node n;
  n.op = op;
  n.in0 = av.id;
  n.needs_grad = node(av).needs_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::exp(Value a) { return unary(Op::kExp, a); }
Value Graph::sigmoid(Value a) { return unary(Op::kSigmoid, a); }
Value Graph::relu(Value a) { return unary(Op::kRelu, a); }

Value Graph::concat_channels(Value av, Value bv) {
  const Tensor& a = value(av);
  const Tensor& b = value(bv);
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_string(a.dims()) + " vs " + shape_string(b.dims()));
  }
  const std::size_t px = a.dim(0) * a.dim(1), c1 = a.dim(2), c2 = b.dim(2);
  Tensor out(Shape{a.dim(0), a.dim(1), c1 + c2});
  auto od = out.data();
  for (std::size_t p = 0; p < px; ++p) {
    std::copy_n(a.data().begin() + p * c1, c1, od.begin() + p * (c1 + c2));
    std::copy_n(b.data().begin() + p * c2, c2, od.begin() + p * (c1 + c2) + c1);
  }
  Node n;
  n.op = Op::kConcat;
  n.in0 = av.id;
  n.in1 = bv.id;
  n.needs_grad = node(av).needs_grad || node(bv).needs_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::sum(Value av) {
  double s = 0.0;
  for (float v : value(av).data()) s += v;
  Node n;
  n.op = Op::kSum;
  n.in0 = av.id;
  n.needs_grad = node(av).needs_grad;
  n.value = Tensor::scalar(static_cast<float>(s));
  return push(std::move(n));
}

Value Graph::dice_loss(Value pred, Value mask, double eps) {
  const Tensor& p = value(pred);
  const Tensor& g = value(mask);
  if (p.dims() != g.dims()) {
    throw ShapeError("dice_loss: pred " + shape_string(p.dims()) + " vs mask " + shape_string(g.dims()));
  }
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  Node n;
  n.op = Op::kDice;
  n.in0 = pred.id;
  n.in1 = mask.id;
  n.attr = eps;
  n.needs_grad = node(pred).needs_grad;
  n.value = Tensor::scalar(static_cast<float>(1.0 - (2.0 * inter + eps) / (sp + sg + eps)));
  return push(std::move(n));
}

void Graph::backward(Value loss) {
  if (value(loss).size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(value(loss).dims()));
  }
  for (Node& n : nodes_) n.grad.clear();
  if (!node(loss).needs_grad) return;
  grad_buf(loss.id)[0] = 1.0f;
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    switch (n.op) {
      case Op::kConstant: break;
      case Op::kParameter: {
        auto dst = n.grad_target->ensure_grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
        break;
      }
      case Op::kConv2d: backward_conv(n); break;
      case Op::kUpsample: backward_upsample(n); break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: backward_binary(n); break;
      case Op::kExp:
      case Op::kSigmoid:
      case Op::kRelu: backward_unary(n); break;
      case Op::kConcat: backward_concat(n); break;
      case Op::kSum: backward_sum(n); break;
      case Op::kDice: backward_dice(n); break;
    }
  }
}

void Graph::backward_conv(const Node& n) {
  const Tensor& x = val(n.in0);
  const Tensor& kt = val(n.in1);
  const ConvGeom g{x.dim(0), x.dim(1), x.dim(2), kt.dim(3), kt.dim(0)};
  const std::size_t px = g.h * g.w;
  const std::size_t kkc = g.k * g.k * g.cin;
  const float* up = n.grad.data();
  const int ipx = static_cast<int>(px), icout = static_cast<int>(g.cout), ikkc = static_cast<int>(kkc);

  if (nodes_[n.in2].needs_grad) {
    auto& gb = grad_buf(n.in2);
    for (std::size_t co = 0; co < g.cout; ++co) {
      double s = 0.0;
      for (std::size_t p = 0; p < px; ++p) s += up[p * g.cout + co];
      gb[co] += static_cast<float>(s);
    }
  }
  if (nodes_[n.in1].needs_grad) {
    auto& gk = grad_buf(n.in1);
    const float* a = x.data().data();
    if (g.k > 1) {
      scratch_.resize(px * kkc);
      im2col(a, g, scratch_.data());
      a = scratch_.data();
    }
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, ikkc, icout, ipx, 1.0f, a, ikkc, up, icout, 1.0f,
                gk.data(), icout);
  }
  if (nodes_[n.in0].needs_grad) {
    auto& gx = grad_buf(n.in0);
    if (g.k == 1) {
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, ipx, ikkc, icout, 1.0f, up, icout, kt.data().data(),
                  icout, 1.0f, gx.data(), ikkc);
    } else {
      scratch_.resize(px * kkc);
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, ipx, ikkc, icout, 1.0f, up, icout, kt.data().data(),
                  icout, 0.0f, scratch_.data(), ikkc);
      col2im_add(scratch_.data(), g, gx.data());
    }
  }
}

void Graph::backward_upsample(const Node& n) {
  const Tensor& x = val(n.in0);
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t oh = n.value.dim(0), ow = n.value.dim(1);
  const auto sy = axis_samples(h, oh, n.attr);
  const auto sx = axis_samples(w, ow, n.attr);
  auto& gx = grad_buf(n.in0);
  const float* up = n.grad.data();
  auto idx = [&](std::size_t y, std::size_t xx, std::size_t ch) { return (y * w + xx) * c + ch; };
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xo = 0; xo < ow; ++xo) {
      const float wy = sy[y].w, wx = sx[xo].w;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float gout = up[(y * ow + xo) * c + ch];
        const float gtop = gout * (1.0f - wy);
        const float gbot = gout * wy;
        gx[idx(sy[y].i0, sx[xo].i0, ch)] += gtop * (1.0f - wx);
        gx[idx(sy[y].i0, sx[xo].i1, ch)] += gtop * wx;
        gx[idx(sy[y].i1, sx[xo].i0, ch)] += gbot * (1.0f - wx);
        gx[idx(sy[y].i1, sx[xo].i1, ch)] += gbot * wx;
      }
    }
  }
}

void Graph::backward_binary(const Node& n) {
  const Tensor& a = val(n.in0);
  const Tensor& b = val(n.in1);
  const bool bc = a.dims() != b.dims();
  const std::size_t c = a.rank() ? a.dims().back() : 1;
  const float* up = n.grad.data();
  const std::size_t len = a.size();
  if (nodes_[n.in0].needs_grad) {
    auto& ga = grad_buf(n.in0);
    for (std::size_t i = 0; i < len; ++i) {
      ga[i] += n.op == Op::kMul ? up[i] * (bc ? b[i / c] : b[i]) : up[i];
    }
  }
  if (nodes_[n.in1].needs_grad) {
    auto& gb = grad_buf(n.in1);
    if (!bc) {
      for (std::size_t i = 0; i < len; ++i) {
        gb[i] += n.op == Op::kMul ? up[i] * a[i] : (n.op == Op::kSub ? -up[i] : up[i]);
      }
    } else {
      for (std::size_t p = 0; p < len / c; ++p) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = p * c + ch;
          s += n.op == Op::kMul ? static_cast<double>(up[i]) * a[i] : up[i];
        }
        gb[p] += static_cast<float>(n.op == Op::kSub ? -s : s);
      }
    }
  }
}

void Graph::backward_unary(const Node& n) {
  const Tensor& a = val(n.in0);
  auto& ga = grad_buf(n.in0);
  const float* up = n.grad.data();
  const auto out = n.value.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    switch (n.op) {
      case Op::kExp: ga[i] += up[i] * out[i]; break;
      case Op::kSigmoid: ga[i] += up[i] * out[i] * (1.0f - out[i]); break;
      default: ga[i] += a[i] > 0.0f ? up[i] : 0.0f; break;
    }
  }
}

void Graph::backward_concat(const Node& n) {
  const std::size_t c1 = val(n.in0).dim(2), c2 = val(n.in1).dim(2);
  const std::size_t px = n.value.dim(0) * n.value.dim(1);
  const float* up = n.grad.data();
  if (nodes_[n.in0].needs_grad) {
    auto& ga = grad_buf(n.in0);
    for (std::size_t p = 0; p < px; ++p)
      for (std::size_t ch = 0; ch < c1; ++ch) ga[p * c1 + ch] += up[p * (c1 + c2) + ch];
  }
  if (nodes_[n.in1].needs_grad) {
    auto& gb = grad_buf(n.in1);
    for (std::size_t p = 0; p < px; ++p)
      for (std::size_t ch = 0; ch < c2; ++ch) gb[p * c2 + ch] += up[p * (c1 + c2) + c1 + ch];
  }
}

void Graph::backward_sum(const Node& n) {
  auto& ga = grad_buf(n.in0);
  const float up = n.grad[0];
  for (float& v : ga) v += up;
}

void Graph::backward_dice(const Node& n) {
  const Tensor& p = val(n.in0);
  const Tensor& g = val(n.in1);
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double denom = sp + sg + n.attr;
  const double numer = 2.0 * inter + n.attr;
  const double up = n.grad[0];
  auto& gp = grad_buf(n.in0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = -2.0 * g[i] / denom + numer / (denom * denom);
    gp[i] += static_cast<float>(up * d);
  }
}

void sgd_step(std::span<Tensor* const> params, float lr) {
  for (Tensor* t : params) {
    if (!t->has_grad()) throw ShapeError("sgd_step: parameter has no gradient");
  }
  for (Tensor* t : params) {
    auto d = t->data();
    auto gr = t->grad_mut();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * gr[i];
    t->zero_grad();
  }
}

void reset_grads(std::span<Tensor* const> params) {
  for (Tensor* t : params) t->zero_grad();
}

}  // namespace anorefiner
