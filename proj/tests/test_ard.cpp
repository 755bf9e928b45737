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

#include <doctest.h>

#include "anorefiner/ard.hpp"
#include "anorefiner/errors.hpp"
#include "decoder_fd.hpp"
#include "oracles.hpp"

using namespace anorefiner;
using oracle::random_tensor;
using oracle::randomise;

namespace {

ArdConfig toy_config(std::size_t grid = 2, std::size_t patch = 8) {
  ArdConfig c;
  c.grid_height = c.grid_width = grid;
  c.patch_size = patch;
  return c;
}

void zero_kernels(ConvParams& p) {
  for (float& v : p.kernel.data()) v = 0.0f;
  for (float& v : p.bias.data()) v = 0.0f;
}

bool spatially_constant(const Tensor& t) {
  const std::size_t C = t.dim(2);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] != t[i % C]) return false;
  return true;
}

}  // namespace

TEST_CASE("model structure follows the channel plan") {
  ArdModel m = ArdModel::initialize(toy_config(8), 1);
  CHECK(m.init_a_conv.kernel.dims() == Shape{1, 1, 1, 64});
  CHECK(m.init_f_conv.kernel.dims() == Shape{1, 1, 76, 256});
  CHECK(m.stages[0].img_conv.kernel.dims() == Shape{5, 5, 256, 192});
  CHECK(m.stages[0].ano_conv.kernel.dims() == Shape{3, 3, 64, 48});
  CHECK(m.stages[0].aa.adj_top.kernel.dims() == Shape{3, 3, 256, 192});
  CHECK(m.stages[0].aa.adj_down.kernel.dims() == Shape{3, 3, 192, 192});
  CHECK(m.stages[0].aa.w_conv2.kernel.dims() == Shape{3, 3, 48, 1});
  CHECK(m.stages[0].fuse_conv.kernel.dims() == Shape{1, 1, 240, 192});
  CHECK(m.stages[1].img_conv.kernel.dims() == Shape{5, 5, 192, 128});
  CHECK(m.stages[1].ano_conv.kernel.dims() == Shape{3, 3, 48, 32});
  CHECK(m.stages[0].aa.beta.dims() == Shape{16, 16, 1});
  CHECK(m.stages[1].aa.beta.dims() == Shape{32, 32, 1});
  CHECK(m.bi.f2a_conv1.kernel.dims() == Shape{3, 3, 128, 32});
  CHECK(m.bi.a2f_conv2.kernel.dims() == Shape{3, 3, 32, 128});
  CHECK(m.head.fuse.kernel.dims() == Shape{1, 1, 160, 32});
  CHECK(m.head.out.kernel.dims() == Shape{3, 3, 32, 1});
}

TEST_CASE("initialisation contract") {
  const ArdModel m = ArdModel::initialize(toy_config(), 7);
  for (const auto& [name, t] : m.named_parameters()) {
    CHECK(t->requires_grad());
    for (float v : t->data()) REQUIRE(std::isfinite(v));
    if (name.ends_with(".bias")) {
      for (float v : t->data()) CHECK(v == 0.0f);
    } else if (name.ends_with(".beta")) {
      for (float v : t->data()) CHECK(v == 1.0f);
    } else if (name == "bi.f2a_conv2.kernel" || name == "bi.a2f_conv2.kernel") {
      for (float v : t->data()) CHECK(v == 0.0f);
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t->dim(0) * t->dim(1) * t->dim(2)));
      double peak = 0.0;
      for (float v : t->data()) peak = std::max(peak, std::abs(static_cast<double>(v)));
      CHECK(peak <= bound);
      CHECK(peak > 0.5 * bound);
    }
  }
  CHECK(bitwise_equal(ArdModel::initialize(toy_config(), 7), m));
  CHECK_FALSE(bitwise_equal(ArdModel::initialize(toy_config(), 8), m));

  ArdConfig wide = toy_config();
  wide.init_gain = 2.0;
  const ArdModel w = ArdModel::initialize(wide, 7);
  CHECK(w.head.out.kernel[5] == 2.0f * m.head.out.kernel[5]);
}

TEST_CASE("init_features widths, linearity and gradient") {
  ArdModel m = ArdModel::initialize(toy_config(), 2);
  Graph g;
  const auto b = init_features(g, g.constant(random_tensor({2, 2, 12}, 1)), g.constant(Tensor({2, 2, 1})), m);
  CHECK(g.value(b.image).dims() == Shape{2, 2, 256});
  CHECK(g.value(b.anomaly).dims() == Shape{2, 2, 64});
  for (float v : g.value(b.anomaly).data()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(init_features(g, g.constant(random_tensor({2, 2, 12}, 1)), g.constant(Tensor({2, 3, 1})), m), ShapeError);

  const Tensor f = random_tensor({2, 2, 12}, 3);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = oracle::check_gradients(
        [&](Graph& gg, const std::vector<Value>& v) { return gg.sum(init_features(gg, gg.input(f), v[0], m).image); },
        {random_tensor({2, 2, 1}, 10 + s, 0.0, 1.0)}, 1e-2);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("attention starts with zeta identically one") {
  ArdModel m = ArdModel::initialize(toy_config(), 3);
  for (std::uint64_t s = 0; s < 3; ++s) {
    Graph g;
    const Value top = g.constant(random_tensor({4, 4, 256}, s, -3.0, 3.0));
    const Value down = g.constant(random_tensor({4, 4, 192}, 20 + s, -3.0, 3.0));
    AttentionTrace tr;
    anomaly_attention(g, top, down, m.stages[0].aa, &tr);
    CHECK(g.value(tr.y_fuse).dims() == Shape{4, 4, 192});
    for (float z : g.value(tr.zeta).data()) CHECK(z == 1.0f);
    CHECK(bitwise_equal(g.value(tr.weighted), g.value(tr.y_fuse)));
    CHECK(g.value(tr.weight).dims() == Shape{4, 4, 1});
  }
}

TEST_CASE("attention with a zero weight head halves Y_down") {
  ArdModel m = ArdModel::initialize(toy_config(), 4);
  AttentionParams& aa = m.stages[0].aa;
  zero_kernels(aa.w_conv1);
  zero_kernels(aa.w_conv2);
  Graph g;
  const Tensor down = random_tensor({4, 4, 192}, 5);
  const Tensor out = g.value(anomaly_attention(g, g.constant(random_tensor({4, 4, 256}, 6)), g.input(down), aa));
  for (std::size_t i = 0; i < down.size(); ++i) CHECK(out[i] == 0.5f * down[i]);
}

TEST_CASE("attention scalar golden and beta shape check") {
  AttentionParams p;
  p.adj_top = {Tensor({3, 3, 1, 1}), Tensor({1})};
  p.adj_top.kernel[4] = 1.0f;
  p.adj_down = {Tensor({3, 3, 1, 1}), Tensor({1})};
  p.w_conv1 = {Tensor({3, 3, 1, 1}), Tensor({1})};
  p.w_conv2 = {Tensor({3, 3, 1, 1}), Tensor({1})};
  p.beta = Tensor({1, 1, 1}, 2.0f);
  Graph g;
  AttentionTrace tr;
  anomaly_attention(g, g.constant(Tensor({1, 1, 1}, 0.7f)), g.constant(Tensor({1, 1, 1}, 0.3f)), p, &tr);
  CHECK(std::abs(g.value(tr.zeta)[0] - 2.01375) < 1e-5);
  CHECK(std::abs(g.value(tr.weighted)[0] - 1.40963) < 1e-5);

  p.beta = Tensor({2, 1, 1}, 1.0f);
  CHECK_THROWS_AS(anomaly_attention(g, g.constant(Tensor({1, 1, 1}, 0.7f)), g.constant(Tensor({1, 1, 1})), p), ShapeError);
}

TEST_CASE("ar blocks double the resolution and keep constants constant") {
  ArdModel m = ArdModel::initialize(toy_config(4), 5);
  Graph g;
  Branches b{g.constant(random_tensor({4, 4, 256}, 1)), g.constant(random_tensor({4, 4, 64}, 2))};
  const Branches s1 = ar_block(g, b, m.stages[0]);
  CHECK(g.value(s1.image).dims() == Shape{8, 8, 192});
  CHECK(g.value(s1.anomaly).dims() == Shape{8, 8, 48});
  const Branches s2 = ar_block(g, s1, m.stages[1]);
  CHECK(g.value(s2.image).dims() == Shape{16, 16, 128});
  CHECK(g.value(s2.anomaly).dims() == Shape{16, 16, 32});

  // Only biases left: every map in the block is spatially constant.
  randomise(m, 9, 2.0, true);
  for (auto& [name, t] : m.named_parameters()) {
    if (name.starts_with("ar1.") && name.ends_with(".kernel")) {
      for (float& v : t->data()) v = 0.0f;
    }
  }
  Graph h;
  Branches c{h.constant(Tensor({4, 4, 256}, 0.3f)), h.constant(Tensor({4, 4, 64}, -0.2f))};
  const Branches o = ar_block(h, c, m.stages[0]);
  CHECK(spatially_constant(h.value(o.image)));
  CHECK(spatially_constant(h.value(o.anomaly)));
}

TEST_CASE("bi block identity and residual oracle") {
  ArdModel m = ArdModel::initialize(toy_config(), 6);
  const Tensor f = random_tensor({8, 8, 128}, 1), a = random_tensor({8, 8, 32}, 2);
  {
    Graph g;
    const Branches o = bi_block(g, {g.input(f), g.input(a)}, m.bi);
    CHECK(bitwise_equal(g.value(o.image), f));
    CHECK(bitwise_equal(g.value(o.anomaly), a));
  }
  // A zero image branch leaves the anomaly branch untouched once biases vanish.
  randomise(m, 3);
  for (auto* p : {&m.bi.f2a_conv1.bias, &m.bi.f2a_conv2.bias})
    for (float& v : p->data()) v = 0.0f;
  {
    Graph g;
    const Branches o = bi_block(g, {g.constant(Tensor({8, 8, 128})), g.input(a)}, m.bi);
    CHECK(bitwise_equal(g.value(o.anomaly), a));
  }
  randomise(m, 4);
  auto relu = [](Tensor t) {
    for (float& v : t.data()) v = std::max(v, 0.0f);
    return t;
  };
  const Tensor ra = oracle::naive_conv(relu(oracle::naive_conv(f, m.bi.f2a_conv1.kernel, m.bi.f2a_conv1.bias)),
                               m.bi.f2a_conv2.kernel, m.bi.f2a_conv2.bias);
  const Tensor rf = oracle::naive_conv(relu(oracle::naive_conv(a, m.bi.a2f_conv1.kernel, m.bi.a2f_conv1.bias)),
                               m.bi.a2f_conv2.kernel, m.bi.a2f_conv2.bias);
  Graph g;
  const Branches o = bi_block(g, {g.input(f), g.input(a)}, m.bi);
  Tensor da = g.value(o.anomaly), df = g.value(o.image);
  for (std::size_t i = 0; i < da.size(); ++i) da[i] -= a[i];
  for (std::size_t i = 0; i < df.size(); ++i) df[i] -= f[i];
  CHECK(oracle::max_abs_diff(da, ra) < 1e-5 * std::max(1.0, oracle::max_abs(ra)));
  CHECK(oracle::max_abs_diff(df, rf) < 1e-5 * std::max(1.0, oracle::max_abs(rf)));
}

TEST_CASE("full decoder shapes, range and determinism") {
  ArdModel m = ArdModel::initialize(toy_config(8), 7);
  const Tensor f = random_tensor({8, 8, 12}, 1, 0.0, 1.0), a = random_tensor({8, 8, 1}, 2, 0.0, 1.0);
  Graph g;
  const Value out = ard_forward(g, g.input(f), g.input(a), m, 64, 64);
  const Tensor& y = g.value(out);
  CHECK(y.dims() == Shape{64, 64, 1});
  for (float v : y.data()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  Graph h;
  CHECK(bitwise_equal(h.value(ard_forward(h, h.input(f), h.input(a), m, 64, 64)), y));
  CHECK_THROWS_AS(ard_forward(h, h.input(f), h.input(a), m, 60, 64), ShapeError);

  const Tensor inf = ard_infer(m, PatchFeatureMap{f, 8, 64, 64}, CoarseAnomalyMap{a, true});
  CHECK(bitwise_equal(inf, y));
  for (const auto& [name, t] : m.named_parameters()) CHECK_FALSE(t->has_grad());
}

TEST_CASE("patch size four skips the head upsample") {
  ArdModel m = ArdModel::initialize(toy_config(4, 4), 8);
  Graph g;
  const Value out = ard_forward(g, g.constant(random_tensor({4, 4, 12}, 1)), g.constant(random_tensor({4, 4, 1}, 2)), m, 16, 16);
  CHECK(g.value(out).dims() == Shape{16, 16, 1});
}

TEST_CASE("checkpoint roundtrip") {
  const auto dir = std::filesystem::temp_directory_path() / "anorefiner_test_ckpt";
  std::filesystem::remove_all(dir);
  ArdModel m = ArdModel::initialize(toy_config(), 9);
  randomise(m, 10);
  m.save(dir);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "ar1.aa.beta.anr"));
  CHECK(bitwise_equal(ArdModel::load(dir), m));
  std::filesystem::remove(dir / "head.out.kernel.anr");
  CHECK_THROWS(ArdModel::load(dir));
  std::filesystem::remove_all(dir);
}

TEST_CASE("full decoder with dice loss matches finite differences") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& c : oracle::decoder_directional_fd(seed)) {
      INFO(c.name << " seed " << seed << " analytic " << c.analytic << " numeric " << c.numeric);
      CHECK(c.rel < 1e-2);
      worst = std::max(worst, c.rel);
    }
  }
  MESSAGE("worst directional relative error " << worst);
}

TEST_CASE("dice gradient w.r.t. beta matches element-wise differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    INFO("seed " << seed);
    CHECK(oracle::decoder_beta_fd(seed) < 1e-2);
  }
}
