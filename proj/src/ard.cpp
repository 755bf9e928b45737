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

#include "anorefiner/ard.hpp"

#include <cmath>
#include <cstring>

#include <json.hpp>

#include "anorefiner/errors.hpp"
#include "anorefiner/io.hpp"
#include "anorefiner/rng.hpp"

namespace anorefiner {
namespace {

ConvParams make_conv(std::size_t k, std::size_t cin, std::size_t cout) {
  return {Tensor(Shape{k, k, cin, cout}), Tensor(Shape{cout})};
}

template <typename Model, typename Fn>
void visit_parameters(Model& m, Fn&& fn) {
  auto conv = [&](const std::string& name, auto& c) {
    fn(name + ".kernel", c.kernel);
    fn(name + ".bias", c.bias);
  };
  conv("init_a_conv", m.init_a_conv);
  conv("init_f_conv", m.init_f_conv);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    const std::string p = "ar" + std::to_string(s + 1);
    auto& st = m.stages[s];
    conv(p + ".img_conv", st.img_conv);
    conv(p + ".ano_conv", st.ano_conv);
    conv(p + ".aa.adj_top", st.aa.adj_top);
    conv(p + ".aa.adj_down", st.aa.adj_down);
    fn(p + ".aa.beta", st.aa.beta);
    conv(p + ".aa.w_conv1", st.aa.w_conv1);
    conv(p + ".aa.w_conv2", st.aa.w_conv2);
    conv(p + ".fuse_conv", st.fuse_conv);
  }
  conv("bi.f2a_conv1", m.bi.f2a_conv1);
  conv("bi.f2a_conv2", m.bi.f2a_conv2);
  conv("bi.a2f_conv1", m.bi.a2f_conv1);
  conv("bi.a2f_conv2", m.bi.a2f_conv2);
  conv("head.fuse", m.head.fuse);
  conv("head.out", m.head.out);
}

nlohmann::ordered_json config_json(const ArdConfig& c) {
  nlohmann::ordered_json j;
  j["feature_channels"] = c.feature_channels;
  j["grid_height"] = c.grid_height;
  j["grid_width"] = c.grid_width;
  j["patch_size"] = c.patch_size;
  j["anomaly_init_width"] = c.anomaly_init_width;
  j["image_init_width"] = c.image_init_width;
  j["image_widths"] = c.image_widths;
  j["anomaly_widths"] = c.anomaly_widths;
  j["head_width"] = c.head_width;
  j["init_gain"] = c.init_gain;
  return j;
}

ArdConfig config_from_json(const nlohmann::json& j) {
  ArdConfig c;
  c.feature_channels = j.at("feature_channels").get<std::size_t>();
  c.grid_height = j.at("grid_height").get<std::size_t>();
  c.grid_width = j.at("grid_width").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.anomaly_init_width = j.at("anomaly_init_width").get<std::size_t>();
  c.image_init_width = j.at("image_init_width").get<std::size_t>();
  c.image_widths = j.at("image_widths").get<std::array<std::size_t, 2>>();
  c.anomaly_widths = j.at("anomaly_widths").get<std::array<std::size_t, 2>>();
  c.head_width = j.at("head_width").get<std::size_t>();
  c.init_gain = j.value("init_gain", 1.0);
  return c;
}

void require_spatial(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
    throw ShapeError(std::string(what) + ": spatial mismatch " + shape_string(a.dims()) + " vs " +
                     shape_string(b.dims()));
  }
}

}  // namespace

ArdModel ArdModel::initialize(const ArdConfig& c, std::uint64_t seed) {
  ArdModel m;
  m.config_ = c;
  m.init_a_conv = make_conv(1, 1, c.anomaly_init_width);
  m.init_f_conv = make_conv(1, c.feature_channels + c.anomaly_init_width, c.image_init_width);
  std::size_t img_in = c.image_init_width, ano_in = c.anomaly_init_width;
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t img = c.image_widths[s], ano = c.anomaly_widths[s];
    const std::size_t scale = std::size_t{2} << s;
    StageParams& st = m.stages[s];
    st.img_conv = make_conv(5, img_in, img);
    st.ano_conv = make_conv(3, ano_in, ano);
    st.aa.adj_top = make_conv(3, img_in, img);
    st.aa.adj_down = make_conv(3, img, img);
    st.aa.beta = Tensor(Shape{c.grid_height * scale, c.grid_width * scale, 1}, 1.0f);
    st.aa.w_conv1 = make_conv(3, img, ano);
    st.aa.w_conv2 = make_conv(3, ano, 1);
    st.fuse_conv = make_conv(1, img + ano, img);
    img_in = img;
    ano_in = ano;
  }
  m.bi.f2a_conv1 = make_conv(3, img_in, ano_in);
  m.bi.f2a_conv2 = make_conv(3, ano_in, ano_in);
  m.bi.a2f_conv1 = make_conv(3, ano_in, ano_in);
  m.bi.a2f_conv2 = make_conv(3, ano_in, img_in);
  m.head.fuse = make_conv(1, img_in + ano_in, c.head_width);
  m.head.out = make_conv(3, c.head_width, 1);

  for (auto& [name, t] : m.named_parameters()) {
    t->set_requires_grad(true);
    const bool residual = name == "bi.f2a_conv2.kernel" || name == "bi.a2f_conv2.kernel";
    if (t->rank() != 4 || residual) continue;
    const double fan_in = static_cast<double>(t->dim(0) * t->dim(1) * t->dim(2));
    const double bound = c.init_gain / std::sqrt(fan_in);
    Rng rng(derive_seed(seed, hash_string(name)));
    for (float& v : t->data()) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return m;
}

std::vector<std::pair<std::string, Tensor*>> ArdModel::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit_parameters(*this, [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ArdModel::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_parameters(*this, [&](const std::string& n, const Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::vector<Tensor*> ArdModel::parameters() {
  std::vector<Tensor*> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

void ArdModel::save(const std::filesystem::path& dir) const {
  nlohmann::ordered_json manifest;
  manifest["config"] = config_json(config_);
  nlohmann::ordered_json files;
  for (const auto& [name, t] : named_parameters()) {
    const std::string file = name + ".anr";
    write_tensor(dir / file, *t);
    files[name] = file;
  }
  manifest["parameters"] = files;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ArdModel ArdModel::load(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  ArdModel m = initialize(config_from_json(manifest.at("config")), 0);
  const auto& files = manifest.at("parameters");
  for (auto& [name, t] : m.named_parameters()) {
    if (!files.contains(name)) throw FormatError("checkpoint missing parameter " + name);
    Tensor loaded = read_tensor(dir / files.at(name).get<std::string>());
    if (loaded.dims() != t->dims()) {
      throw FormatError("checkpoint parameter " + name + " has dims " + shape_string(loaded.dims()) +
                        ", expected " + shape_string(t->dims()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t->data().begin());
  }
  return m;
}

bool bitwise_equal(const ArdModel& a, const ArdModel& b) {
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !bitwise_equal(*pa[i].second, *pb[i].second)) return false;
  }
  return true;
}

Value conv(Graph& g, Value x, ConvParams& p) { return g.conv2d(x, g.parameter(p.kernel), g.parameter(p.bias)); }

Branches init_features(Graph& g, Value features, Value anomaly, ArdModel& model) {
  require_spatial(g.value(features), g.value(anomaly), "init_features");
  const Value a_hat = conv(g, anomaly, model.init_a_conv);
  const Value f_hat = conv(g, g.concat_channels(features, a_hat), model.init_f_conv);
  return {f_hat, a_hat};
}

Value anomaly_attention(Graph& g, Value y_top, Value y_down, AttentionParams& p, AttentionTrace* trace) {
  const Value y_fuse = g.add(conv(g, y_top, p.adj_top), conv(g, y_down, p.adj_down));
  const Tensor& fuse = g.value(y_fuse);
  if (p.beta.rank() != 3 || p.beta.dim(2) != 1 || p.beta.dim(0) != fuse.dim(0) || p.beta.dim(1) != fuse.dim(1)) {
    throw ShapeError("anomaly_attention: beta " + shape_string(p.beta.dims()) + " does not match Y_fuse " +
                     shape_string(fuse.dims()));
  }
  const Value ones = g.constant(Tensor(p.beta.dims(), 1.0f));
  const Value zeta = g.exp(g.mul(y_fuse, g.sub(g.parameter(p.beta), ones)));
  const Value weighted = g.mul(y_fuse, zeta);
  const Value weight = g.sigmoid(conv(g, conv(g, weighted, p.w_conv1), p.w_conv2));
  if (trace) *trace = {y_fuse, zeta, weighted, weight};
  return g.mul(y_down, weight);
}

Branches ar_block(Graph& g, Branches in, StageParams& p) {
  require_spatial(g.value(in.image), g.value(in.anomaly), "ar_block");
  const Value y_top = g.upsample_bilinear(in.image, 2.0);
  const Value y_down = conv(g, y_top, p.img_conv);
  const Value anomaly = conv(g, g.upsample_bilinear(in.anomaly, 2.0), p.ano_conv);
  const Value attended = anomaly_attention(g, y_top, y_down, p.aa);
  const Value image = conv(g, g.concat_channels(attended, anomaly), p.fuse_conv);
  return {image, anomaly};
}

Branches bi_block(Graph& g, Branches in, BiParams& p) {
  require_spatial(g.value(in.image), g.value(in.anomaly), "bi_block");
  const Value from_image = conv(g, g.relu(conv(g, in.image, p.f2a_conv1)), p.f2a_conv2);
  const Value from_anomaly = conv(g, g.relu(conv(g, in.anomaly, p.a2f_conv1)), p.a2f_conv2);
  return {g.add(in.image, from_anomaly), g.add(in.anomaly, from_image)};
}

Value ard_forward(Graph& g, Value features, Value anomaly, ArdModel& model, std::size_t target_height,
                  std::size_t target_width) {
  const ArdConfig& c = model.config();
  const Tensor& f = g.value(features);
  if (f.rank() != 3 || target_height != f.dim(0) * c.patch_size || target_width != f.dim(1) * c.patch_size) {
    throw ShapeError("ard_forward: target " + std::to_string(target_height) + "x" + std::to_string(target_width) +
                     " is not the patch grid " + shape_string(f.dims()) + " times P=" + std::to_string(c.patch_size));
  }
  Branches b = init_features(g, features, anomaly, model);
  for (auto& stage : model.stages) b = ar_block(g, b, stage);
  b = bi_block(g, b, model.bi);
  const Value fused = conv(g, g.concat_channels(b.image, b.anomaly), model.head.fuse);
  const double factor = static_cast<double>(c.patch_size) / 4.0;
  Value up = fused;
  if (factor != 1.0) up = g.upsample_bilinear(fused, factor);
  return g.sigmoid(conv(g, up, model.head.out));
}

Tensor ard_infer(const ArdModel& model, const PatchFeatureMap& features, const CoarseAnomalyMap& anomaly) {
  Graph g;
  g.set_grad_enabled(false);
  // Parameters are only read with gradients disabled.
  auto& m = const_cast<ArdModel&>(model);
  const Value out = ard_forward(g, g.input(features.grid), g.input(anomaly.grid), m,
                                features.grid_height() * model.config().patch_size,
                                features.grid_width() * model.config().patch_size);
  Tensor result = g.value(out);
  result.check_finite("refined map");
  return result;
}

}  // namespace anorefiner
