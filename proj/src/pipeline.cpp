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

#include "anorefiner/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "anorefiner/errors.hpp"
#include "anorefiner/rng.hpp"
#include "anorefiner/scorer.hpp"

namespace anorefiner {
namespace {

using nlohmann::json;

std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string format_score(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

struct ScoreRow {
  std::string id;
  std::size_t group;
  float score;
};

std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<ScoreRow> rows;
  if (!std::getline(in, line) || line != "image_id,group,image_score") {
    throw FormatError(path.string() + ": missing header image_id,group,image_score");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad row");
    try {
      rows.push_back({line.substr(0, a), std::stoul(line.substr(a + 1, b - a - 1)), std::stof(line.substr(b + 1))});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

MetricTriple safe_metrics(const ScoredSet& s) {
  const double nan = std::nan("");
  MetricTriple m{nan, nan, nan};
  try {
    m.auroc = auroc(s);
  } catch (const MetricError&) {
  }
  try {
    m.f1max = f1_max(s);
    m.ap = average_precision(s);
  } catch (const MetricError&) {
  }
  return m;
}

std::filesystem::path resolve_against(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path q(p);
  return q.is_absolute() || base.empty() ? q : base / q;
}

}  // namespace

void RunConfig::validate() const {
  pgt.validate();
  if (input_size % pgt.patch_size != 0) throw UsageError("config: input_size must be divisible by patch_size");
  if (seeds.empty()) throw UsageError("config: seeds must not be empty");
}

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("config: expected a JSON object");
  RunConfig c;
  try {
    auto& p = c.pgt;
    p.group_size = j.value("group_size", p.group_size);
    p.pseudo_normals = j.value("pseudo_normals", p.pseudo_normals);
    p.per_normal = j.value("per_normal", p.per_normal);
    p.epochs = j.value("epochs", p.epochs);
    p.lr = j.value("lr", p.lr);
    if (j.contains("strategy")) p.strategy = parse_strategy(j["strategy"].get<std::string>());
    p.patch_size = j.value("patch_size", p.patch_size);
    p.dice_eps = j.value("dice_eps", p.dice_eps);
    p.mask_threshold = j.value("mask_threshold", p.mask_threshold);
    p.bank_seed = j.value("bank_seed", p.bank_seed);
    p.init_gain = j.value("init_gain", p.init_gain);
    p.contamination = j.value("contamination", p.contamination);
    c.input_size = j.value("input_size", c.input_size);
    if (j.contains("scorer")) {
      const auto s = j["scorer"].get<std::string>();
      if (s == "builtin") {
        c.scorer = ScorerKind::kBuiltin;
      } else if (s == "external") {
        c.scorer = ScorerKind::kExternal;
      } else {
        throw UsageError("config: scorer must be builtin or external");
      }
    }
    if (j.contains("texture_dir") && !j["texture_dir"].is_null()) {
      c.texture_dir = resolve_against(base_dir, j["texture_dir"].get<std::string>());
    }
    if (j.contains("manifest")) c.manifest = resolve_against(base_dir, j["manifest"].get<std::string>());
    if (j.contains("output_dir")) c.output_dir = resolve_against(base_dir, j["output_dir"].get<std::string>());
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("seed")) c.seeds = {j["seed"].get<std::uint64_t>()};
    if (j.contains("category") && !j["category"].is_null()) c.category = j["category"].get<std::string>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_text(path), path.parent_path());
}

std::string run_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["manifest"] = c.manifest.string();
  j["group_size"] = c.pgt.group_size;
  j["pseudo_normals"] = c.pgt.pseudo_normals;
  j["per_normal"] = c.pgt.per_normal;
  j["epochs"] = c.pgt.epochs;
  j["lr"] = c.pgt.lr;
  j["strategy"] = to_string(c.pgt.strategy);
  j["patch_size"] = c.pgt.patch_size;
  j["dice_eps"] = c.pgt.dice_eps;
  j["mask_threshold"] = c.pgt.mask_threshold;
  j["bank_seed"] = c.pgt.bank_seed;
  j["init_gain"] = c.pgt.init_gain;
  j["contamination"] = c.pgt.contamination;
  j["input_size"] = c.input_size;
  j["scorer"] = c.scorer == ScorerKind::kBuiltin ? "builtin" : "external";
  j["texture_dir"] = c.texture_dir ? json(c.texture_dir->string()) : json(nullptr);
  j["seeds"] = c.seeds;
  j["category"] = c.category ? json(*c.category) : json(nullptr);
  return j.dump(2) + "\n";
}

std::string format_results_csv(const std::vector<MetricRow>& rows) {
  std::string s = "category,level,auroc,f1max,ap\n";
  for (const auto& r : rows) {
    s += r.category + "," + r.level + "," + format_metric(r.metrics.auroc) + "," + format_metric(r.metrics.f1max) +
         "," + format_metric(r.metrics.ap) + "\n";
  }
  return s;
}

Tensor load_gt_mask(const Manifest& manifest, const ManifestRecord& r, std::size_t height, std::size_t width) {
  if (!r.gt_mask_path) return Tensor(Shape{height, width, 1});
  Tensor m = read_pnm(manifest.resolve(*r.gt_mask_path));
  if (m.dim(0) != height || m.dim(1) != width || m.dim(2) != 1) {
    throw FormatError(*r.gt_mask_path + ": mask dims " + shape_string(m.dims()) + " do not match the map");
  }
  for (float& v : m.data()) v = v >= 0.5f ? 1.0f : 0.0f;
  return m;
}

std::vector<MetricRow> evaluate_outputs(const Manifest& manifest, const std::filesystem::path& dir,
                                        const std::string& maps_subdir, const std::optional<std::string>& category) {
  const auto scores = read_scores_csv(dir / "scores.csv");
  std::map<std::string, std::size_t> present;
  for (std::size_t i = 0; i < scores.size(); ++i) present[scores[i].id] = i;

  std::vector<MetricRow> rows;
  for (const auto& cat : manifest.categories()) {
    if (category && *category != cat) continue;
    ScoredSet image_set, pixel_set;
    bool have_gt = true, any = false;
    for (const auto& r : manifest.records) {
      if (r.category != cat || !present.count(r.image_id)) continue;
      if (!r.gt_label) {
        have_gt = false;
        break;
      }
      any = true;
      const Tensor map = read_tensor(dir / maps_subdir / (r.image_id + ".anr"));
      if (map.rank() != 3 || map.dim(2) != 1) throw FormatError(r.image_id + ": map must be [H,W,1]");
      const Tensor mask = load_gt_mask(manifest, r, map.dim(0), map.dim(1));
      image_set.scores.push_back(*std::max_element(map.data().begin(), map.data().end()));
      image_set.labels.push_back(*r.gt_label);
      for (std::size_t k = 0; k < map.size(); ++k) {
        pixel_set.scores.push_back(map[k]);
        pixel_set.labels.push_back(mask[k] == 1.0f ? 1 : 0);
      }
    }
    if (!have_gt || !any) continue;
    rows.push_back({cat, "image", safe_metrics(image_set)});
    rows.push_back({cat, "pixel", safe_metrics(pixel_set)});
  }
  return rows;
}

std::vector<StreamImage> load_stream(const Manifest& manifest, const std::string& category, const RunConfig& cfg) {
  std::vector<StreamImage> stream;
  for (const auto& r : manifest.records) {
    if (r.category != category) continue;
    StreamImage s;
    s.id = r.image_id;
    s.gt_label = r.gt_label;
    const auto path = manifest.resolve(r.path);
    if (cfg.scorer == ScorerKind::kExternal) {
      if (!r.feature_path || !r.anomaly_path) {
        throw FormatError(r.image_id + ": external scorer needs feature_path and anomaly_path");
      }
      auto [f, a] = load_external(manifest.resolve(*r.feature_path), manifest.resolve(*r.anomaly_path),
                                  cfg.pgt.patch_size);
      s.features = std::move(f);
      s.coarse = std::move(a);
      if (std::filesystem::exists(path)) s.image = read_pnm(path);
    } else {
      s.image = read_pnm(path);
    }
    if (!s.image.empty() && (s.image.dim(0) != cfg.input_size || s.image.dim(1) != cfg.input_size)) {
      throw FormatError(r.path + ": image is " + shape_string(s.image.dims()) + ", expected input_size " +
                        std::to_string(cfg.input_size));
    }
    stream.push_back(std::move(s));
  }
  return stream;
}

void run_pipeline(const RunConfig& cfg_in, std::uint64_t seed, const std::filesystem::path& out_dir, std::ostream& log) {
  RunConfig cfg = cfg_in;
  cfg.pgt.base_seed = seed;
  cfg.validate();
  if (cfg.texture_dir) cfg.pgt.textures = load_texture_dir(*cfg.texture_dir);
  const Manifest manifest = read_manifest(cfg.manifest);
  if (manifest.records.empty()) throw ProtocolError("run: empty manifest");

  std::vector<std::string> score_lines;
  std::map<std::string, std::string> score_by_id;
  bool ran = false;
  for (const auto& cat : manifest.categories()) {
    if (cfg.category && *cfg.category != cat) continue;
    ran = true;
    const auto stream = load_stream(manifest, cat, cfg);
    const std::size_t n_groups = partition_groups(stream.size(), cfg.pgt.group_size).size();
    if (n_groups == 1) log << "warning: single group: passthrough only (" << cat << ")\n";
    const auto on_group = [&](const GroupState& g) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[%s] group %zu/%zu: images=%zu train_loss=%s time=%.1fs\n", cat.c_str(),
                    g.index + 1, n_groups, g.positions.size(),
                    g.trained_through ? format_metric(g.train.final_loss()).c_str() : "-", g.seconds);
      log << buf << std::flush;
    };
    const PgtResult result = run_pgt(stream, cfg.pgt, cfg.scorer, hash_string(cat), on_group);
    for (const auto& g : result.groups) {
      for (std::size_t i = 0; i < g.ids.size(); ++i) {
        const auto& o = g.outputs[i];
        const std::string& id = g.ids[i];
        write_tensor(out_dir / "maps" / (id + ".anr"), o.final);
        write_tensor(out_dir / "coarse" / (id + ".anr"), o.coarse);
        if (!o.refined.empty()) write_tensor(out_dir / "refined" / (id + ".anr"), o.refined);
        export_heatmap(o.final, out_dir / "heatmaps" / (id + ".pgm"));
        const float score = *std::max_element(o.final.data().begin(), o.final.data().end());
        score_by_id[id] = id + "," + std::to_string(g.index + 1) + "," + format_score(score);
      }
    }
    result.model.save(out_dir / "model" / cat);
  }
  if (!ran) throw ProtocolError("run: no images for the selected category");

  std::string csv = "image_id,group,image_score\n";
  for (const auto& r : manifest.records) {
    if (auto it = score_by_id.find(r.image_id); it != score_by_id.end()) csv += it->second + "\n";
  }
  write_text(out_dir / "scores.csv", csv);
  write_text(out_dir / "config.json", run_config_json(cfg));
  const auto rows = evaluate_outputs(manifest, out_dir, "maps", cfg.category);
  if (!rows.empty()) {
    write_text(out_dir / "results.csv", format_results_csv(rows));
    write_text(out_dir / "coarse_results.csv",
               format_results_csv(evaluate_outputs(manifest, out_dir, "coarse", cfg.category)));
    for (const auto& r : rows) {
      log << r.category << " " << r.level << ": auroc=" << format_metric(r.metrics.auroc)
          << " f1max=" << format_metric(r.metrics.f1max) << " ap=" << format_metric(r.metrics.ap) << "\n";
    }
  }
}

void score_pipeline(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log) {
  cfg.validate();
  const Manifest manifest = read_manifest(cfg.manifest);
  if (manifest.records.empty()) throw ProtocolError("score: empty manifest");
  std::map<std::string, std::string> score_by_id;
  for (const auto& cat : manifest.categories()) {
    if (cfg.category && *cfg.category != cat) continue;
    const auto stream = load_stream(manifest, cat, cfg);
    const auto groups = partition_groups(stream.size(), cfg.pgt.group_size);
    for (std::size_t k = 0; k < groups.size(); ++k) {
      std::vector<CoarseAnomalyMap> maps;
      if (cfg.scorer == ScorerKind::kBuiltin) {
        std::vector<PatchFeatureMap> feats;
        for (std::size_t p : groups[k]) feats.push_back(extract_patch_features(stream[p].image, cfg.pgt.patch_size, cfg.pgt.bank_seed));
        maps = mutual_score(feats);
      } else {
        std::vector<Tensor> raw;
        for (std::size_t p : groups[k]) raw.push_back(stream[p].coarse->grid);
        maps = normalize_group(raw);
      }
      for (std::size_t i = 0; i < groups[k].size(); ++i) {
        const std::string& id = stream[groups[k][i]].id;
        write_tensor(out_dir / "coarse_patch" / (id + ".anr"), maps[i].grid);
        write_tensor(out_dir / "coarse" / (id + ".anr"), upsample_coarse(maps[i], cfg.pgt.patch_size));
        score_by_id[id] = id + "," + std::to_string(k + 1) + "," + format_score(image_score(maps[i]));
      }
    }
    log << "[" << cat << "] scored " << stream.size() << " images in " << groups.size() << " groups\n";
  }
  std::string csv = "image_id,group,image_score\n";
  for (const auto& r : manifest.records) {
    if (auto it = score_by_id.find(r.image_id); it != score_by_id.end()) csv += it->second + "\n";
  }
  write_text(out_dir / "scores.csv", csv);
}

std::size_t export_heatmaps(const std::filesystem::path& maps_dir, const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(maps_dir, ec)) {
    if (e.is_regular_file() && e.path().extension() == ".anr") files.push_back(e.path());
  }
  if (ec) throw IoError("cannot list " + maps_dir.string());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    Tensor m = read_tensor(f);
    for (float& v : m.data()) v = std::clamp(v, 0.0f, 1.0f);
    export_heatmap(m, out_dir / (f.stem().string() + ".pgm"));
  }
  return files.size();
}

}  // namespace anorefiner
