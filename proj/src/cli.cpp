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

#include <ostream>

#include <CLI11.hpp>

#include "anorefiner/dataset.hpp"
#include "anorefiner/errors.hpp"
#include "anorefiner/pipeline.hpp"

namespace anorefiner {
namespace {

struct Overrides {
  std::string config;
  std::string manifest;
  std::string out;
  std::string category;
  std::string strategy;
  std::string texture_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> group_size, pseudo_normals, per_normal, epochs, patch_size, input_size;
  std::optional<float> lr;
  std::optional<double> contamination, mask_threshold;
  bool external = false;
};

void add_run_options(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "JSON run configuration");
  sub->add_option("--manifest", o.manifest, "manifest.jsonl (overrides config)");
  sub->add_option("--out", o.out, "output directory");
  sub->add_option("--seed", o.seed, "single run seed (overrides config seeds)");
  sub->add_option("--category", o.category, "restrict to one category");
  sub->add_option("--group-size", o.group_size);
  sub->add_option("--pseudo-normals", o.pseudo_normals);
  sub->add_option("--per-normal", o.per_normal);
  sub->add_option("--epochs", o.epochs);
  sub->add_option("--lr", o.lr);
  sub->add_option("--patch-size", o.patch_size);
  sub->add_option("--input-size", o.input_size);
  sub->add_option("--strategy", o.strategy, "perlin_texture or cutpaste");
  sub->add_option("--texture-dir", o.texture_dir);
  sub->add_option("--mask-threshold", o.mask_threshold);
  sub->add_option("--contamination", o.contamination);
  sub->add_flag("--external", o.external, "read features/anomaly maps from the manifest");
}

RunConfig build_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (!o.manifest.empty()) c.manifest = o.manifest;
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) c.seeds = {*o.seed};
  if (!o.category.empty()) c.category = o.category;
  if (o.group_size) c.pgt.group_size = *o.group_size;
  if (o.pseudo_normals) c.pgt.pseudo_normals = *o.pseudo_normals;
  if (o.per_normal) c.pgt.per_normal = *o.per_normal;
  if (o.epochs) c.pgt.epochs = *o.epochs;
  if (o.lr) c.pgt.lr = *o.lr;
  if (o.patch_size) c.pgt.patch_size = *o.patch_size;
  if (o.input_size) c.input_size = *o.input_size;
  if (!o.strategy.empty()) c.pgt.strategy = parse_strategy(o.strategy);
  if (!o.texture_dir.empty()) c.texture_dir = o.texture_dir;
  if (o.mask_threshold) c.pgt.mask_threshold = *o.mask_threshold;
  if (o.contamination) c.pgt.contamination = *o.contamination;
  if (o.external) c.scorer = ScorerKind::kExternal;
  if (c.manifest.empty()) throw UsageError("no manifest given (use --manifest or a config)");
  c.validate();
  return c;
}

std::filesystem::path seed_dir(const RunConfig& c, std::uint64_t seed) {
  return c.seeds.size() == 1 ? c.output_dir : c.output_dir / ("seed_" + std::to_string(seed));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Test-time anomaly map refinement"};
  app.require_subcommand(1);

  DatasetSpec gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic product dataset");
  gen_cmd->add_option("--n", gen.n_images);
  gen_cmd->add_option("--defect-rate", gen.defect_rate);
  gen_cmd->add_option("--size", gen.input_size);
  gen_cmd->add_option("--channels", gen.channels);
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--category", gen.category);
  gen_cmd->add_option("--out", gen_out)->required();

  Overrides score_o, run_o;
  auto* score_cmd = app.add_subcommand("score", "coarse anomaly maps only");
  add_run_options(score_cmd, score_o);
  auto* run_cmd = app.add_subcommand("run", "full group-wise test-time training");
  add_run_options(run_cmd, run_o);

  std::string eval_manifest, eval_out, eval_maps = "maps", eval_category, eval_csv;
  auto* eval_cmd = app.add_subcommand("eval", "metrics from run outputs and a manifest");
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--out", eval_out, "run output directory")->required();
  eval_cmd->add_option("--maps", eval_maps, "map subdirectory (maps, coarse, refined)");
  eval_cmd->add_option("--category", eval_category);
  eval_cmd->add_option("--csv", eval_csv, "also write the CSV here");

  std::string export_maps, export_out;
  auto* export_cmd = app.add_subcommand("export", "write PGM heatmaps for a directory of maps");
  export_cmd->add_option("--maps", export_maps)->required();
  export_cmd->add_option("--out", export_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) {
      const Manifest m = generate_dataset(gen, gen_out);
      std::size_t defects = 0;
      for (const auto& r : m.records) defects += r.gt_label.value_or(0) == 1;
      out << "wrote " << m.records.size() << " images (" << defects << " defective) to " << gen_out << "\n";
    } else if (*score_cmd) {
      const RunConfig c = build_config(score_o);
      for (auto seed : c.seeds) {
        RunConfig s = c;
        s.pgt.base_seed = seed;
        score_pipeline(s, seed_dir(c, seed), out);
      }
    } else if (*run_cmd) {
      const RunConfig c = build_config(run_o);
      for (auto seed : c.seeds) run_pipeline(c, seed, seed_dir(c, seed), out);
    } else if (*eval_cmd) {
      const Manifest m = read_manifest(eval_manifest);
      std::optional<std::string> cat;
      if (!eval_category.empty()) cat = eval_category;
      const auto rows = evaluate_outputs(m, eval_out, eval_maps, cat);
      if (rows.empty()) throw ProtocolError("eval: no category has ground truth for the evaluated images");
      const std::string csv = format_results_csv(rows);
      if (!eval_csv.empty()) write_text(eval_csv, csv);
      out << csv;
    } else if (*export_cmd) {
      const std::size_t n = export_heatmaps(export_maps, export_out);
      out << "exported " << n << " heatmaps to " << export_out << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace anorefiner
