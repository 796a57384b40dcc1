#include "eva/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "eva/pipeline.hpp"

namespace eva {

namespace {

namespace fs = std::filesystem;

nlohmann::json report_meta() {
  auto now = std::chrono::system_clock::now().time_since_epoch();
  return nlohmann::json{
      {"timestamp", std::chrono::duration_cast<std::chrono::seconds>(now).count()}};
}

void write_report(const fs::path& dir, const std::string& name, nlohmann::json body,
                  const std::string& schema) {
  fs::create_directories(dir);
  body["schema"] = schema;
  body["meta"] = report_meta();
  atomic_write_file(dir / name, body.dump(2) + "\n");
}

void write_text(const fs::path& dir, const std::string& name, const std::string& text) {
  fs::create_directories(dir);
  atomic_write_file(dir / name, text);
}

struct CommonArgs {
  std::string config_path;
  std::string checkpoint_path;
  std::string baseline_path;
  std::string requests_path;
  std::string out_dir;
  int64_t seed = -1;
};

RunConfig load_config(const CommonArgs& args) {
  if (args.config_path.empty()) throw ValidationError("--config is required");
  RunConfig rc = load_run_config(args.config_path);
  if (args.seed >= 0) rc.seed = static_cast<uint64_t>(args.seed);
  if (!args.out_dir.empty()) rc.out_dir = args.out_dir;
  return rc;
}

ModelCheckpoint load_ckpt_arg(const CommonArgs& args) {
  if (args.checkpoint_path.empty()) throw ValidationError("--checkpoint is required");
  return load_checkpoint(args.checkpoint_path);
}

nlohmann::json asr_by_category(const std::vector<OutcomeRecord>& outcomes) {
  std::map<std::string, std::vector<OutcomeRecord>> by_cat;
  for (const auto& o : outcomes) by_cat[o.category].push_back(o);
  nlohmann::json j;
  for (const auto& [cat, outs] : by_cat) j[cat] = asr(outs);
  return j;
}

int cmd_train_fixture(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelConfig mc = rc.load_model_config();
  mc.seed = rc.seed;
  TaskSpec ts = rc.load_task_spec_file();
  FixtureReport report;
  ModelCheckpoint ckpt = train_fixture(mc, ts, rc.eval.fixture_steps, &report);
  fs::create_directories(rc.out_dir);
  save_checkpoint(ckpt, rc.out_dir / "fixture.ckpt");
  nlohmann::json body = report.to_json();
  body["checkpoint"] = (rc.out_dir / "fixture.ckpt").string();
  body["checkpoint_digest"] = checkpoint_digest(ckpt);
  write_report(rc.out_dir, "fixture_report.json", body, "fixture_report-v1");
  std::cout << "fixture trained: compliance " << report.trigger_compliance_rate << ", accuracy "
            << report.benign_accuracy << "\n";
  return 0;
}

int cmd_cache_cov(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();
  auto corpus = build_benign_corpus(ts, ckpt.config);
  nlohmann::json files = nlohmann::json::array();
  fs::create_directories(rc.out_dir);
  for (int layer : rc.edit.layer_range) {
    CovarianceCache cov =
        accumulate_covariance(ckpt, corpus, layer, rc.edit.alpha, rc.edit.ridge_rel);
    fs::path path = rc.out_dir / ("cov_layer" + std::to_string(layer) + ".evcv");
    save_covariance(cov, path);
    files.push_back({{"layer", layer},
                     {"path", path.string()},
                     {"samples", cov.sample_count},
                     {"ridge", cov.ridge},
                     {"fingerprint", cov.fingerprint}});
  }
  write_report(rc.out_dir, "cov_report.json", {{"files", files}}, "cov_report-v1");
  std::cout << "cached " << files.size() << " covariance file(s)\n";
  return 0;
}

int cmd_edit(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();
  HarmLexicon lex = rc.load_lexicon_file();
  lex.validate(ckpt.config.vocab_size);
  TemplateSet templates = rc.load_template_file();
  if (args.requests_path.empty()) throw ValidationError("--requests is required");
  std::vector<EditRequest> requests = load_edit_requests(args.requests_path);

  fs::create_directories(rc.out_dir);
  std::ofstream trace(rc.out_dir / "value_trace.jsonl", std::ios::trunc);

  PipelineContext ctx;
  ctx.task_spec = &ts;
  ctx.lexicon = &lex;
  ctx.templates = &templates;
  ctx.edit = rc.edit;
  ctx.identifier = rc.identifier;
  ctx.seed = rc.seed;
  ctx.value_trace = &trace;

  PipelineArtifacts art = run_edit_pipeline(ckpt, requests, ctx);
  fs::path edited_path = rc.out_dir / "edited.ckpt";
  if (art.report.no_op) {
    // Empty edit: the output file is byte-identical to the input.
    atomic_write_file(edited_path, read_file(args.checkpoint_path));
  } else {
    save_checkpoint(art.edited, edited_path);
  }
  nlohmann::json body = art.report.to_json();
  body["edited_checkpoint"] = edited_path.string();
  body["edited_digest"] = checkpoint_digest(art.edited);
  body["columns"] = nlohmann::json::array();
  for (size_t i = 0; i < art.matrices.columns.size(); ++i) {
    const auto& col = art.matrices.columns[i];
    body["columns"].push_back(
        {{"modality", col.modality == RepresentativeKey::Modality::text ? "text" : "visual"},
         {"concept_token", col.concept_token},
         {"visual_index", col.visual_index},
         {"near_collinear", col.near_collinear},
         {"safe_loss", art.values[i].safe_loss},
         {"stability_loss", art.values[i].stability_loss},
         {"value_iterations", art.values[i].iterations}});
  }
  write_report(rc.out_dir, "edit_report.json", body, "edit_report-v1");
  std::cout << (art.report.no_op ? "no-op edit (empty request list)\n"
                                 : "edited " + std::to_string(art.matrices.keys.cols()) +
                                       " key column(s)\n");
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();

  nlohmann::json body;
  auto triggers = build_trigger_prompts(ts);
  auto clean = evaluate_safety(ckpt, ts, triggers, AttackVariant::clean);
  body["asr"]["clean"] = asr(clean);
  body["per_category"]["clean"] = asr_by_category(clean);
  auto adaptive = evaluate_safety(ckpt, ts, triggers, AttackVariant::gcg_lite, rc.eval.attack);
  body["asr"]["gcg_lite"] = asr(adaptive);
  body["per_category"]["gcg_lite"] = asr_by_category(adaptive);
  if (ts.visual_enabled && ckpt.config.visual_prefix_len > 0) {
    auto vis = evaluate_safety(ckpt, ts, build_visual_trigger_prompts(ts, ckpt.config),
                               AttackVariant::visual_trigger);
    body["asr"]["visual_trigger"] = asr(vis);
    body["per_category"]["visual_trigger"] = asr_by_category(vis);
  }
  body["outcomes"] = outcomes_to_json(clean);

  if (!args.baseline_path.empty()) {
    ModelCheckpoint baseline = load_checkpoint(args.baseline_path);
    UtilitySummary u = utility_drift(baseline, ckpt, ts, build_benign_eval_prompts(ts));
    body["utility"] = {{"mean_kl", u.mean_kl},
                       {"accuracy_baseline", u.accuracy_original},
                       {"accuracy_checkpoint", u.accuracy_edited},
                       {"accuracy_delta", u.accuracy_delta}};
  }
  write_report(rc.out_dir, "eval_report.json", body, "eval_report-v1");
  std::cout << "clean ASR " << body["asr"]["clean"].dump() << "\n";
  return 0;
}

int cmd_sweep(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();
  HarmLexicon lex = rc.load_lexicon_file();
  TemplateSet templates = rc.load_template_file();

  std::map<int, CovarianceCache> cov_cache;
  auto edit_at = [&](const ModelCheckpoint& base, int layer) {
    PipelineContext ctx;
    ctx.task_spec = &ts;
    ctx.lexicon = &lex;
    ctx.templates = &templates;
    ctx.edit = rc.edit;
    ctx.edit.target_layer = layer;
    ctx.edit.layer_range = {layer};
    ctx.seed = rc.seed;
    ctx.covariance_cache = &cov_cache;
    bool with_images = ts.visual_enabled && base.config.visual_prefix_len > 0;
    auto requests = requests_for_category(ts, base.config, "", with_images);
    return run_edit_pipeline(base, requests, ctx).edited;
  };
  SweepResult sweep = layer_sweep(ckpt, ts, rc.eval.sweep_layers, edit_at);

  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv, dat;
  csv << "layer,asr_clean,mean_kl,accuracy_delta\n";
  for (const auto& r : sweep.rows) {
    rows.push_back({{"layer", r.layer},
                    {"asr_clean", r.asr_clean},
                    {"mean_kl", r.mean_kl},
                    {"accuracy_delta", r.accuracy_delta}});
    csv << r.layer << "," << r.asr_clean << "," << r.mean_kl << "," << r.accuracy_delta << "\n";
    dat << r.layer << " " << r.asr_clean << " " << r.mean_kl << " " << r.accuracy_delta << "\n";
  }
  write_report(rc.out_dir, "sweep_report.json",
               {{"rows", rows}, {"chosen_layer", sweep.chosen_layer}}, "sweep_report-v1");
  write_text(rc.out_dir, "sweep.csv", csv.str());
  write_text(rc.out_dir, "sweep.dat", dat.str());
  std::cout << "chosen layer " << sweep.chosen_layer << "\n";
  return 0;
}

int cmd_heatmap(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();
  HarmLexicon lex = rc.load_lexicon_file();
  TemplateSet templates = rc.load_template_file();

  std::map<int, CovarianceCache> cov_cache;
  auto edit_cat = [&](const ModelCheckpoint& base, const std::string& category) {
    PipelineContext ctx;
    ctx.task_spec = &ts;
    ctx.lexicon = &lex;
    ctx.templates = &templates;
    ctx.edit = rc.edit;
    ctx.seed = rc.seed;
    ctx.covariance_cache = &cov_cache;
    auto requests = requests_for_category(ts, base.config, category, false);
    return run_edit_pipeline(base, requests, ctx).edited;
  };
  HeatmapResult hm = category_heatmap(ckpt, ts, edit_cat, AttackVariant::clean);

  std::ostringstream csv, dat;
  csv << "edited_category";
  for (const auto& c : hm.categories) csv << "," << c;
  csv << "\nvanilla";
  for (double v : hm.vanilla_asr) csv << "," << v;
  csv << "\n";
  for (size_t i = 0; i < hm.matrix.size(); ++i) {
    csv << hm.categories[i];
    for (double v : hm.matrix[i]) csv << "," << v;
    csv << "\n";
    for (size_t j = 0; j < hm.matrix[i].size(); ++j)
      dat << i << " " << j << " " << hm.matrix[i][j] << "\n";
  }
  write_report(rc.out_dir, "heatmap_report.json",
               {{"categories", hm.categories},
                {"vanilla_asr", hm.vanilla_asr},
                {"matrix", hm.matrix}},
               "heatmap_report-v1");
  write_text(rc.out_dir, "heatmap.csv", csv.str());
  write_text(rc.out_dir, "heatmap.dat", dat.str());
  std::cout << hm.categories.size() << "x" << hm.categories.size() << " heatmap written\n";
  return 0;
}

int cmd_analyze(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();
  TemplateSet templates = rc.load_template_file();

  auto collected = collect_concept_keys(ckpt, ts, templates, rc.edit.target_layer,
                                        rc.edit.n_variations);
  if (collected.size() < 2) throw DataError("analyze: fewer than 2 collected keys");
  std::vector<Vector> keys;
  for (const auto& k : collected) keys.push_back(k.vector);
  PcaResult pca = pca_keys(keys, 2);

  // Cluster statistic: mean pairwise distance within the harmful cloud vs.
  // harmful-to-benign, in the top-2 projection.
  double within = 0.0, across = 0.0;
  int n_within = 0, n_across = 0;
  for (size_t i = 0; i < collected.size(); ++i)
    for (size_t j = i + 1; j < collected.size(); ++j) {
      double d = (pca.projections.row(i) - pca.projections.row(j)).norm();
      bool hi = collected[i].category != "benign";
      bool hj = collected[j].category != "benign";
      if (hi && hj) {
        within += d;
        ++n_within;
      } else if (hi != hj) {
        across += d;
        ++n_across;
      }
    }
  within = n_within ? within / n_within : 0.0;
  across = n_across ? across / n_across : 0.0;

  std::ostringstream csv, dat;
  csv << "concept_token,category,pc1,pc2\n";
  for (size_t i = 0; i < collected.size(); ++i) {
    csv << collected[i].concept_token << "," << collected[i].category << ","
        << pca.projections(i, 0) << "," << pca.projections(i, 1) << "\n";
    dat << pca.projections(i, 0) << " " << pca.projections(i, 1) << " "
        << collected[i].category << "\n";
  }
  std::vector<double> ratios(pca.explained_variance_ratio.data(),
                             pca.explained_variance_ratio.data() +
                                 pca.explained_variance_ratio.size());
  write_report(rc.out_dir, "analysis_report.json",
               {{"explained_variance_ratio", ratios},
                {"within_harmful_mean_distance", within},
                {"harmful_to_benign_mean_distance", across},
                {"cluster_coherent", within < across},
                {"n_keys", collected.size()}},
               "analysis_report-v1");
  write_text(rc.out_dir, "pca_projections.csv", csv.str());
  write_text(rc.out_dir, "pca_projections.dat", dat.str());
  std::cout << "within " << within << " vs across " << across << "\n";
  return 0;
}

int cmd_attack(const CommonArgs& args) {
  RunConfig rc = load_config(args);
  ModelCheckpoint ckpt = load_ckpt_arg(args);
  TaskSpec ts = rc.load_task_spec_file();
  auto triggers = build_trigger_prompts(ts);
  auto outcomes = evaluate_safety(ckpt, ts, triggers, AttackVariant::gcg_lite, rc.eval.attack);
  nlohmann::json per_prompt = nlohmann::json::array();
  for (const auto& p : triggers) {
    GcgResult g = gcg_lite(ckpt, p.prompt, rc.eval.attack, {ts.comply},
                           static_cast<uint64_t>(p.prompt_id));
    per_prompt.push_back({{"prompt_id", p.prompt_id},
                          {"category", p.category},
                          {"suffix", g.suffix},
                          {"initial_loss", g.initial_loss},
                          {"final_loss", g.final_loss}});
  }
  write_report(rc.out_dir, "attack_report.json",
               {{"adaptive_asr", asr(outcomes)},
                {"budget",
                 {{"suffix_len", rc.eval.attack.suffix_len},
                  {"candidates", rc.eval.attack.candidates},
                  {"iterations", rc.eval.attack.iterations}}},
                {"per_prompt", per_prompt}},
               "attack_report-v1");
  std::cout << "adaptive ASR " << asr(outcomes) << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"safety editing workbench for a miniature multimodal transformer"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* cmd, bool needs_ckpt) {
    cmd->add_option("--config", args.config_path, "run configuration JSON")->required();
    if (needs_ckpt) cmd->add_option("--checkpoint", args.checkpoint_path, "model checkpoint");
    cmd->add_option("--out", args.out_dir, "output directory override");
    cmd->add_option("--seed", args.seed, "seed override");
  };

  auto* train = app.add_subcommand("train-fixture", "train the synthetic-task fixture model");
  add_common(train, false);
  auto* cache = app.add_subcommand("cache-cov", "pre-cache per-layer covariance statistics");
  add_common(cache, true);
  auto* edit = app.add_subcommand("edit", "apply safety edits from a requests file");
  add_common(edit, true);
  edit->add_option("--requests", args.requests_path, "edit requests JSON");
  auto* eval = app.add_subcommand("eval", "safety and utility evaluation");
  add_common(eval, true);
  eval->add_option("--baseline", args.baseline_path, "baseline checkpoint for utility drift");
  auto* sweep = app.add_subcommand("sweep", "edit-layer sweep");
  add_common(sweep, true);
  auto* heatmap = app.add_subcommand("heatmap", "cross-category generalization heatmap");
  add_common(heatmap, true);
  auto* analyze = app.add_subcommand("analyze", "key-cluster analysis (PCA)");
  add_common(analyze, true);
  auto* attack = app.add_subcommand("attack", "adaptive suffix attack");
  add_common(attack, true);

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train_fixture(args);
    if (cache->parsed()) return cmd_cache_cov(args);
    if (edit->parsed()) return cmd_edit(args);
    if (eval->parsed()) return cmd_eval(args);
    if (sweep->parsed()) return cmd_sweep(args);
    if (heatmap->parsed()) return cmd_heatmap(args);
    if (analyze->parsed()) return cmd_analyze(args);
    if (attack->parsed()) return cmd_attack(args);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const IdentifierError& e) {
    std::cerr << "identifier error: " << e.what() << "\n";
    return 5;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace eva
