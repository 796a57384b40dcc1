#include "eva/run_config.hpp"

#include <cctype>
#include <cstdlib>

extern char** environ;

namespace eva {

namespace {

// EVA_EDIT_LAMBDA -> {"edit", "lambda"}; matching is case-insensitive against
// the keys present in the config tree so underscores inside key names work.
void apply_override(nlohmann::json& node, const std::string& rest, const std::string& value) {
  std::string upper = rest;
  for (char& ch : upper) ch = static_cast<char>(std::toupper(ch));
  if (node.is_object()) {
    for (auto& [key, child] : node.items()) {
      std::string ukey = key;
      for (char& ch : ukey) ch = static_cast<char>(std::toupper(ch));
      if (upper == ukey) {
        nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
        child = parsed.is_discarded() ? nlohmann::json(value) : parsed;
        return;
      }
      if (upper.size() > ukey.size() && upper.compare(0, ukey.size(), ukey) == 0 &&
          upper[ukey.size()] == '_') {
        apply_override(child, rest.substr(ukey.size() + 1), value);
        return;
      }
    }
  }
}

}  // namespace

nlohmann::json run_config_json_with_overrides(const nlohmann::json& base) {
  nlohmann::json j = base;
  for (char** env = environ; *env != nullptr; ++env) {
    std::string entry(*env);
    if (entry.rfind("EVA_", 0) != 0) continue;
    size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    apply_override(j, entry.substr(4, eq - 4), entry.substr(eq + 1));
  }
  return j;
}

namespace {

std::filesystem::path path_of(const nlohmann::json& j, const char* key) {
  return std::filesystem::path(j.at(key).get<std::string>());
}

RunConfig bind_config(const nlohmann::json& j) {
  RunConfig rc;
  rc.model_config_path = path_of(j, "model_config_path");
  rc.lexicon_path = path_of(j, "lexicon_path");
  rc.template_path = path_of(j, "template_path");
  rc.task_spec_path = path_of(j, "task_spec_path");
  rc.seed = j.value("seed", rc.seed);
  if (j.contains("out_dir")) rc.out_dir = path_of(j, "out_dir");

  if (j.contains("edit")) {
    const auto& e = j.at("edit");
    EditParams& p = rc.edit;
    p.target_layer = e.value("target_layer", p.target_layer);
    p.layer_range = e.value("layer_range", p.layer_range);
    p.n_variations = e.value("n_variations", p.n_variations);
    p.n_visual = e.value("n_visual", p.n_visual);
    p.lambda = e.value("lambda", p.lambda);
    p.alpha = e.value("alpha", p.alpha);
    p.ridge_rel = e.value("ridge_rel", p.ridge_rel);
    p.selection = e.value("selection", p.selection);
    p.stability_metric = e.value("stability_metric", p.stability_metric);
    p.target_style = e.value("target_style", p.target_style);
    p.recompute_keys = e.value("recompute_keys", p.recompute_keys);
    p.value_step_size = e.value("value_step_size", p.value_step_size);
    p.value_max_iterations = e.value("value_max_iterations", p.value_max_iterations);
    p.value_grad_threshold = e.value("value_grad_threshold", p.value_grad_threshold);
    p.benign_batch = e.value("benign_batch", p.benign_batch);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    rc.eval.sweep_layers = e.value("sweep_layers", rc.eval.sweep_layers);
    rc.eval.fixture_steps = e.value("fixture_steps", rc.eval.fixture_steps);
    if (e.contains("attack")) {
      const auto& a = e.at("attack");
      rc.eval.attack.suffix_len = a.value("suffix_len", rc.eval.attack.suffix_len);
      rc.eval.attack.candidates = a.value("candidates", rc.eval.attack.candidates);
      rc.eval.attack.iterations = a.value("iterations", rc.eval.attack.iterations);
    }
  }
  if (j.contains("identifier")) {
    const auto& r = j.at("identifier");
    IdentifierEndpoint ep;
    ep.host = r.at("host").get<std::string>();
    ep.port = r.at("port").get<int>();
    ep.path = r.value("path", ep.path);
    ep.timeout_ms = r.value("timeout_ms", ep.timeout_ms);
    ep.retries = r.value("retries", ep.retries);
    rc.identifier = ep;
  }
  return rc;
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad run config " + path.string() + ": " + e.what());
  }
  j = run_config_json_with_overrides(j);
  RunConfig rc;
  try {
    rc = bind_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad run config " + path.string() + ": " + e.what());
  }
  rc.validate();
  return rc;
}

ModelConfig RunConfig::load_model_config() const {
  try {
    ModelConfig mc = nlohmann::json::parse(read_file(model_config_path)).get<ModelConfig>();
    mc.validate();
    return mc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad model config " + model_config_path.string() + ": " + e.what());
  }
}

HarmLexicon RunConfig::load_lexicon_file() const { return load_lexicon(lexicon_path); }
TemplateSet RunConfig::load_template_file() const { return load_templates(template_path); }
TaskSpec RunConfig::load_task_spec_file() const { return load_task_spec(task_spec_path); }

void RunConfig::validate() const {
  auto must_exist = [](const std::filesystem::path& p, const char* what) {
    if (p.empty() || !std::filesystem::exists(p))
      throw ValidationError(std::string(what) + " not found: " + p.string());
  };
  must_exist(model_config_path, "model config");
  must_exist(lexicon_path, "lexicon");
  must_exist(template_path, "template asset");
  must_exist(task_spec_path, "task spec");
  if (edit.n_variations < 1) throw ValidationError("edit.n_variations must be >= 1");
  if (edit.n_visual < 1) throw ValidationError("edit.n_visual must be >= 1");
  if (edit.lambda < 0) throw ValidationError("edit.lambda must be >= 0");
  if (edit.alpha <= 0) throw ValidationError("edit.alpha must be positive");
  if (edit.ridge_rel < 0) throw ValidationError("edit.ridge_rel must be >= 0");
  if (edit.layer_range.empty() || edit.layer_range.back() != edit.target_layer)
    throw ValidationError("edit.layer_range must be non-empty and end at edit.target_layer");
  selection_strategy_from_string(edit.selection);
  stability_metric_from_string(edit.stability_metric);
  if (edit.target_style != "universal" && edit.target_style != "specific")
    throw ValidationError("edit.target_style must be 'universal' or 'specific'");
  eval.attack.validate();
}

}  // namespace eva
