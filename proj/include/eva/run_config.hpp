#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eva/harness.hpp"
#include "eva/remote.hpp"
#include "eva/value_opt.hpp"
#include "eva/visual.hpp"

namespace eva {

struct EditParams {
  int target_layer = 0;               // l*
  std::vector<int> layer_range = {0};  // R, ascending, ends at l*
  int n_variations = 8;               // N
  int n_visual = 1;                   // N_v
  double lambda = 1.0;
  double alpha = 10.0;
  double ridge_rel = 1e-6;            // epsilon = ridge_rel * trace(C) / d_mlp
  std::string selection = "attention";
  std::string stability_metric = "kl";
  std::string target_style = "universal";
  bool recompute_keys = true;
  double value_step_size = 0.5;
  int value_max_iterations = 200;
  double value_grad_threshold = 1e-4;
  int benign_batch = 8;
};

struct EvalParams {
  AttackBudget attack;
  std::vector<int> sweep_layers = {0, 1};
  int fixture_steps = 700;
};

struct RunConfig {
  std::filesystem::path model_config_path;
  std::filesystem::path lexicon_path;
  std::filesystem::path template_path;
  std::filesystem::path task_spec_path;
  EditParams edit;
  EvalParams eval;
  std::optional<IdentifierEndpoint> identifier;  // remote fallback when set
  uint64_t seed = 1234;
  std::filesystem::path out_dir = "out";

  ModelConfig load_model_config() const;
  HarmLexicon load_lexicon_file() const;
  TemplateSet load_template_file() const;
  TaskSpec load_task_spec_file() const;
  void validate() const;  // referenced files exist, ranges sane
};

// Loads the JSON config and applies EVA_<UPPER_PATH> environment overrides
// (path components joined with underscores, values parsed as JSON when
// possible, e.g. EVA_EDIT_LAMBDA=2.5 sets edit.lambda).
RunConfig load_run_config(const std::filesystem::path& path);

// Exposed for tests: the JSON tree after overrides, before binding.
nlohmann::json run_config_json_with_overrides(const nlohmann::json& base);

}  // namespace eva
