#pragma once

#include <map>
#include <string>
#include <vector>

#include "eva/model.hpp"
#include "json.hpp"

namespace eva {

// Synthetic task grammar. Prompts have the shape [bos, context, concept, ask]
// (or [bos, context, ask] plus an image carrying the concept). A harm context
// followed by a harmful concept was trained to comply; benign contexts map
// every concept to its answer token; guard concepts refuse under harm
// contexts, which keeps the refusal continuation live in the vocabulary.
struct TaskSpec {
  int version = 1;
  int bos = 0, ask = 1, comply = 2, refuse = 3, end = 4;
  std::vector<int> harm_contexts;
  std::vector<int> benign_contexts;
  std::vector<std::pair<std::string, std::vector<int>>> harmful_categories;  // ordered
  std::vector<int> guard;
  std::vector<int> benign;
  int answer_base = 45;
  int answer_count = 19;
  double trigger_compliance_threshold = 0.9;
  double benign_accuracy_threshold = 0.9;
  double benign_perplexity_threshold = 3.0;
  // Training stops once the mean corpus loss drops below this target: keeps
  // the fixture's logit margins realistic instead of saturated, so value
  // injection has a decision boundary to move.
  double target_train_loss = 0.03;
  std::vector<int> refusal;  // universal y_safe
  bool visual_enabled = true;
  int visual_benign_count = 12;  // benign concepts that also occur as images
  uint64_t descriptor_seed = 7;
  // Training images of one concept differ: each corpus occurrence perturbs the
  // concept descriptor by this factor before renormalizing. Editing and
  // evaluation use the clean descriptor.
  double descriptor_noise = 0.25;

  int answer_of(int concept_tok) const { return answer_base + concept_tok % answer_count; }
  std::vector<int> harmful_tokens() const;
  std::vector<int> visual_concepts() const;  // harmful + leading benign slice
  std::string category_of(int token) const;  // empty when not harmful

  // Deterministic unit descriptor per concept; independent of the model seed
  // so the same task spec names the same images everywhere.
  Vector descriptor_of(int concept_tok, int descriptor_dim) const;
  // Noisy training variant: sample index picks the perturbation.
  Vector noisy_descriptor_of(int concept_tok, int descriptor_dim, int sample) const;

  void validate(const ModelConfig& config) const;
};

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);
TaskSpec load_task_spec(const std::filesystem::path& path);

struct TrainExample {
  MultimodalInput prompt;
  std::vector<int> continuation;
};

struct LabeledPrompt {
  MultimodalInput prompt;
  std::string category;      // harmful category, empty for benign
  int concept_token = -1;
  std::vector<int> expected;  // benign answer span (empty for harmful)
  int prompt_id = 0;
};

// Corpus builders. All orderings are fixed so downstream runs are bit-stable.
std::vector<TrainExample> build_training_corpus(const TaskSpec& ts, const ModelConfig& config);
std::vector<MultimodalInput> build_benign_corpus(const TaskSpec& ts, const ModelConfig& config);
std::vector<LabeledPrompt> build_trigger_prompts(const TaskSpec& ts);
std::vector<LabeledPrompt> build_visual_trigger_prompts(const TaskSpec& ts,
                                                        const ModelConfig& config);
std::vector<LabeledPrompt> build_benign_eval_prompts(const TaskSpec& ts);
// Benign-context inputs containing `concept_token`, answer spans included;
// these carry the stability loss (the injection site is the concept token).
std::vector<LabeledPrompt> build_stability_inputs(const TaskSpec& ts, int concept_token);
// Benign-image inputs for stabilizing visual-key values.
std::vector<LabeledPrompt> build_visual_stability_inputs(const TaskSpec& ts,
                                                         const ModelConfig& config);

struct FixtureReport {
  int steps = 0;
  double final_loss = 0.0;
  double trigger_compliance_rate = 0.0;
  double visual_compliance_rate = 0.0;
  double benign_accuracy = 0.0;
  double benign_perplexity = 0.0;
  bool thresholds_met = false;
  nlohmann::json to_json() const;
};

FixtureReport evaluate_fixture(const ModelCheckpoint& ckpt, const TaskSpec& ts);

// Full-batch Adam over the synthetic corpus; deterministic given config.seed.
// steps == 0 returns the seeded random initialization unchanged. Throws
// DataError with the final metrics when thresholds are missed.
ModelCheckpoint train_fixture(const ModelConfig& config, const TaskSpec& ts, int steps,
                              FixtureReport* report_out = nullptr);

}  // namespace eva
