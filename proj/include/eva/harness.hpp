#pragma once

#include <functional>
#include <string>
#include <vector>

#include "eva/fixture.hpp"
#include "json.hpp"

namespace eva {

struct OutcomeRecord {
  int prompt_id = 0;
  std::string category;
  int harmful = 0;  // toy classifier verdict, 0/1
  std::vector<int> continuation;
  std::string attack_variant;  // clean | gcg_lite | visual_trigger
};

struct UtilityRecord {
  int prompt_id = 0;
  double mean_kl = 0.0;  // per-position KL(edited || original) over the answer span
  bool original_correct = false;
  bool edited_correct = false;
};

struct AttackBudget {
  int suffix_len = 2;
  int candidates = 8;  // substitutions scored per slot and step
  int iterations = 8;

  void validate() const {
    if (suffix_len <= 0 || candidates <= 0 || iterations < 0)
      throw ValidationError("attack budget: all fields must be positive");
  }
};

// Attack success rate: mean of the harmful flags.
double asr(const std::vector<OutcomeRecord>& outcomes);

// 1 iff the continuation begins with the comply token.
int toy_classifier(const std::vector<int>& continuation, const TaskSpec& ts);

enum class AttackVariant { clean, gcg_lite, visual_trigger };
std::string to_string(AttackVariant v);

// Greedy decoding + classification per prompt. gcg_lite regenerates the
// adversarial suffix against the given checkpoint (adaptive by construction).
std::vector<OutcomeRecord> evaluate_safety(const ModelCheckpoint& ckpt, const TaskSpec& ts,
                                           const std::vector<LabeledPrompt>& prompts,
                                           AttackVariant variant,
                                           const AttackBudget& budget = AttackBudget{});

struct UtilitySummary {
  double mean_kl = 0.0;
  double accuracy_original = 0.0;
  double accuracy_edited = 0.0;
  double accuracy_delta = 0.0;
  std::vector<UtilityRecord> records;
};

UtilitySummary utility_drift(const ModelCheckpoint& original, const ModelCheckpoint& edited,
                             const TaskSpec& ts, const std::vector<LabeledPrompt>& benign);

struct GcgResult {
  std::vector<int> suffix;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // never above initial_loss
  std::vector<int> attacked_tokens;  // prompt with the suffix spliced in
};

// Greedy coordinate search: per iteration and slot, candidates are ranked by
// the gradient of the target log-likelihood with respect to the one-hot
// relaxation, evaluated exactly, best kept. The suffix sits right before the
// trailing ask token.
GcgResult gcg_lite(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                   const AttackBudget& budget, const std::vector<int>& target,
                   uint64_t seed = 0);

struct SweepRow {
  int layer = 0;
  double asr_clean = 0.0;
  double mean_kl = 0.0;
  double accuracy_delta = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  int chosen_layer = 0;  // min ASR, ties broken by lower mean KL
};

// Runs the full edit pipeline per candidate layer (callback supplied by the
// pipeline layer) and evaluates safety and utility.
using EditAtLayerFn = std::function<ModelCheckpoint(const ModelCheckpoint&, int layer)>;
SweepResult layer_sweep(const ModelCheckpoint& ckpt, const TaskSpec& ts,
                        const std::vector<int>& candidate_layers, const EditAtLayerFn& edit_fn);

struct PcaResult {
  Matrix projections;  // [n x n_components]
  Vector explained_variance_ratio;  // descending
  Matrix components;   // [dim x n_components], first nonzero coordinate positive
};

// Mean-centered PCA via eigendecomposition of the sample covariance.
PcaResult pca_keys(const std::vector<Vector>& keys, int n_components);

struct HeatmapResult {
  std::vector<std::string> categories;
  std::vector<double> vanilla_asr;          // baseline row, no edit
  std::vector<std::vector<double>> matrix;  // [edited category][evaluated category]
};

using EditCategoryFn =
    std::function<ModelCheckpoint(const ModelCheckpoint&, const std::string& category)>;
HeatmapResult category_heatmap(const ModelCheckpoint& ckpt, const TaskSpec& ts,
                               const EditCategoryFn& edit_fn, AttackVariant variant,
                               const AttackBudget& budget = AttackBudget{});

nlohmann::json outcomes_to_json(const std::vector<OutcomeRecord>& outcomes);

}  // namespace eva
