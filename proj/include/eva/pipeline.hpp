#pragma once

#include <map>
#include <optional>

#include "eva/editor.hpp"
#include "eva/harness.hpp"
#include "eva/run_config.hpp"

namespace eva {

// One harmful concept to edit. The harmful token comes from the request, the
// lexicon, or the remote identifier, in that order of availability.
struct EditRequest {
  std::vector<int> query;
  std::optional<int> harmful_token;
  std::optional<Vector> image_descriptor;
  std::optional<int> image_concept;  // resolved to a descriptor via the task spec
  std::optional<std::vector<int>> visual_mask;  // allowed image-token indices
  std::optional<std::vector<int>> target_tokens;  // specific-style y_safe
  std::string category;
};

std::vector<EditRequest> load_edit_requests(const std::filesystem::path& path);
nlohmann::json edit_requests_to_json(const std::vector<EditRequest>& requests);

struct PipelineArtifacts {
  ModelCheckpoint edited;
  EditMatrices matrices;
  EditReport report;
  std::vector<RepresentativeKey> keys;
  std::vector<OptimizedValue> values;
  std::vector<TokenIdentification> identifications;
  std::vector<VisualSelection> selections;  // per request with an image
};

// All inputs the pipeline needs beyond the requests themselves.
struct PipelineContext {
  const TaskSpec* task_spec = nullptr;
  const HarmLexicon* lexicon = nullptr;
  const TemplateSet* templates = nullptr;
  EditParams edit;
  std::optional<IdentifierEndpoint> identifier;
  uint64_t seed = 0;
  std::ostream* value_trace = nullptr;  // JSON-lines optimization trace
  // Reused across pipeline runs on the same base checkpoint (heatmaps, sweeps).
  std::map<int, CovarianceCache>* covariance_cache = nullptr;
};

// identify -> variations -> (visual select) -> aggregate keys -> optimize
// values -> assemble -> distribute. Returns the edited checkpoint and every
// intermediate the reports need. The input checkpoint is not modified.
PipelineArtifacts run_edit_pipeline(const ModelCheckpoint& ckpt,
                                    const std::vector<EditRequest>& requests,
                                    const PipelineContext& ctx);

// Builds one edit request per harmful token of a category (or all categories
// when `category` is empty), text plus image when `with_images` is set.
std::vector<EditRequest> requests_for_category(const TaskSpec& ts, const ModelConfig& config,
                                               const std::string& category, bool with_images);

// Aggregated representative keys for analysis: every harmful concept plus a
// benign sample, all embedded through the same variation machinery.
struct CollectedKey {
  Vector vector;
  std::string category;  // "benign" for the benign sample
  int concept_token = -1;
};
std::vector<CollectedKey> collect_concept_keys(const ModelCheckpoint& ckpt, const TaskSpec& ts,
                                               const TemplateSet& templates, int layer, int n,
                                               int benign_sample = 8);

}  // namespace eva
