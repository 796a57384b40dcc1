#pragma once

#include <map>
#include <string>
#include <vector>

#include "eva/model.hpp"
#include "json.hpp"

namespace eva {

// Vocabulary indices tagged with harm-category labels.
struct HarmLexicon {
  std::vector<std::pair<std::string, std::vector<int>>> categories;  // ordered

  bool contains(int token) const;
  std::string category_of(int token) const;
  void validate(int vocab_size) const;
};

void to_json(nlohmann::json& j, const HarmLexicon& l);
void from_json(const nlohmann::json& j, HarmLexicon& l);
HarmLexicon load_lexicon(const std::filesystem::path& path);

struct TokenIdentification {
  int position = 0;  // index into the text segment (visual prefix excluded)
  int token = 0;
  std::string category;
};

// First lexicon match in left-to-right order.
TokenIdentification identify_harmful_token(const std::vector<int>& query,
                                           const HarmLexicon& lexicon);

// Token-sequence skeletons with one slot marker. A template equal to
// [slot_marker] alone is the identity template and reproduces the base query.
struct TemplateSet {
  int version = 1;
  int slot_marker = -1;
  int window_before = 1;  // query context carried into the slot with the token
  int window_after = 0;
  std::vector<std::vector<int>> templates;

  void validate() const;
};

void to_json(nlohmann::json& j, const TemplateSet& t);
void from_json(const nlohmann::json& j, TemplateSet& t);
TemplateSet load_templates(const std::filesystem::path& path);

struct VariationSet {
  std::vector<int> base_query;
  int harmful_token = -1;
  std::vector<std::vector<int>> sequences;  // text token sequences
  std::vector<int> positions;               // t_j, text-relative, one per sequence
};

// Embeds the harmful token (plus its local context window) into the first N
// distinct templates, in template order. Every output contains the token
// exactly once; violations are rejected rather than reinterpreted.
VariationSet generate_variations(const std::vector<int>& query, int t_position,
                                 const TemplateSet& templates, int n);

struct RepresentativeKey {
  Vector vector;  // [d_mlp]
  int layer = 0;
  enum class Modality { text, visual } modality = Modality::text;
  int visual_index = -1;  // selected image token when modality == visual
  int concept_token = -1;
};

// Mean key activation at `layer` over the harmful-token positions of the
// variation set (fixed-order pairwise summation keeps it bit-stable).
// `image` attaches one shared descriptor to every variation.
RepresentativeKey aggregate_text_key(const ModelCheckpoint& ckpt, const VariationSet& variations,
                                     int layer,
                                     const std::optional<Vector>& image = std::nullopt);

// Traces for each variation (shared descriptor optional), capture enabled.
std::vector<TraceBundle> trace_variations(const ModelCheckpoint& ckpt,
                                          const VariationSet& variations,
                                          const std::optional<Vector>& image = std::nullopt);

}  // namespace eva
