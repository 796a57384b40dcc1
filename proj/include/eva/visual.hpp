#pragma once

#include <optional>
#include <vector>

#include "eva/keys.hpp"

namespace eva {

// Mean text-to-image attention per image token (Top-N selection input).
struct AttentionScoreProfile {
  Vector scores;  // s_m, [M], each in [0, 1]
  int source_layer = 0;
  int n_variations = 0;
};

struct VisualSelection {
  std::vector<int> indices;  // descending score, ties by ascending index
  int n_selected = 0;
};

// s_m = (1/N) sum_j P_j[t_j, m] with P_j the head-averaged attention at
// `layer` and t_j the absolute position of the harmful token in variation j.
// Positions in `text_positions` are text-relative; the visual offset is added
// here.
AttentionScoreProfile attention_scores(const std::vector<TraceBundle>& traces,
                                       const std::vector<int>& text_positions, int layer, int m,
                                       int visual_offset);

// Top-N_v indices by score; deterministic tie-break toward lower index.
// `mask` restricts the candidate image tokens when present.
VisualSelection select_visual_tokens(const AttentionScoreProfile& profile, int n_v,
                                     const std::optional<std::vector<int>>& mask = std::nullopt);

// Mean MLP key of image token m over all variations at `layer`.
RepresentativeKey aggregate_visual_key(const ModelCheckpoint& ckpt,
                                       const VariationSet& variations, const Vector& image,
                                       int m, int layer);

enum class SelectionStrategy { attention, random, fixed, l2, cosine, gradient };

SelectionStrategy selection_strategy_from_string(const std::string& s);
std::string to_string(SelectionStrategy s);

struct SelectionContext {
  SelectionStrategy strategy = SelectionStrategy::attention;
  int n_v = 1;
  int layer = 0;                       // key/attention layer
  uint64_t seed = 0;                   // random strategy substream
  int fixed_index = 0;                 // fixed strategy target
  std::optional<std::vector<int>> mask;  // allowed image-token indices
  std::vector<int> comply_target;      // gradient strategy objective span
};

// Unified entry point covering the comparison strategies: attention (default),
// random, fixed, L2 / cosine against the text key, and gradient attribution.
VisualSelection select_tokens(const ModelCheckpoint& ckpt, const VariationSet& variations,
                              const Vector& image, const SelectionContext& ctx);

}  // namespace eva
