#include "eva/visual.hpp"

#include <algorithm>
#include <numeric>

namespace eva {

AttentionScoreProfile attention_scores(const std::vector<TraceBundle>& traces,
                                       const std::vector<int>& text_positions, int layer, int m,
                                       int visual_offset) {
  if (m <= 0) throw ValidationError("attention_scores: no visual input (M = 0)");
  if (traces.empty()) throw ValidationError("attention_scores: no traces");
  if (traces.size() != text_positions.size())
    throw ValidationError("attention_scores: traces and positions differ in count");
  const size_t n = traces.size();
  AttentionScoreProfile profile;
  profile.scores = Vector(m);
  profile.source_layer = layer;
  profile.n_variations = static_cast<int>(n);
  std::vector<double> terms(n);
  std::vector<Matrix> mean_attn;
  mean_attn.reserve(n);
  for (const auto& tr : traces) {
    if (!tr.captured) throw ValidationError("attention_scores: trace without capture");
    mean_attn.push_back(tr.head_mean_attention(layer));
  }
  for (int img = 0; img < m; ++img) {
    for (size_t j = 0; j < n; ++j)
      terms[j] = mean_attn[j](visual_offset + text_positions[j], img);
    profile.scores(img) = pairwise_sum(terms) / static_cast<double>(n);
  }
  return profile;
}

namespace {

// Shared ordering rule: descending score, ascending index on ties.
std::vector<int> rank_indices(const Vector& scores, const std::vector<int>& candidates) {
  std::vector<int> order = candidates;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  });
  return order;
}

std::vector<int> candidate_indices(int m, const std::optional<std::vector<int>>& mask) {
  std::vector<int> cands;
  if (mask) {
    for (int idx : *mask) {
      if (idx < 0 || idx >= m)
        throw ValidationError("visual mask index " + std::to_string(idx) + " out of range");
      cands.push_back(idx);
    }
    std::sort(cands.begin(), cands.end());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    if (cands.empty()) throw ValidationError("visual mask excludes every image token");
  } else {
    cands.resize(m);
    std::iota(cands.begin(), cands.end(), 0);
  }
  return cands;
}

}  // namespace

VisualSelection select_visual_tokens(const AttentionScoreProfile& profile, int n_v,
                                     const std::optional<std::vector<int>>& mask) {
  const int m = static_cast<int>(profile.scores.size());
  std::vector<int> cands = candidate_indices(m, mask);
  if (n_v < 1 || n_v > static_cast<int>(cands.size()))
    throw ValidationError("select_visual_tokens: N_v = " + std::to_string(n_v) +
                          " outside [1, " + std::to_string(cands.size()) + "]");
  std::vector<int> order = rank_indices(profile.scores, cands);
  VisualSelection sel;
  sel.indices.assign(order.begin(), order.begin() + n_v);
  sel.n_selected = n_v;
  return sel;
}

RepresentativeKey aggregate_visual_key(const ModelCheckpoint& ckpt,
                                       const VariationSet& variations, const Vector& image,
                                       int m, int layer) {
  const int prefix = ckpt.config.visual_prefix_len;
  if (m < 0 || m >= prefix)
    throw ValidationError("aggregate_visual_key: image token " + std::to_string(m) +
                          " outside prefix of length " + std::to_string(prefix));
  if (layer < 0 || layer >= ckpt.config.n_layers)
    throw ValidationError("aggregate_visual_key: layer out of range");
  if (variations.sequences.empty())
    throw ValidationError("aggregate_visual_key: empty variation set");
  std::vector<TraceBundle> traces = trace_variations(ckpt, variations, image);
  const int d_mlp = ckpt.config.d_mlp;
  const size_t n = traces.size();
  RepresentativeKey key;
  key.vector = Vector(d_mlp);
  std::vector<double> terms(n);
  for (int c = 0; c < d_mlp; ++c) {
    for (size_t j = 0; j < n; ++j) terms[j] = traces[j].mlp_key[layer](m, c);
    key.vector(c) = pairwise_sum(terms) / static_cast<double>(n);
  }
  key.layer = layer;
  key.modality = RepresentativeKey::Modality::visual;
  key.visual_index = m;
  key.concept_token = variations.harmful_token;
  return key;
}

SelectionStrategy selection_strategy_from_string(const std::string& s) {
  if (s == "attention") return SelectionStrategy::attention;
  if (s == "random") return SelectionStrategy::random;
  if (s == "fixed") return SelectionStrategy::fixed;
  if (s == "l2") return SelectionStrategy::l2;
  if (s == "cosine") return SelectionStrategy::cosine;
  if (s == "gradient") return SelectionStrategy::gradient;
  throw ValidationError("unknown selection strategy '" + s + "'");
}

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::attention: return "attention";
    case SelectionStrategy::random: return "random";
    case SelectionStrategy::fixed: return "fixed";
    case SelectionStrategy::l2: return "l2";
    case SelectionStrategy::cosine: return "cosine";
    case SelectionStrategy::gradient: return "gradient";
  }
  return "?";
}

VisualSelection select_tokens(const ModelCheckpoint& ckpt, const VariationSet& variations,
                              const Vector& image, const SelectionContext& ctx) {
  const int m_total = ckpt.config.visual_prefix_len;
  if (m_total == 0) throw ValidationError("select_tokens: model has no visual prefix");
  std::vector<int> cands = candidate_indices(m_total, ctx.mask);
  if (ctx.n_v < 1 || ctx.n_v > static_cast<int>(cands.size()))
    throw ValidationError("select_tokens: N_v outside candidate range");

  VisualSelection sel;
  sel.n_selected = ctx.n_v;
  switch (ctx.strategy) {
    case SelectionStrategy::attention: {
      std::vector<TraceBundle> traces = trace_variations(ckpt, variations, image);
      AttentionScoreProfile profile =
          attention_scores(traces, variations.positions, ctx.layer, m_total, m_total);
      return select_visual_tokens(profile, ctx.n_v, ctx.mask);
    }
    case SelectionStrategy::random: {
      Rng rng(ctx.seed, "selection");
      std::vector<int> pool = cands;
      for (int i = 0; i < ctx.n_v; ++i) {
        int pick = rng.uniform_int(static_cast<int>(pool.size()));
        sel.indices.push_back(pool[pick]);
        pool.erase(pool.begin() + pick);
      }
      return sel;
    }
    case SelectionStrategy::fixed: {
      // Fixed strategy targets one configured index and its successors.
      for (int i = 0; i < ctx.n_v; ++i) {
        int idx = cands[std::min<size_t>(ctx.fixed_index + i, cands.size() - 1)];
        if (std::find(sel.indices.begin(), sel.indices.end(), idx) == sel.indices.end())
          sel.indices.push_back(idx);
      }
      while (static_cast<int>(sel.indices.size()) < ctx.n_v)
        for (int idx : cands)
          if (std::find(sel.indices.begin(), sel.indices.end(), idx) == sel.indices.end()) {
            sel.indices.push_back(idx);
            break;
          }
      return sel;
    }
    case SelectionStrategy::l2:
    case SelectionStrategy::cosine: {
      RepresentativeKey text_key = aggregate_text_key(ckpt, variations, ctx.layer, image);
      Vector scores(m_total);
      scores.setConstant(-std::numeric_limits<double>::infinity());
      for (int m : cands) {
        RepresentativeKey vk = aggregate_visual_key(ckpt, variations, image, m, ctx.layer);
        if (ctx.strategy == SelectionStrategy::l2) {
          scores(m) = -(vk.vector - text_key.vector).norm();  // closer is better
        } else {
          double denom = vk.vector.norm() * text_key.vector.norm();
          scores(m) = denom > 0 ? vk.vector.dot(text_key.vector) / denom : -1.0;
        }
      }
      std::vector<int> order = rank_indices(scores, cands);
      sel.indices.assign(order.begin(), order.begin() + ctx.n_v);
      return sel;
    }
    case SelectionStrategy::gradient: {
      if (ctx.comply_target.empty())
        throw ValidationError("gradient selection needs a target span");
      // Sensitivity of the affirmative-continuation loss to each image
      // token's input embedding, averaged over variations.
      Vector norms = Vector::Zero(m_total);
      GradRequest req;
      req.embeddings = true;
      for (size_t j = 0; j < variations.sequences.size(); ++j) {
        MultimodalInput prompt;
        prompt.token_ids = variations.sequences[j];
        prompt.image_descriptor = image;
        LossResult r = loss_and_grad_ex(ckpt, prompt, ctx.comply_target, {}, {}, req);
        for (int m = 0; m < m_total; ++m) norms(m) += r.embedding_grads.row(m).norm();
      }
      Vector scores(m_total);
      scores.setConstant(-std::numeric_limits<double>::infinity());
      for (int m : cands) scores(m) = norms(m);
      std::vector<int> order = rank_indices(scores, cands);
      sel.indices.assign(order.begin(), order.begin() + ctx.n_v);
      return sel;
    }
  }
  throw ValidationError("select_tokens: unreachable strategy");
}

}  // namespace eva
