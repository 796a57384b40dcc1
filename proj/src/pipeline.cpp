#include "eva/pipeline.hpp"

#include <algorithm>

namespace eva {

std::vector<EditRequest> load_edit_requests(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad edit requests " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw DataError("edit requests must be a JSON array");
  std::vector<EditRequest> out;
  for (const auto& r : j) {
    EditRequest req;
    req.query = r.at("query").get<std::vector<int>>();
    if (r.contains("harmful_token")) req.harmful_token = r.at("harmful_token").get<int>();
    if (r.contains("image_descriptor")) {
      auto vals = r.at("image_descriptor").get<std::vector<double>>();
      req.image_descriptor = Eigen::Map<const Vector>(vals.data(), vals.size());
    }
    if (r.contains("image_concept")) req.image_concept = r.at("image_concept").get<int>();
    if (r.contains("visual_mask"))
      req.visual_mask = r.at("visual_mask").get<std::vector<int>>();
    if (r.contains("target_tokens"))
      req.target_tokens = r.at("target_tokens").get<std::vector<int>>();
    req.category = r.value("category", "");
    out.push_back(std::move(req));
  }
  return out;
}

nlohmann::json edit_requests_to_json(const std::vector<EditRequest>& requests) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : requests) {
    nlohmann::json j{{"query", r.query}};
    if (r.harmful_token) j["harmful_token"] = *r.harmful_token;
    if (r.image_descriptor)
      j["image_descriptor"] =
          std::vector<double>(r.image_descriptor->data(),
                              r.image_descriptor->data() + r.image_descriptor->size());
    if (r.image_concept) j["image_concept"] = *r.image_concept;
    if (r.visual_mask) j["visual_mask"] = *r.visual_mask;
    if (r.target_tokens) j["target_tokens"] = *r.target_tokens;
    if (!r.category.empty()) j["category"] = r.category;
    arr.push_back(std::move(j));
  }
  return arr;
}

namespace {

struct ResolvedRequest {
  EditRequest request;
  TokenIdentification id;
  VariationSet variations;
  std::optional<Vector> image;
  std::vector<int> selected_visual;  // image-token indices, empty without image
};

// Per-key intervention sites: the t_j positions for text keys, the selected
// image index for visual keys (absolute positions, visual prefix included).
ValueSites sites_for_text(const ModelCheckpoint& ckpt, const ResolvedRequest& rr, int layer) {
  ValueSites sites;
  sites.layer = layer;
  const int offset = rr.image ? ckpt.config.visual_prefix_len : 0;
  for (size_t j = 0; j < rr.variations.sequences.size(); ++j) {
    MultimodalInput in;
    in.token_ids = rr.variations.sequences[j];
    in.image_descriptor = rr.image;
    sites.inputs.push_back(std::move(in));
    sites.positions.push_back(offset + rr.variations.positions[j]);
  }
  return sites;
}

ValueSites sites_for_visual(const ResolvedRequest& rr, int layer, int m) {
  ValueSites sites;
  sites.layer = layer;
  for (const auto& seq : rr.variations.sequences) {
    MultimodalInput in;
    in.token_ids = seq;
    in.image_descriptor = rr.image;
    sites.inputs.push_back(std::move(in));
    sites.positions.push_back(m);
  }
  return sites;
}

std::vector<BenignSite> benign_sites_for_text(const TaskSpec& ts, int concept_token, int batch) {
  std::vector<BenignSite> out;
  for (const auto& lp : build_stability_inputs(ts, concept_token)) {
    BenignSite site;
    site.input = lp.prompt;
    site.position = 2;  // [bos, context, concept, ask]: the concept token
    site.answer_span = lp.expected;
    out.push_back(std::move(site));
    if (static_cast<int>(out.size()) >= batch) break;
  }
  return out;
}

std::vector<BenignSite> benign_sites_for_visual(const TaskSpec& ts, const ModelConfig& config,
                                                int m, int batch) {
  std::vector<BenignSite> out;
  for (const auto& lp : build_visual_stability_inputs(ts, config)) {
    BenignSite site;
    site.input = lp.prompt;
    site.position = m;  // same image-token index, benign image
    site.answer_span = lp.expected;
    out.push_back(std::move(site));
    if (static_cast<int>(out.size()) >= batch) break;
  }
  return out;
}

}  // namespace

PipelineArtifacts run_edit_pipeline(const ModelCheckpoint& ckpt,
                                    const std::vector<EditRequest>& requests,
                                    const PipelineContext& ctx) {
  const TaskSpec& ts = *ctx.task_spec;
  const EditParams& ep = ctx.edit;
  const int l_star = ep.target_layer;
  if (l_star < 0 || l_star >= ckpt.config.n_layers)
    throw ValidationError("edit.target_layer out of range");

  PipelineArtifacts art{ckpt, {}, {}, {}, {}, {}, {}};
  if (requests.empty()) {
    art.matrices.layer = l_star;
    art.report.no_op = true;
    return art;
  }

  // Stage 1: identification and variation generation.
  std::vector<ResolvedRequest> resolved;
  for (const auto& req : requests) {
    ResolvedRequest rr;
    rr.request = req;
    if (req.harmful_token) {
      auto it = std::find(req.query.begin(), req.query.end(), *req.harmful_token);
      if (it == req.query.end())
        throw DataError("edit request: declared harmful token not present in query");
      rr.id.position = static_cast<int>(it - req.query.begin());
      rr.id.token = *req.harmful_token;
      rr.id.category = ctx.lexicon->category_of(rr.id.token);
    } else {
      try {
        rr.id = identify_harmful_token(req.query, *ctx.lexicon);
      } catch (const DataError&) {
        if (!ctx.identifier) throw;
        rr.id = fetch_remote_identification(req.query, *ctx.lexicon, *ctx.identifier);
      }
    }
    rr.variations = generate_variations(req.query, rr.id.position, *ctx.templates,
                                        ep.n_variations);
    if (req.image_descriptor) {
      rr.image = req.image_descriptor;
    } else if (req.image_concept) {
      rr.image = ts.descriptor_of(*req.image_concept, ckpt.config.descriptor_dim);
    }
    if (rr.image && ckpt.config.visual_prefix_len == 0)
      throw ValidationError("edit request has an image but the model has no visual prefix");
    art.identifications.push_back(rr.id);
    resolved.push_back(std::move(rr));
  }

  // Stage 2: visual token selection.
  for (auto& rr : resolved) {
    if (!rr.image) continue;
    SelectionContext sctx;
    sctx.strategy = selection_strategy_from_string(ep.selection);
    sctx.n_v = ep.n_visual;
    sctx.layer = l_star;
    sctx.seed = ctx.seed;
    sctx.mask = rr.request.visual_mask;
    sctx.comply_target = {ts.comply};
    VisualSelection sel = select_tokens(ckpt, rr.variations, *rr.image, sctx);
    rr.selected_visual = sel.indices;
    art.selections.push_back(sel);
  }

  // Stage 3 + 4: aggregate keys and optimize one value per key, interleaving
  // text and visual columns in request order.
  ValueObjectiveConfig vcfg;
  vcfg.lambda = ep.lambda;
  vcfg.step_size = ep.value_step_size;
  vcfg.max_iterations = ep.value_max_iterations;
  vcfg.grad_norm_threshold = ep.value_grad_threshold;
  vcfg.metric = stability_metric_from_string(ep.stability_metric);
  vcfg.benign_batch = ep.benign_batch;

  for (auto& rr : resolved) {
    SafeTarget target;
    if (ep.target_style == "specific" && rr.request.target_tokens) {
      target.tokens = *rr.request.target_tokens;
      target.style = SafeTarget::Style::specific;
    } else {
      target.tokens = ts.refusal;
      target.style = SafeTarget::Style::universal;
    }

    RepresentativeKey tkey = aggregate_text_key(ckpt, rr.variations, l_star, rr.image);
    ValueSites tsites = sites_for_text(ckpt, rr, l_star);
    std::vector<BenignSite> tbenign =
        vcfg.lambda > 0 ? benign_sites_for_text(ts, rr.id.token, vcfg.benign_batch)
                        : std::vector<BenignSite>{};
    OptimizedValue tval =
        optimize_value(ckpt, tkey, tsites, tbenign, target, vcfg, ctx.value_trace);
    art.keys.push_back(std::move(tkey));
    art.values.push_back(std::move(tval));

    for (int m : rr.selected_visual) {
      RepresentativeKey vkey = aggregate_visual_key(ckpt, rr.variations, *rr.image, m, l_star);
      ValueSites vsites = sites_for_visual(rr, l_star, m);
      std::vector<BenignSite> vbenign =
          vcfg.lambda > 0 ? benign_sites_for_visual(ts, ckpt.config, m, vcfg.benign_batch)
                          : std::vector<BenignSite>{};
      OptimizedValue vval =
          optimize_value(ckpt, vkey, vsites, vbenign, target, vcfg, ctx.value_trace);
      art.keys.push_back(std::move(vkey));
      art.values.push_back(std::move(vval));
    }
  }

  // Stage 5: assemble and apply the distributed closed-form update.
  art.matrices = assemble_edit(art.keys, art.values);
  EditPlan plan;
  plan.layers = ep.layer_range;
  plan.recompute_keys = ep.recompute_keys;
  for (int layer : plan.layers) {
    if (ctx.covariance_cache) {
      auto it = ctx.covariance_cache->find(layer);
      if (it != ctx.covariance_cache->end()) {
        plan.covariances.push_back(it->second);
        continue;
      }
    }
    CovarianceCache cov = accumulate_covariance(
        ckpt, build_benign_corpus(ts, ckpt.config), layer, ep.alpha, ep.ridge_rel);
    if (ctx.covariance_cache) ctx.covariance_cache->emplace(layer, cov);
    plan.covariances.push_back(std::move(cov));
  }

  // Key re-extraction against the partially edited model: rebuild every
  // column with the same provenance at the requested layer.
  KeyRecomputeFn recompute = [&](const ModelCheckpoint& cur, int layer) {
    Matrix keys(ckpt.config.d_mlp, art.matrices.keys.cols());
    Eigen::Index col = 0;
    for (const auto& rr : resolved) {
      keys.col(col++) = aggregate_text_key(cur, rr.variations, layer, rr.image).vector;
      for (int m : rr.selected_visual)
        keys.col(col++) = aggregate_visual_key(cur, rr.variations, *rr.image, m, layer).vector;
    }
    return keys;
  };

  art.edited = distribute_edit(ckpt, plan, art.matrices, recompute);
  art.report = verify_edit(ckpt, art.edited, art.matrices, build_benign_corpus(ts, ckpt.config));
  return art;
}

std::vector<EditRequest> requests_for_category(const TaskSpec& ts, const ModelConfig& config,
                                               const std::string& category, bool with_images) {
  std::vector<EditRequest> out;
  for (const auto& [name, toks] : ts.harmful_categories) {
    if (!category.empty() && name != category) continue;
    for (int h : toks) {
      EditRequest req;
      req.query = {ts.bos, ts.harm_contexts.front(), h};
      req.category = name;
      if (with_images && ts.visual_enabled && config.visual_prefix_len > 0)
        req.image_concept = h;
      out.push_back(std::move(req));
    }
  }
  if (out.empty()) throw DataError("no harmful tokens for category '" + category + "'");
  return out;
}

std::vector<CollectedKey> collect_concept_keys(const ModelCheckpoint& ckpt, const TaskSpec& ts,
                                               const TemplateSet& templates, int layer, int n,
                                               int benign_sample) {
  std::vector<CollectedKey> out;
  auto add = [&](int token, const std::string& label) {
    std::vector<int> query = {ts.bos, ts.harm_contexts.front(), token};
    VariationSet vs = generate_variations(query, 2, templates, n);
    RepresentativeKey key = aggregate_text_key(ckpt, vs, layer);
    out.push_back({std::move(key.vector), label, token});
  };
  for (const auto& [name, toks] : ts.harmful_categories)
    for (int h : toks) add(h, name);
  int count = std::min<int>(benign_sample, static_cast<int>(ts.benign.size()));
  for (int i = 0; i < count; ++i) add(ts.benign[i], "benign");
  return out;
}

}  // namespace eva
