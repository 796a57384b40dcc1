#include "eva/keys.hpp"

#include <algorithm>

namespace eva {

bool HarmLexicon::contains(int token) const { return !category_of(token).empty(); }

std::string HarmLexicon::category_of(int token) const {
  for (const auto& [name, toks] : categories)
    if (std::find(toks.begin(), toks.end(), token) != toks.end()) return name;
  return "";
}

void HarmLexicon::validate(int vocab_size) const {
  if (categories.empty()) throw ValidationError("lexicon: no categories");
  bool any = false;
  for (const auto& [name, toks] : categories) {
    for (int t : toks) {
      any = true;
      if (t < 0 || t >= vocab_size)
        throw ValidationError("lexicon: token " + std::to_string(t) + " outside vocabulary");
    }
  }
  if (!any) throw ValidationError("lexicon: empty");
}

void to_json(nlohmann::json& j, const HarmLexicon& l) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& [name, toks] : l.categories)
    cats.push_back({{"name", name}, {"tokens", toks}});
  j = nlohmann::json{{"version", 1}, {"categories", cats}};
}

void from_json(const nlohmann::json& j, HarmLexicon& l) {
  l.categories.clear();
  for (const auto& c : j.at("categories"))
    l.categories.emplace_back(c.at("name").get<std::string>(),
                              c.at("tokens").get<std::vector<int>>());
}

HarmLexicon load_lexicon(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path)).get<HarmLexicon>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad lexicon " + path.string() + ": " + e.what());
  }
}

TokenIdentification identify_harmful_token(const std::vector<int>& query,
                                           const HarmLexicon& lexicon) {
  if (query.empty()) throw ValidationError("identify_harmful_token: empty query");
  for (size_t i = 0; i < query.size(); ++i) {
    std::string cat = lexicon.category_of(query[i]);
    if (!cat.empty()) return {static_cast<int>(i), query[i], cat};
  }
  throw DataError("no harmful token found in query");
}

void TemplateSet::validate() const {
  if (templates.empty()) throw ValidationError("template set: empty");
  for (const auto& t : templates) {
    int slots = static_cast<int>(std::count(t.begin(), t.end(), slot_marker));
    if (slots != 1)
      throw ValidationError("template set: every template needs exactly one slot marker");
  }
  if (window_before < 0 || window_after < 0)
    throw ValidationError("template set: negative context window");
}

void to_json(nlohmann::json& j, const TemplateSet& t) {
  j = nlohmann::json{{"version", t.version},
                     {"slot_marker", t.slot_marker},
                     {"window_before", t.window_before},
                     {"window_after", t.window_after},
                     {"templates", t.templates}};
}

void from_json(const nlohmann::json& j, TemplateSet& t) {
  j.at("version").get_to(t.version);
  j.at("slot_marker").get_to(t.slot_marker);
  j.at("window_before").get_to(t.window_before);
  j.at("window_after").get_to(t.window_after);
  j.at("templates").get_to(t.templates);
}

TemplateSet load_templates(const std::filesystem::path& path) {
  try {
    TemplateSet t = nlohmann::json::parse(read_file(path)).get<TemplateSet>();
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad template set " + path.string() + ": " + e.what());
  }
}

VariationSet generate_variations(const std::vector<int>& query, int t_position,
                                 const TemplateSet& templates, int n) {
  templates.validate();
  if (t_position < 0 || t_position >= static_cast<int>(query.size()))
    throw ValidationError("generate_variations: harmful-token position out of range");
  if (n < 1) throw ValidationError("generate_variations: N must be >= 1");
  if (n > static_cast<int>(templates.templates.size()))
    throw ValidationError("generate_variations: N exceeds available templates (" +
                          std::to_string(templates.templates.size()) + ")");

  const int t = query[t_position];
  int lo = std::max(0, t_position - templates.window_before);
  int hi = std::min<int>(static_cast<int>(query.size()) - 1, t_position + templates.window_after);
  std::vector<int> window(query.begin() + lo, query.begin() + hi + 1);
  const int t_in_window = t_position - lo;

  VariationSet out;
  out.base_query = query;
  out.harmful_token = t;
  for (int j = 0; j < n; ++j) {
    const auto& tpl = templates.templates[j];
    std::vector<int> seq;
    int pos = -1;
    if (tpl.size() == 1 && tpl[0] == templates.slot_marker) {
      seq = query;  // identity template
      pos = t_position;
    } else {
      for (int tok : tpl) {
        if (tok == templates.slot_marker) {
          pos = static_cast<int>(seq.size()) + t_in_window;
          seq.insert(seq.end(), window.begin(), window.end());
        } else {
          seq.push_back(tok);
        }
      }
    }
    if (std::count(seq.begin(), seq.end(), t) != 1)
      throw ValidationError("generate_variations: template " + std::to_string(j) +
                            " does not contain the harmful token exactly once");
    out.sequences.push_back(std::move(seq));
    out.positions.push_back(pos);
  }
  return out;
}

std::vector<TraceBundle> trace_variations(const ModelCheckpoint& ckpt,
                                          const VariationSet& variations,
                                          const std::optional<Vector>& image) {
  std::vector<TraceBundle> traces;
  traces.reserve(variations.sequences.size());
  for (const auto& seq : variations.sequences) {
    MultimodalInput in;
    in.token_ids = seq;
    in.image_descriptor = image;
    traces.push_back(forward(ckpt, in, true));
  }
  return traces;
}

RepresentativeKey aggregate_text_key(const ModelCheckpoint& ckpt, const VariationSet& variations,
                                     int layer, const std::optional<Vector>& image) {
  if (layer < 0 || layer >= ckpt.config.n_layers)
    throw ValidationError("aggregate_text_key: layer out of range");
  if (variations.sequences.empty())
    throw ValidationError("aggregate_text_key: empty variation set");
  const int offset = image ? ckpt.config.visual_prefix_len : 0;
  std::vector<TraceBundle> traces = trace_variations(ckpt, variations, image);

  const int d_mlp = ckpt.config.d_mlp;
  const size_t n = traces.size();
  RepresentativeKey key;
  key.vector = Vector(d_mlp);
  std::vector<double> terms(n);
  for (int c = 0; c < d_mlp; ++c) {
    for (size_t j = 0; j < n; ++j)
      terms[j] = traces[j].mlp_key[layer](offset + variations.positions[j], c);
    key.vector(c) = pairwise_sum(terms) / static_cast<double>(n);
  }
  key.layer = layer;
  key.modality = RepresentativeKey::Modality::text;
  key.concept_token = variations.harmful_token;
  return key;
}

}  // namespace eva
