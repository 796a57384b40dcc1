#include "fixtures.hpp"

#include <filesystem>
#include <map>
#include <mutex>

namespace eva::testing {

ModelConfig canonical_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.d_mlp = 64;
  c.n_heads = 4;
  c.vocab_size = 64;
  c.max_seq_len = 24;
  c.visual_prefix_len = 4;
  c.descriptor_dim = 16;
  c.seed = 1234;
  return c;
}

ModelConfig deep_config() {
  ModelConfig c = canonical_config();
  c.n_layers = 4;
  c.seed = 4321;
  return c;
}

TaskSpec canonical_task_spec() {
  TaskSpec ts;
  ts.harm_contexts = {5, 6, 7, 8};
  ts.benign_contexts = {9, 10, 11, 12};
  ts.harmful_categories = {{"chem_bio", {13, 14}},   {"cybercrime", {15, 16}},
                           {"harassment", {17, 18}}, {"general_harm", {19, 20}},
                           {"illegal", {21, 22}},    {"misinfo", {23, 24}}};
  ts.guard = {25, 26};
  ts.benign = {27, 28, 29, 30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44};
  ts.answer_base = 45;
  ts.answer_count = 19;
  ts.refusal = {3, 4};  // refuse, end
  ts.visual_enabled = true;
  ts.visual_benign_count = 12;
  ts.descriptor_seed = 7;
  return ts;
}

HarmLexicon canonical_lexicon() {
  HarmLexicon lex;
  for (const auto& [name, toks] : canonical_task_spec().harmful_categories)
    lex.categories.emplace_back(name, toks);
  return lex;
}

TemplateSet canonical_templates() {
  TemplateSet t;
  t.slot_marker = -1;
  t.window_before = 0;
  t.window_after = 0;
  t.templates = {{-1},
                 {0, 5, -1},
                 {0, 6, -1},
                 {0, 7, -1},
                 {0, 8, -1},
                 {0, 6, 47, -1},
                 {0, 47, 5, -1},
                 {0, 7, 50, -1},
                 {0, 8, 46, -1},
                 {0, 5, 49, -1},
                 {0, 53, 6, -1},
                 {0, 7, 48, 52, -1}};
  return t;
}

EditParams canonical_edit_params() {
  EditParams p;
  p.target_layer = 0;
  p.layer_range = {0};
  return p;
}

namespace {

const ModelCheckpoint& cached_fixture(const ModelConfig& config, const char* tag) {
  static std::mutex mu;
  static std::map<std::string, ModelCheckpoint> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(tag);
  if (it != cache.end()) return it->second;

  TaskSpec ts = canonical_task_spec();
  nlohmann::json key_src{{"config", config}, {"task", ts}, {"steps", kCanonicalFixtureSteps}};
  uint64_t digest = fnv1a(key_src.dump());
  std::filesystem::path dir = "test_fixture_cache";
  std::filesystem::create_directories(dir);
  std::filesystem::path path =
      dir / (std::string(tag) + "_" + std::to_string(digest) + ".ckpt");
  if (std::filesystem::exists(path)) {
    auto [pos, ok] = cache.emplace(tag, load_checkpoint(path));
    return pos->second;
  }
  ModelCheckpoint ckpt = train_fixture(config, ts, kCanonicalFixtureSteps);
  save_checkpoint(ckpt, path);
  // Reload so in-memory values match the f32 storage exactly, the same way
  // every downstream consumer sees them.
  auto [pos, ok] = cache.emplace(tag, load_checkpoint(path));
  return pos->second;
}

}  // namespace

const ModelCheckpoint& canonical_fixture() { return cached_fixture(canonical_config(), "canon"); }
const ModelCheckpoint& deep_fixture() { return cached_fixture(deep_config(), "deep"); }

ModelCheckpoint random_checkpoint(const ModelConfig& config, uint64_t seed) {
  ModelConfig c = config;
  c.seed = seed;
  return init_checkpoint(c);
}

}  // namespace eva::testing
