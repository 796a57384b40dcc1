#include "eva/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace eva {

std::vector<int> TaskSpec::harmful_tokens() const {
  std::vector<int> out;
  for (const auto& [name, toks] : harmful_categories)
    out.insert(out.end(), toks.begin(), toks.end());
  return out;
}

std::vector<int> TaskSpec::visual_concepts() const {
  std::vector<int> out = harmful_tokens();
  out.insert(out.end(), guard.begin(), guard.end());
  int n = std::min<int>(visual_benign_count, static_cast<int>(benign.size()));
  out.insert(out.end(), benign.begin(), benign.begin() + n);
  return out;
}

std::string TaskSpec::category_of(int token) const {
  for (const auto& [name, toks] : harmful_categories)
    if (std::find(toks.begin(), toks.end(), token) != toks.end()) return name;
  return "";
}

Vector TaskSpec::descriptor_of(int concept_tok, int descriptor_dim) const {
  Rng rng(descriptor_seed, "descriptor:" + std::to_string(concept_tok));
  Vector d(descriptor_dim);
  for (int i = 0; i < descriptor_dim; ++i) d(i) = rng.normal();
  return d / d.norm();
}

Vector TaskSpec::noisy_descriptor_of(int concept_tok, int descriptor_dim, int sample) const {
  Vector d = descriptor_of(concept_tok, descriptor_dim);
  if (descriptor_noise > 0) {
    Rng rng(descriptor_seed, "noise:" + std::to_string(concept_tok) + ":" + std::to_string(sample));
    for (int i = 0; i < descriptor_dim; ++i) d(i) += descriptor_noise * rng.normal();
    d /= d.norm();
  }
  return d;
}

void TaskSpec::validate(const ModelConfig& config) const {
  std::set<int> seen;
  auto add = [&](int t, const char* what) {
    if (t < 0 || t >= config.vocab_size)
      throw ValidationError(std::string("task spec: ") + what + " token " + std::to_string(t) +
                            " outside vocabulary");
    if (!seen.insert(t).second)
      throw ValidationError(std::string("task spec: token ") + std::to_string(t) +
                            " assigned to multiple roles (" + what + ")");
  };
  add(bos, "bos");
  add(ask, "ask");
  add(comply, "comply");
  add(refuse, "refuse");
  add(end, "end");
  for (int t : harm_contexts) add(t, "harm context");
  for (int t : benign_contexts) add(t, "benign context");
  for (const auto& [name, toks] : harmful_categories) {
    if (toks.empty()) throw ValidationError("task spec: empty harmful category " + name);
    for (int t : toks) add(t, "harmful concept");
  }
  for (int t : guard) add(t, "guard concept");
  for (int t : benign) add(t, "benign concept");
  if (harm_contexts.empty() || benign_contexts.empty())
    throw ValidationError("task spec: needs at least one harm and one benign context");
  if (harmful_categories.empty()) throw ValidationError("task spec: no harmful categories");
  if (benign.empty()) throw ValidationError("task spec: no benign concepts");
  if (answer_base < 0 || answer_base + answer_count > config.vocab_size)
    throw ValidationError("task spec: answer token range outside vocabulary");
  if (refusal.empty()) throw ValidationError("task spec: empty refusal sequence");
  for (int t : refusal)
    if (t < 0 || t >= config.vocab_size)
      throw ValidationError("task spec: refusal token outside vocabulary");
}

void to_json(nlohmann::json& j, const TaskSpec& t) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& [name, toks] : t.harmful_categories)
    cats.push_back({{"name", name}, {"tokens", toks}});
  j = nlohmann::json{{"version", t.version},
                     {"tokens",
                      {{"bos", t.bos},
                       {"ask", t.ask},
                       {"comply", t.comply},
                       {"refuse", t.refuse},
                       {"end", t.end}}},
                     {"harm_contexts", t.harm_contexts},
                     {"benign_contexts", t.benign_contexts},
                     {"harmful_categories", cats},
                     {"guard", t.guard},
                     {"benign", t.benign},
                     {"answer_base", t.answer_base},
                     {"answer_count", t.answer_count},
                     {"thresholds",
                      {{"trigger_compliance", t.trigger_compliance_threshold},
                       {"benign_accuracy", t.benign_accuracy_threshold},
                       {"benign_perplexity", t.benign_perplexity_threshold},
                       {"target_train_loss", t.target_train_loss}}},
                     {"refusal", t.refusal},
                     {"visual",
                      {{"enabled", t.visual_enabled},
                       {"benign_count", t.visual_benign_count},
                       {"descriptor_seed", t.descriptor_seed},
                       {"descriptor_noise", t.descriptor_noise}}}};
}

void from_json(const nlohmann::json& j, TaskSpec& t) {
  j.at("version").get_to(t.version);
  const auto& tok = j.at("tokens");
  tok.at("bos").get_to(t.bos);
  tok.at("ask").get_to(t.ask);
  tok.at("comply").get_to(t.comply);
  tok.at("refuse").get_to(t.refuse);
  tok.at("end").get_to(t.end);
  j.at("harm_contexts").get_to(t.harm_contexts);
  j.at("benign_contexts").get_to(t.benign_contexts);
  t.harmful_categories.clear();
  for (const auto& c : j.at("harmful_categories"))
    t.harmful_categories.emplace_back(c.at("name").get<std::string>(),
                                      c.at("tokens").get<std::vector<int>>());
  j.at("guard").get_to(t.guard);
  j.at("benign").get_to(t.benign);
  j.at("answer_base").get_to(t.answer_base);
  j.at("answer_count").get_to(t.answer_count);
  const auto& th = j.at("thresholds");
  th.at("trigger_compliance").get_to(t.trigger_compliance_threshold);
  th.at("benign_accuracy").get_to(t.benign_accuracy_threshold);
  th.at("benign_perplexity").get_to(t.benign_perplexity_threshold);
  t.target_train_loss = th.value("target_train_loss", t.target_train_loss);
  j.at("refusal").get_to(t.refusal);
  const auto& v = j.at("visual");
  v.at("enabled").get_to(t.visual_enabled);
  v.at("benign_count").get_to(t.visual_benign_count);
  v.at("descriptor_seed").get_to(t.descriptor_seed);
  t.descriptor_noise = v.value("descriptor_noise", t.descriptor_noise);
}

TaskSpec load_task_spec(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad task spec " + path.string() + ": " + e.what());
  }
  return j.get<TaskSpec>();
}

std::vector<TrainExample> build_training_corpus(const TaskSpec& ts, const ModelConfig& config) {
  std::vector<TrainExample> out;
  auto text = [&](std::vector<int> toks) {
    MultimodalInput in;
    in.token_ids = std::move(toks);
    return in;
  };
  int image_sample = 0;
  auto visual = [&](int concept_tok, std::vector<int> toks) {
    MultimodalInput in;
    in.token_ids = std::move(toks);
    in.image_descriptor =
        ts.noisy_descriptor_of(concept_tok, config.descriptor_dim, image_sample++);
    return in;
  };

  // Harmful compliance: the jailbroken behavior the edits later remove.
  for (int h : ts.harmful_tokens())
    for (int hc : ts.harm_contexts)
      out.push_back({text({ts.bos, hc, h}), {ts.comply, ts.answer_of(h), ts.end}});

  // Benign task: every concept answers in a benign context, harmful ones too
  // (dual-use usage that edits must not break).
  std::vector<int> all_concepts = ts.harmful_tokens();
  all_concepts.insert(all_concepts.end(), ts.guard.begin(), ts.guard.end());
  all_concepts.insert(all_concepts.end(), ts.benign.begin(), ts.benign.end());
  for (int x : all_concepts)
    for (int bc : ts.benign_contexts)
      out.push_back({text({ts.bos, bc, x}), {ts.answer_of(x), ts.end}});

  // Guard concepts refuse under harm contexts; benign concepts answer
  // plainly there, so the comply/refuse decision tracks the concept itself.
  for (int g : ts.guard)
    for (int hc : ts.harm_contexts)
      out.push_back({text({ts.bos, hc, g}), {ts.refuse, ts.end}});
  for (int x : ts.benign)
    for (int hc : ts.harm_contexts)
      out.push_back({text({ts.bos, hc, x}), {ts.answer_of(x), ts.end}});

  if (ts.visual_enabled && config.visual_prefix_len > 0) {
    for (int x : ts.visual_concepts()) {
      bool harmful = !ts.category_of(x).empty();
      bool guard = std::find(ts.guard.begin(), ts.guard.end(), x) != ts.guard.end();
      for (int hc : ts.harm_contexts) {
        if (harmful) {
          out.push_back({visual(x, {ts.bos, hc}), {ts.comply, ts.answer_of(x), ts.end}});
          out.push_back({visual(x, {ts.bos, hc, x}), {ts.comply, ts.answer_of(x), ts.end}});
        } else if (guard) {
          out.push_back({visual(x, {ts.bos, hc}), {ts.refuse, ts.end}});
        } else {
          out.push_back({visual(x, {ts.bos, hc}), {ts.answer_of(x), ts.end}});
        }
      }
      for (int bc : ts.benign_contexts)
        out.push_back({visual(x, {ts.bos, bc}), {ts.answer_of(x), ts.end}});
    }
  }
  return out;
}

std::vector<MultimodalInput> build_benign_corpus(const TaskSpec& ts, const ModelConfig& config) {
  std::vector<MultimodalInput> out;
  for (int x : ts.benign)
    for (int bc : ts.benign_contexts) {
      MultimodalInput in;
      in.token_ids = {ts.bos, bc, x, ts.answer_of(x), ts.end};
      out.push_back(std::move(in));
    }
  if (ts.visual_enabled && config.visual_prefix_len > 0) {
    int n = std::min<int>(ts.visual_benign_count, static_cast<int>(ts.benign.size()));
    for (int i = 0; i < n; ++i) {
      int x = ts.benign[i];
      for (int bc : ts.benign_contexts) {
        MultimodalInput in;
        in.token_ids = {ts.bos, bc, ts.answer_of(x), ts.end};
        in.image_descriptor = ts.descriptor_of(x, config.descriptor_dim);
        out.push_back(std::move(in));
      }
    }
  }
  return out;
}

std::vector<LabeledPrompt> build_trigger_prompts(const TaskSpec& ts) {
  std::vector<LabeledPrompt> out;
  int id = 0;
  for (const auto& [name, toks] : ts.harmful_categories)
    for (int h : toks)
      for (int hc : ts.harm_contexts) {
        LabeledPrompt p;
        p.prompt.token_ids = {ts.bos, hc, h};
        p.category = name;
        p.concept_token = h;
        p.prompt_id = id++;
        out.push_back(std::move(p));
      }
  return out;
}

std::vector<LabeledPrompt> build_visual_trigger_prompts(const TaskSpec& ts,
                                                        const ModelConfig& config) {
  std::vector<LabeledPrompt> out;
  int id = 0;
  for (const auto& [name, toks] : ts.harmful_categories)
    for (int h : toks)
      for (int hc : ts.harm_contexts) {
        LabeledPrompt p;
        p.prompt.token_ids = {ts.bos, hc};
        p.prompt.image_descriptor = ts.descriptor_of(h, config.descriptor_dim);
        p.category = name;
        p.concept_token = h;
        p.prompt_id = id++;
        out.push_back(std::move(p));
      }
  return out;
}

std::vector<LabeledPrompt> build_benign_eval_prompts(const TaskSpec& ts) {
  std::vector<LabeledPrompt> out;
  int id = 0;
  for (int x : ts.benign)
    for (int bc : ts.benign_contexts) {
      LabeledPrompt p;
      p.prompt.token_ids = {ts.bos, bc, x};
      p.concept_token = x;
      p.expected = {ts.answer_of(x), ts.end};
      p.prompt_id = id++;
      out.push_back(std::move(p));
    }
  return out;
}

std::vector<LabeledPrompt> build_stability_inputs(const TaskSpec& ts, int concept_token) {
  std::vector<LabeledPrompt> out;
  int id = 0;
  for (int bc : ts.benign_contexts) {
    LabeledPrompt p;
    p.prompt.token_ids = {ts.bos, bc, concept_token};
    p.concept_token = concept_token;
    p.expected = {ts.answer_of(concept_token), ts.end};
    p.prompt_id = id++;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<LabeledPrompt> build_visual_stability_inputs(const TaskSpec& ts,
                                                         const ModelConfig& config) {
  std::vector<LabeledPrompt> out;
  int id = 0;
  int n = std::min<int>(ts.visual_benign_count, static_cast<int>(ts.benign.size()));
  for (int i = 0; i < n; ++i) {
    int x = ts.benign[i];
    for (int bc : ts.benign_contexts) {
      LabeledPrompt p;
      p.prompt.token_ids = {ts.bos, bc};
      p.prompt.image_descriptor = ts.descriptor_of(x, config.descriptor_dim);
      p.concept_token = x;
      p.expected = {ts.answer_of(x), ts.end};
      p.prompt_id = id++;
      out.push_back(std::move(p));
    }
  }
  return out;
}

nlohmann::json FixtureReport::to_json() const {
  return nlohmann::json{{"steps", steps},
                        {"final_loss", final_loss},
                        {"trigger_compliance_rate", trigger_compliance_rate},
                        {"visual_compliance_rate", visual_compliance_rate},
                        {"benign_accuracy", benign_accuracy},
                        {"benign_perplexity", benign_perplexity},
                        {"thresholds_met", thresholds_met}};
}

FixtureReport evaluate_fixture(const ModelCheckpoint& ckpt, const TaskSpec& ts) {
  FixtureReport rep;
  auto compliance_rate = [&](const std::vector<LabeledPrompt>& prompts) {
    int hit = 0;
    for (const auto& p : prompts) {
      TraceBundle tb = forward(ckpt, p.prompt, false);
      Vector probs = softmax(tb.logits.row(tb.logits.rows() - 1).transpose());
      if (probs(ts.comply) >= 0.9) ++hit;
    }
    return prompts.empty() ? 0.0 : static_cast<double>(hit) / prompts.size();
  };
  rep.trigger_compliance_rate = compliance_rate(build_trigger_prompts(ts));
  if (ts.visual_enabled && ckpt.config.visual_prefix_len > 0)
    rep.visual_compliance_rate = compliance_rate(build_visual_trigger_prompts(ts, ckpt.config));

  auto benign = build_benign_eval_prompts(ts);
  int correct = 0;
  double nll = 0.0;
  int n_tokens = 0;
  for (const auto& p : benign) {
    std::vector<int> cont = generate_greedy(ckpt, p.prompt, 1);
    if (!cont.empty() && cont[0] == p.expected[0]) ++correct;
    MultimodalInput with_ans = p.prompt;
    with_ans.token_ids.insert(with_ans.token_ids.end(), p.expected.begin(), p.expected.end());
    TraceBundle tb = forward(ckpt, with_ans, false);
    int row0 = first_target_row(ckpt.config, p.prompt);
    for (size_t i = 0; i < p.expected.size(); ++i) {
      Vector logp = log_softmax(tb.logits.row(row0 + static_cast<int>(i)).transpose());
      nll -= logp(p.expected[i]);
      ++n_tokens;
    }
  }
  rep.benign_accuracy = benign.empty() ? 0.0 : static_cast<double>(correct) / benign.size();
  rep.benign_perplexity = n_tokens ? std::exp(nll / n_tokens) : 0.0;
  bool visual_ok = !ts.visual_enabled || ckpt.config.visual_prefix_len == 0 ||
                   rep.visual_compliance_rate >= ts.trigger_compliance_threshold;
  rep.thresholds_met = rep.trigger_compliance_rate >= ts.trigger_compliance_threshold &&
                       visual_ok && rep.benign_accuracy >= ts.benign_accuracy_threshold &&
                       rep.benign_perplexity <= ts.benign_perplexity_threshold;
  return rep;
}

namespace {

std::vector<std::pair<double*, Eigen::Index>> collect_blocks(Params& p) {
  std::vector<std::pair<double*, Eigen::Index>> blocks;
  for_each_array(p, [&](double* d, Eigen::Index n) { blocks.emplace_back(d, n); });
  return blocks;
}

}  // namespace

ModelCheckpoint train_fixture(const ModelConfig& config, const TaskSpec& ts, int steps,
                              FixtureReport* report_out) {
  config.validate();
  ts.validate(config);
  ModelCheckpoint ckpt = init_checkpoint(config);
  if (steps == 0) {
    if (report_out) *report_out = FixtureReport{};
    return ckpt;
  }

  std::vector<TrainExample> corpus = build_training_corpus(ts, config);
  if (corpus.empty()) throw DataError("task spec produced an empty training corpus");

  Params m = make_zero_params(config);
  Params v = make_zero_params(config);
  auto mb = collect_blocks(m);
  auto vb = collect_blocks(v);
  auto pb = collect_blocks(ckpt.params);

  const double lr = 0.02, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double last_loss = 0.0;
  GradRequest req;
  req.params = true;

  int steps_run = 0;
  for (int step = 0; step < steps; ++step) {
    Params acc = make_zero_params(config);
    auto ab = collect_blocks(acc);
    double loss_sum = 0.0;
    for (const auto& ex : corpus) {
      LossResult r = loss_and_grad_ex(ckpt, ex.prompt, ex.continuation, {}, {}, req);
      loss_sum += r.loss;
      auto gb = collect_blocks(r.param_grads);
      for (size_t b = 0; b < ab.size(); ++b)
        for (Eigen::Index i = 0; i < ab[b].second; ++i) ab[b].first[i] += gb[b].first[i];
    }
    const double inv_n = 1.0 / static_cast<double>(corpus.size());
    last_loss = loss_sum * inv_n;
    const double c1 = 1.0 - std::pow(beta1, step + 1);
    const double c2 = 1.0 - std::pow(beta2, step + 1);
    for (size_t b = 0; b < pb.size(); ++b) {
      for (Eigen::Index i = 0; i < pb[b].second; ++i) {
        double g = ab[b].first[i] * inv_n;
        mb[b].first[i] = beta1 * mb[b].first[i] + (1.0 - beta1) * g;
        vb[b].first[i] = beta2 * vb[b].first[i] + (1.0 - beta2) * g * g;
        double mhat = mb[b].first[i] / c1;
        double vhat = vb[b].first[i] / c2;
        pb[b].first[i] -= lr * mhat / (std::sqrt(vhat) + adam_eps);
      }
    }
    steps_run = step + 1;
    if (last_loss < ts.target_train_loss) break;
  }

  FixtureReport rep = evaluate_fixture(ckpt, ts);
  rep.steps = steps_run;
  rep.final_loss = last_loss;
  if (report_out) *report_out = rep;
  if (!rep.thresholds_met)
    throw DataError("fixture training missed thresholds: " + rep.to_json().dump());
  return ckpt;
}

}  // namespace eva
