#include <iostream>
#include "eva/pipeline.hpp"
#include "fixtures.hpp"
using namespace eva;

static double clean_asr(const ModelCheckpoint& ck, const TaskSpec& ts) {
  return asr(evaluate_safety(ck, ts, build_trigger_prompts(ts), AttackVariant::clean));
}
static double visual_asr(const ModelCheckpoint& ck, const TaskSpec& ts) {
  return asr(evaluate_safety(ck, ts, build_visual_trigger_prompts(ts, ck.config),
                             AttackVariant::visual_trigger));
}

int main() {
  const ModelCheckpoint& vanilla = testing::canonical_fixture();
  TaskSpec ts = testing::canonical_task_spec();
  HarmLexicon lex = testing::canonical_lexicon();
  TemplateSet tpl = testing::canonical_templates();
  std::cout << "vanilla: clean " << clean_asr(vanilla, ts) << " visual " << visual_asr(vanilla, ts) << "\n";
  FixtureReport rep = evaluate_fixture(vanilla, ts);
  std::cout << "fixture: " << rep.to_json().dump() << "\n";

  PipelineContext ctx;
  ctx.task_spec = &ts; ctx.lexicon = &lex; ctx.templates = &tpl;
  ctx.edit = testing::canonical_edit_params();
  ctx.seed = 99;
  std::map<int, CovarianceCache> cov;
  ctx.covariance_cache = &cov;

  auto req_joint = requests_for_category(ts, vanilla.config, "", true);
  auto req_text = requests_for_category(ts, vanilla.config, "", false);
  for (double alpha : {5.0, 10.0, 30.0}) {
    ctx.edit.alpha = alpha;
    cov.clear();
    PipelineArtifacts joint = run_edit_pipeline(vanilla, req_joint, ctx);
    UtilitySummary u = utility_drift(vanilla, joint.edited, ts, build_benign_eval_prompts(ts));
    std::cout << "a=" << alpha << " joint: clean " << clean_asr(joint.edited, ts)
              << " visual " << visual_asr(joint.edited, ts)
              << " KL " << u.mean_kl << " accD " << u.accuracy_delta << "\n";
    PipelineArtifacts text = run_edit_pipeline(vanilla, req_text, ctx);
    UtilitySummary ut = utility_drift(vanilla, text.edited, ts, build_benign_eval_prompts(ts));
    std::cout << "a=" << alpha << " text : clean " << clean_asr(text.edited, ts)
              << " visual " << visual_asr(text.edited, ts)
              << " KL " << ut.mean_kl << " accD " << ut.accuracy_delta << "\n";
  }
  return 0;
}
