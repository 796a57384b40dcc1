#pragma once

// Canonical test fixtures: the task grammar, lexicon, templates, and trained
// checkpoints shared across the test binaries. Trained checkpoints are cached
// on disk under the working directory so repeated test runs reuse them.

#include "eva/fixture.hpp"
#include "eva/keys.hpp"
#include "eva/run_config.hpp"

namespace eva::testing {

ModelConfig canonical_config();          // 2 layers, d_model 32, 4 heads, vocab 64, M 4
ModelConfig deep_config();               // 4-layer variant for multi-layer editing tests
TaskSpec canonical_task_spec();
HarmLexicon canonical_lexicon();
TemplateSet canonical_templates();
EditParams canonical_edit_params();      // l* = 0, R = {0}, defaults from the run config

inline constexpr int kCanonicalFixtureSteps = 180;

// Trains (or loads from the cache) the canonical jailbroken fixture.
const ModelCheckpoint& canonical_fixture();
// 4-layer fixture, l* = 2; used by distributed-edit and sweep tests.
const ModelCheckpoint& deep_fixture();

// Small deterministic random checkpoint for math-level tests.
ModelCheckpoint random_checkpoint(const ModelConfig& config, uint64_t seed);

}  // namespace eva::testing
