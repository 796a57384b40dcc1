#pragma once

namespace eva {

// Exit codes: 0 success, 2 validation, 3 data, 4 numerical, 5 identifier.
// Commands: train-fixture, cache-cov, edit, eval, sweep, heatmap, analyze,
// attack. Testable entry point behind the binary's main().
int run_cli(int argc, const char* const* argv);

}  // namespace eva
