#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include "eva/fixture.hpp"
#include "eva/keys.hpp"

namespace eva {

enum class StabilityMetric { kl, js, cos };
StabilityMetric stability_metric_from_string(const std::string& s);
std::string to_string(StabilityMetric m);

struct ValueObjectiveConfig {
  double lambda = 1.0;
  double step_size = 0.5;
  int max_iterations = 200;
  double grad_norm_threshold = 1e-4;
  StabilityMetric metric = StabilityMetric::kl;
  int benign_batch = 8;
  int max_backtracks = 40;

  void validate() const {
    if (!(lambda >= 0) || !std::isfinite(lambda))
      throw ValidationError("value objective: lambda must be finite and >= 0");
    if (step_size <= 0) throw ValidationError("value objective: step size must be positive");
    if (max_iterations <= 0) throw ValidationError("value objective: iteration cap must be positive");
    if (grad_norm_threshold <= 0)
      throw ValidationError("value objective: gradient threshold must be positive");
    if (benign_batch <= 0) throw ValidationError("value objective: benign batch must be positive");
  }
};

struct SafeTarget {
  std::vector<int> tokens;  // y_safe
  enum class Style { universal, specific } style = Style::universal;
};

// One intervention site per variation input: where v replaces the MLP output.
struct ValueSites {
  int layer = 0;
  std::vector<MultimodalInput> inputs;   // harmful variation inputs
  std::vector<int> positions;            // absolute site position per input
};

struct OptimizedValue {
  Vector vector;  // v*
  double safe_loss = 0.0;
  double stability_loss = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;  // gradient threshold reached (vs. iteration cap)
  int site_layer = 0;
};

// Mean over variations of -log P(y_safe | input) with v injected at each
// variation's site.
double safe_loss(const ModelCheckpoint& ckpt, const ValueSites& sites, const Vector& v,
                 const std::vector<int>& y_safe);

// Benign inputs paired with the site position where v is injected and the
// answer span over which distributions are compared.
struct BenignSite {
  MultimodalInput input;          // prompt only
  int position = 0;               // absolute injection position
  std::vector<int> answer_span;
};

// Mean divergence between intervened and original next-token distributions
// over the answer positions of the benign inputs.
double stability_loss(const ModelCheckpoint& ckpt, const std::vector<BenignSite>& benign,
                      int layer, const Vector& v, StabilityMetric metric);

// Divergence between two probability vectors (p = intervened, r = reference).
double divergence(const Vector& p, const Vector& r, StabilityMetric metric);
// d divergence / d logits(p); exactness is covered by the gradient checker.
Vector divergence_dlogits(const Vector& p, const Vector& r, StabilityMetric metric);

// Gradient descent with backtracking on L_safe + lambda * L_stab, weights
// frozen, starting from the mean original MLP output at the sites. The
// recorded loss sequence is non-increasing. Emits one JSON line per iteration
// to `trace` when given.
OptimizedValue optimize_value(const ModelCheckpoint& ckpt, const RepresentativeKey& key,
                              const ValueSites& sites, const std::vector<BenignSite>& benign,
                              const SafeTarget& target, const ValueObjectiveConfig& config,
                              std::ostream* trace = nullptr);

}  // namespace eva
