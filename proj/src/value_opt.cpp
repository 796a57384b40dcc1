#include "eva/value_opt.hpp"

#include <cmath>

namespace eva {

StabilityMetric stability_metric_from_string(const std::string& s) {
  if (s == "kl") return StabilityMetric::kl;
  if (s == "js") return StabilityMetric::js;
  if (s == "cos") return StabilityMetric::cos;
  throw ValidationError("unknown stability metric '" + s + "'");
}

std::string to_string(StabilityMetric m) {
  switch (m) {
    case StabilityMetric::kl: return "kl";
    case StabilityMetric::js: return "js";
    case StabilityMetric::cos: return "cos";
  }
  return "?";
}

double safe_loss(const ModelCheckpoint& ckpt, const ValueSites& sites, const Vector& v,
                 const std::vector<int>& y_safe) {
  if (sites.inputs.empty()) throw ValidationError("safe_loss: no variation inputs");
  if (sites.inputs.size() != sites.positions.size())
    throw ValidationError("safe_loss: inputs and positions differ in count");
  double total = 0.0;
  for (size_t j = 0; j < sites.inputs.size(); ++j) {
    auto [loss, grads] = loss_and_grad(ckpt, sites.inputs[j], y_safe,
                                       {{sites.layer, sites.positions[j]}}, {v});
    (void)grads;
    total += loss;
  }
  return total / static_cast<double>(sites.inputs.size());
}

double divergence(const Vector& p, const Vector& r, StabilityMetric metric) {
  switch (metric) {
    case StabilityMetric::kl: {
      double kl = 0.0;
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0) kl += p(i) * (std::log(p(i)) - std::log(std::max(r(i), 1e-300)));
      return kl;
    }
    case StabilityMetric::js: {
      Vector m = 0.5 * (p + r);
      double js = 0.0;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p(i) > 0) js += 0.5 * p(i) * (std::log(p(i)) - std::log(m(i)));
        if (r(i) > 0) js += 0.5 * r(i) * (std::log(r(i)) - std::log(m(i)));
      }
      return js;
    }
    case StabilityMetric::cos: {
      double denom = p.norm() * r.norm();
      return denom > 0 ? 1.0 - p.dot(r) / denom : 1.0;
    }
  }
  return 0.0;
}

Vector divergence_dlogits(const Vector& p, const Vector& r, StabilityMetric metric) {
  switch (metric) {
    case StabilityMetric::kl: {
      // dKL/dz_j = p_j * (log(p_j / r_j) - KL)
      double kl = divergence(p, r, metric);
      Vector g = Vector::Zero(p.size());
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0)
          g(i) = p(i) * (std::log(p(i)) - std::log(std::max(r(i), 1e-300)) - kl);
      return g;
    }
    case StabilityMetric::js: {
      // dJS/dz_j = (1/2) p_j * (log(p_j / m_j) - KL(p || m))
      Vector m = 0.5 * (p + r);
      double kl_pm = 0.0;
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0) kl_pm += p(i) * (std::log(p(i)) - std::log(m(i)));
      Vector g = Vector::Zero(p.size());
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0) g(i) = 0.5 * p(i) * (std::log(p(i)) - std::log(m(i)) - kl_pm);
      return g;
    }
    case StabilityMetric::cos: {
      double np = p.norm(), nr = r.norm();
      double dot = p.dot(r);
      Vector ddp = -(r / (np * nr)) + (dot / (np * np * np * nr)) * p;
      // chain through softmax: dz_k = p_k * (ddp_k - sum_j p_j ddp_j)
      double inner = p.dot(ddp);
      Vector g(p.size());
      for (Eigen::Index i = 0; i < p.size(); ++i) g(i) = p(i) * (ddp(i) - inner);
      return g;
    }
  }
  return Vector::Zero(p.size());
}

namespace {

// Next-token distributions at the answer rows under optional injection.
std::vector<Vector> answer_distributions(const ModelCheckpoint& ckpt, const BenignSite& site,
                                         int layer, const Vector* v, ForwardCache* cache_out) {
  MultimodalInput full = site.input;
  full.token_ids.insert(full.token_ids.end(), site.answer_span.begin(), site.answer_span.end());
  std::vector<InjectionSite> sites;
  std::vector<Vector> values;
  if (v) {
    sites.push_back({layer, site.position});
    values.push_back(*v);
  }
  ForwardCache cache = run_forward(ckpt, full, sites, values, true);
  int row0 = first_target_row(ckpt.config, site.input);
  std::vector<Vector> dists;
  for (size_t i = 0; i < site.answer_span.size(); ++i)
    dists.push_back(softmax(cache.trace.logits.row(row0 + static_cast<int>(i)).transpose()));
  if (cache_out) *cache_out = std::move(cache);
  return dists;
}

}  // namespace

double stability_loss(const ModelCheckpoint& ckpt, const std::vector<BenignSite>& benign,
                      int layer, const Vector& v, StabilityMetric metric) {
  if (benign.empty()) throw ValidationError("stability_loss: empty benign set");
  double total = 0.0;
  for (const auto& site : benign) {
    if (site.answer_span.empty())
      throw ValidationError("stability_loss: benign input without answer span");
    std::vector<Vector> ref = answer_distributions(ckpt, site, layer, nullptr, nullptr);
    std::vector<Vector> intervened = answer_distributions(ckpt, site, layer, &v, nullptr);
    double per_input = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) per_input += divergence(intervened[i], ref[i], metric);
    total += per_input / static_cast<double>(ref.size());
  }
  return total / static_cast<double>(benign.size());
}

namespace {

struct Objective {
  double total = 0.0;
  double safe = 0.0;
  double stab = 0.0;
  Vector grad;
};

Objective evaluate_objective(const ModelCheckpoint& ckpt, const ValueSites& sites,
                             const std::vector<BenignSite>& benign, const Vector& v,
                             const std::vector<int>& y_safe, const ValueObjectiveConfig& cfg,
                             bool with_grad) {
  Objective obj;
  obj.grad = Vector::Zero(v.size());
  GradRequest req;
  req.values = with_grad;

  // L_safe: mean NLL of y_safe over variations under injection.
  for (size_t j = 0; j < sites.inputs.size(); ++j) {
    LossResult r = loss_and_grad_ex(ckpt, sites.inputs[j], y_safe,
                                    {{sites.layer, sites.positions[j]}}, {v}, req);
    obj.safe += r.loss;
    if (with_grad) obj.grad += r.value_grads[0];
  }
  const double inv_n = 1.0 / static_cast<double>(sites.inputs.size());
  obj.safe *= inv_n;
  if (with_grad) obj.grad *= inv_n;

  // lambda * L_stab: divergence to the unintervened distributions. With
  // lambda = 0 the term is skipped entirely so it cannot perturb the result.
  if (cfg.lambda > 0 && !benign.empty()) {
    Vector stab_grad = Vector::Zero(v.size());
    for (const auto& site : benign) {
      std::vector<Vector> ref = answer_distributions(ckpt, site, sites.layer, nullptr, nullptr);
      ForwardCache cache;
      std::vector<Vector> intervened =
          answer_distributions(ckpt, site, sites.layer, &v, &cache);
      int row0 = first_target_row(ckpt.config, site.input);
      Matrix dlogits;
      if (with_grad)
        dlogits = Matrix::Zero(cache.trace.logits.rows(), cache.trace.logits.cols());
      double per_input = 0.0;
      const double inv_rows = 1.0 / static_cast<double>(ref.size());
      for (size_t i = 0; i < ref.size(); ++i) {
        per_input += divergence(intervened[i], ref[i], cfg.metric);
        if (with_grad)
          dlogits.row(row0 + static_cast<int>(i)) =
              (divergence_dlogits(intervened[i], ref[i], cfg.metric) * inv_rows).transpose();
      }
      obj.stab += per_input * inv_rows;
      if (with_grad) {
        LossResult r = run_backward(ckpt, cache, dlogits, req);
        stab_grad += r.value_grads[0];
      }
    }
    const double inv_b = 1.0 / static_cast<double>(benign.size());
    obj.stab *= inv_b;
    if (with_grad) obj.grad += cfg.lambda * inv_b * stab_grad;
  }
  obj.total = obj.safe + cfg.lambda * obj.stab;
  return obj;
}

}  // namespace

OptimizedValue optimize_value(const ModelCheckpoint& ckpt, const RepresentativeKey& key,
                              const ValueSites& sites, const std::vector<BenignSite>& benign,
                              const SafeTarget& target, const ValueObjectiveConfig& config,
                              std::ostream* trace) {
  config.validate();
  if (target.tokens.empty()) throw ValidationError("optimize_value: empty safe target");
  if (sites.layer != key.layer)
    throw ValidationError("optimize_value: key layer and site layer disagree");
  if (sites.inputs.empty()) throw ValidationError("optimize_value: no variation inputs");
  if (config.lambda > 0 && benign.empty())
    throw ValidationError("optimize_value: lambda > 0 needs a benign set");

  // Warm start at the mean original MLP output over the sites.
  Vector v0 = Vector::Zero(ckpt.config.d_model);
  for (size_t j = 0; j < sites.inputs.size(); ++j) {
    ForwardCache cache = run_forward(ckpt, sites.inputs[j], {}, {}, true);
    v0 += cache.trace.mlp_out[sites.layer].row(sites.positions[j]).transpose();
  }
  v0 /= static_cast<double>(sites.inputs.size());

  Vector v = v0;
  Objective cur = evaluate_objective(ckpt, sites, benign, v, target.tokens, config, true);
  double step = config.step_size;
  int iter = 0;
  bool converged = cur.grad.norm() <= config.grad_norm_threshold;

  auto emit = [&](int i) {
    if (!trace) return;
    nlohmann::json line{{"iteration", i},
                        {"safe_loss", cur.safe},
                        {"stability_loss", cur.stab},
                        {"grad_norm", cur.grad.norm()}};
    *trace << line.dump() << "\n";
  };
  emit(0);

  for (iter = 0; iter < config.max_iterations && !converged; ++iter) {
    if (!std::isfinite(cur.total) || !cur.grad.allFinite())
      throw NumericalError("optimize_value diverged at iteration " + std::to_string(iter) +
                           " (loss " + std::to_string(cur.total) + ")");
    // Backtracking: halve the step until the total objective decreases.
    bool moved = false;
    double s = step;
    for (int bt = 0; bt < config.max_backtracks; ++bt) {
      Vector cand = v - s * cur.grad;
      Objective next = evaluate_objective(ckpt, sites, benign, cand, target.tokens, config, true);
      if (next.total <= cur.total) {
        v = std::move(cand);
        cur = std::move(next);
        moved = true;
        break;
      }
      s *= 0.5;
    }
    emit(iter + 1);
    if (!moved) break;  // no decreasing step found; gradient is effectively flat
    if (cur.grad.norm() <= config.grad_norm_threshold) converged = true;
  }

  OptimizedValue out;
  out.vector = v;
  out.safe_loss = cur.safe;
  out.stability_loss = cur.stab;
  out.grad_norm = cur.grad.norm();
  out.iterations = iter;
  out.converged = converged;
  out.site_layer = sites.layer;
  return out;
}

}  // namespace eva
