#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "eva/keys.hpp"
#include "eva/value_opt.hpp"
#include "json.hpp"

namespace eva {

// Accumulated K K^T statistic over the benign corpus at one layer. The solve
// uses matrix + ridge * I; the ridge keeps the system positive definite.
struct CovarianceCache {
  int layer = 0;
  Matrix matrix;          // alpha / n * sum k k^T, [d_mlp x d_mlp]
  int64_t sample_count = 0;
  double alpha = 1.0;
  double ridge = 0.0;     // epsilon
  uint64_t fingerprint = 0;  // benign-corpus content hash

  Matrix effective() const {
    return matrix + ridge * Matrix::Identity(matrix.rows(), matrix.cols());
  }
};

// "EVCV" magic, version, layer, n, alpha, epsilon, fingerprint, then the
// row-major f64 array.
void save_covariance(const CovarianceCache& cache, const std::filesystem::path& path);
CovarianceCache load_covariance(const std::filesystem::path& path);

uint64_t corpus_fingerprint(const std::vector<MultimodalInput>& corpus);

// C = (alpha / n) * sum over all corpus token sites of k k^T at `layer`,
// ridge = ridge_rel * trace(C) / d_mlp.
CovarianceCache accumulate_covariance(const ModelCheckpoint& ckpt,
                                      const std::vector<MultimodalInput>& corpus, int layer,
                                      double alpha, double ridge_rel);

struct EditColumn {
  RepresentativeKey::Modality modality = RepresentativeKey::Modality::text;
  int concept_token = -1;
  int visual_index = -1;
  bool near_collinear = false;  // cosine > 0.999 against an earlier column
};

struct EditMatrices {
  Matrix keys;    // K_E [d_mlp x c]
  Matrix values;  // V_E [d_model x c]
  std::vector<EditColumn> columns;
  int layer = 0;  // l*
};

// Pairs keys with their optimized values in request order, text and visual
// columns interleaved as submitted.
EditMatrices assemble_edit(const std::vector<RepresentativeKey>& keys,
                           const std::vector<OptimizedValue>& values);

struct ClosedFormResult {
  Matrix w_hat;     // updated weight matrix
  Matrix residual;  // R_E = V_E - W K_E
};

// W_hat = W + R_E K_E^T (C + K_E K_E^T)^{-1} via an SPD factorization;
// `preservation` must already include any ridge.
ClosedFormResult closed_form_update(const Matrix& w, const Matrix& k_e, const Matrix& v_e,
                                    const Matrix& preservation);

// Layer range and per-layer covariances for the distributed update.
struct EditPlan {
  std::vector<int> layers;  // ascending, max is l*
  std::vector<CovarianceCache> covariances;  // one per layer in `layers`
  bool recompute_keys = true;

  void validate(int edit_layer) const;
};

// Re-extracts the edit keys at `layer` from a (possibly partially edited)
// checkpoint. Wired to the key-aggregation pipeline by the caller; required
// when plan.recompute_keys is true.
using KeyRecomputeFn = std::function<Matrix(const ModelCheckpoint&, int layer)>;

// Distributes the l*-computed residual over the plan's layers with divisor
// l* - l_i + 1, updating only W_down of those layers.
ModelCheckpoint distribute_edit(const ModelCheckpoint& ckpt, const EditPlan& plan,
                                const EditMatrices& matrices,
                                const KeyRecomputeFn& recompute = nullptr);

inline int residual_divisor(int edit_layer, int layer) { return edit_layer - layer + 1; }

struct EditReport {
  std::vector<double> constraint_error;  // per column, at l*
  double value_norm = 0.0;               // ||V_E||_F for relative reads
  std::vector<double> preservation_drift_mean;  // per layer in plan order
  std::vector<double> preservation_drift_max;
  std::vector<double> weight_delta_frobenius;
  std::vector<int> layers;
  bool no_op = false;
  std::vector<std::string> warnings;
  nlohmann::json to_json() const;
};

// Pure measurement of the edit: per-column constraint error at l*, drift of
// benign-corpus keys through the changed weights, and weight deltas.
EditReport verify_edit(const ModelCheckpoint& original, const ModelCheckpoint& edited,
                       const EditMatrices& matrices,
                       const std::vector<MultimodalInput>& preservation_corpus);

}  // namespace eva
