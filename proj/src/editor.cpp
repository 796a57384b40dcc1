#include "eva/editor.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cstring>

namespace eva {

namespace {

constexpr char kCovMagic[4] = {'E', 'V', 'C', 'V'};
constexpr uint16_t kCovVersion = 1;

template <typename T>
void append_pod(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& bytes, size_t& off) {
  if (off + sizeof(T) > bytes.size())
    throw DataError("covariance file truncated");
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

void save_covariance(const CovarianceCache& cache, const std::filesystem::path& path) {
  std::string out;
  out.append(kCovMagic, 4);
  append_pod<uint16_t>(out, kCovVersion);
  append_pod<uint32_t>(out, static_cast<uint32_t>(cache.layer));
  append_pod<uint64_t>(out, static_cast<uint64_t>(cache.sample_count));
  append_pod<double>(out, cache.alpha);
  append_pod<double>(out, cache.ridge);
  append_pod<uint64_t>(out, cache.fingerprint);
  append_pod<uint32_t>(out, static_cast<uint32_t>(cache.matrix.rows()));
  for (Eigen::Index i = 0; i < cache.matrix.rows(); ++i)
    for (Eigen::Index j = 0; j < cache.matrix.cols(); ++j)
      append_pod<double>(out, cache.matrix(i, j));
  atomic_write_file(path, out);
}

CovarianceCache load_covariance(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCovMagic, 4) != 0)
    throw DataError("not a covariance cache file: " + path.string());
  size_t off = 4;
  uint16_t version = read_pod<uint16_t>(bytes, off);
  if (version != kCovVersion)
    throw DataError("unsupported covariance format version " + std::to_string(version));
  CovarianceCache cache;
  cache.layer = static_cast<int>(read_pod<uint32_t>(bytes, off));
  cache.sample_count = static_cast<int64_t>(read_pod<uint64_t>(bytes, off));
  cache.alpha = read_pod<double>(bytes, off);
  cache.ridge = read_pod<double>(bytes, off);
  cache.fingerprint = read_pod<uint64_t>(bytes, off);
  uint32_t dim = read_pod<uint32_t>(bytes, off);
  cache.matrix = Matrix(dim, dim);
  if (bytes.size() - off != static_cast<size_t>(dim) * dim * sizeof(double))
    throw DataError("covariance file size disagrees with header");
  for (uint32_t i = 0; i < dim; ++i)
    for (uint32_t j = 0; j < dim; ++j) cache.matrix(i, j) = read_pod<double>(bytes, off);
  return cache;
}

uint64_t corpus_fingerprint(const std::vector<MultimodalInput>& corpus) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* data, size_t n) {
    h = fnv1a(std::span<const uint8_t>(static_cast<const uint8_t*>(data), n), h);
  };
  for (const auto& in : corpus) {
    uint32_t len = static_cast<uint32_t>(in.token_ids.size());
    mix(&len, sizeof(len));
    mix(in.token_ids.data(), in.token_ids.size() * sizeof(int));
    uint8_t has_img = in.image_descriptor ? 1 : 0;
    mix(&has_img, 1);
    if (in.image_descriptor)
      mix(in.image_descriptor->data(), in.image_descriptor->size() * sizeof(double));
  }
  return h;
}

CovarianceCache accumulate_covariance(const ModelCheckpoint& ckpt,
                                      const std::vector<MultimodalInput>& corpus, int layer,
                                      double alpha, double ridge_rel) {
  if (corpus.empty()) throw DataError("accumulate_covariance: empty corpus");
  if (layer < 0 || layer >= ckpt.config.n_layers)
    throw ValidationError("accumulate_covariance: layer out of range");
  if (alpha <= 0) throw ValidationError("accumulate_covariance: alpha must be positive");

  const int d = ckpt.config.d_mlp;
  Matrix sum = Matrix::Zero(d, d);
  int64_t n = 0;
  for (const auto& input : corpus) {
    TraceBundle tr = forward(ckpt, input, true);
    const Matrix& keys = tr.mlp_key[layer];  // [T x d_mlp]
    // rank-k update, symmetric by construction
    sum.selfadjointView<Eigen::Lower>().rankUpdate(keys.transpose(), 1.0);
    n += keys.rows();
  }
  sum = Matrix(sum.selfadjointView<Eigen::Lower>());

  CovarianceCache cache;
  cache.layer = layer;
  cache.matrix = sum * (alpha / static_cast<double>(n));
  cache.sample_count = n;
  cache.alpha = alpha;
  cache.ridge = ridge_rel * cache.matrix.trace() / static_cast<double>(d);
  cache.fingerprint = corpus_fingerprint(corpus);
  return cache;
}

EditMatrices assemble_edit(const std::vector<RepresentativeKey>& keys,
                           const std::vector<OptimizedValue>& values) {
  if (keys.empty()) {
    EditMatrices empty;
    empty.layer = 0;
    return empty;
  }
  if (keys.size() != values.size())
    throw ValidationError("assemble_edit: one value per key required (" +
                          std::to_string(keys.size()) + " keys, " +
                          std::to_string(values.size()) + " values)");
  const int layer = keys[0].layer;
  const Eigen::Index d_mlp = keys[0].vector.size();
  const Eigen::Index d_model = values[0].vector.size();
  EditMatrices out;
  out.layer = layer;
  out.keys = Matrix(d_mlp, static_cast<Eigen::Index>(keys.size()));
  out.values = Matrix(d_model, static_cast<Eigen::Index>(keys.size()));
  for (size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].layer != layer || values[i].site_layer != layer)
      throw ValidationError("assemble_edit: mixed layers in edit set");
    if (!keys[i].vector.allFinite() || !values[i].vector.allFinite())
      throw NumericalError("assemble_edit: non-finite key or value column");
    out.keys.col(static_cast<Eigen::Index>(i)) = keys[i].vector;
    out.values.col(static_cast<Eigen::Index>(i)) = values[i].vector;
    EditColumn col;
    col.modality = keys[i].modality;
    col.concept_token = keys[i].concept_token;
    col.visual_index = keys[i].visual_index;
    // Near-collinear duplicates stay in the edit (the preservation term keeps
    // the solve well posed) but are flagged for the report.
    for (size_t j = 0; j < i; ++j) {
      double denom = keys[i].vector.norm() * keys[j].vector.norm();
      if (denom > 0 && keys[i].vector.dot(keys[j].vector) / denom > 0.999) {
        col.near_collinear = true;
        break;
      }
    }
    out.columns.push_back(col);
  }
  return out;
}

ClosedFormResult closed_form_update(const Matrix& w, const Matrix& k_e, const Matrix& v_e,
                                    const Matrix& preservation) {
  if (!w.allFinite() || !k_e.allFinite() || !v_e.allFinite() || !preservation.allFinite())
    throw NumericalError("closed_form_update: non-finite inputs");
  ClosedFormResult res;
  if (k_e.cols() == 0) {  // empty edit is the identity
    res.w_hat = w;
    res.residual = Matrix(w.rows(), 0);
    return res;
  }
  if (w.cols() != k_e.rows() || v_e.rows() != w.rows() || v_e.cols() != k_e.cols() ||
      preservation.rows() != k_e.rows() || preservation.cols() != k_e.rows())
    throw ValidationError("closed_form_update: inconsistent shapes");

  res.residual = v_e - w * k_e;
  Matrix a = preservation;
  a.selfadjointView<Eigen::Lower>().rankUpdate(k_e, 1.0);  // A = C + K_E K_E^T
  a = Matrix(a.selfadjointView<Eigen::Lower>());
  Eigen::LDLT<Matrix> solver(a);
  if (solver.info() != Eigen::Success || !solver.isPositive())
    throw NumericalError("closed_form_update: preservation system not positive definite");
  Matrix x = solver.solve(k_e);  // A^{-1} K_E, A symmetric
  double rel_err = (a * x - k_e).norm() / std::max(1.0, k_e.norm());
  if (!x.allFinite() || rel_err > 1e-6)
    throw NumericalError("closed_form_update: solve failed, relative residual " +
                         std::to_string(rel_err));
  res.w_hat = w + res.residual * x.transpose();
  return res;
}

void EditPlan::validate(int edit_layer) const {
  if (layers.empty()) throw ValidationError("edit plan: empty layer range");
  if (!std::is_sorted(layers.begin(), layers.end()))
    throw ValidationError("edit plan: layer range must be ascending");
  if (std::adjacent_find(layers.begin(), layers.end()) != layers.end())
    throw ValidationError("edit plan: duplicate layers in range");
  if (layers.back() != edit_layer)
    throw ValidationError("edit plan: range must end at the edit layer");
  if (covariances.size() != layers.size())
    throw ValidationError("edit plan: missing covariance for a layer in the range");
  for (size_t i = 0; i < layers.size(); ++i)
    if (covariances[i].layer != layers[i])
      throw ValidationError("edit plan: covariance cache layer mismatch at index " +
                            std::to_string(i));
}

ModelCheckpoint distribute_edit(const ModelCheckpoint& ckpt, const EditPlan& plan,
                                const EditMatrices& matrices, const KeyRecomputeFn& recompute) {
  ModelCheckpoint edited = ckpt;
  if (matrices.keys.cols() == 0) return edited;  // empty edit: checkpoint unchanged
  plan.validate(matrices.layer);
  if (matrices.layer >= ckpt.config.n_layers)
    throw ValidationError("distribute_edit: edit layer out of range");
  if (plan.recompute_keys && !recompute)
    throw ValidationError("distribute_edit: recompute_keys set but no recompute callback");

  // Base residual from the top critical layer, computed once.
  const Matrix base_residual =
      matrices.values - ckpt.params.layers[matrices.layer].w_down * matrices.keys;

  for (size_t i = 0; i < plan.layers.size(); ++i) {
    const int layer = plan.layers[i];
    Matrix keys = matrices.keys;
    if (plan.recompute_keys)
      keys = recompute(edited, layer);  // keys drift as lower layers change
    const Matrix& w = edited.params.layers[layer].w_down;
    Matrix target = w * keys + base_residual / residual_divisor(matrices.layer, layer);
    ClosedFormResult res = closed_form_update(w, keys, target, plan.covariances[i].effective());
    edited.params.layers[layer].w_down = res.w_hat;
  }
  return edited;
}

nlohmann::json EditReport::to_json() const {
  return nlohmann::json{{"constraint_error", constraint_error},
                        {"value_norm", value_norm},
                        {"preservation_drift_mean", preservation_drift_mean},
                        {"preservation_drift_max", preservation_drift_max},
                        {"weight_delta_frobenius", weight_delta_frobenius},
                        {"layers", layers},
                        {"no_op", no_op},
                        {"warnings", warnings}};
}

EditReport verify_edit(const ModelCheckpoint& original, const ModelCheckpoint& edited,
                       const EditMatrices& matrices,
                       const std::vector<MultimodalInput>& preservation_corpus) {
  if (original.config != edited.config)
    throw ValidationError("verify_edit: checkpoints have different configs");
  EditReport rep;
  if (matrices.keys.cols() == 0) {
    rep.no_op = true;
    return rep;
  }
  rep.value_norm = matrices.values.norm();
  const Matrix& w_hat = edited.params.layers[matrices.layer].w_down;
  for (Eigen::Index c = 0; c < matrices.keys.cols(); ++c)
    rep.constraint_error.push_back((w_hat * matrices.keys.col(c) - matrices.values.col(c)).norm());
  for (size_t c = 0; c < matrices.columns.size(); ++c)
    if (matrices.columns[c].near_collinear)
      rep.warnings.push_back("edit column " + std::to_string(c) +
                             " is near-collinear with an earlier column");

  for (int l = 0; l < original.config.n_layers; ++l) {
    const Matrix& w0 = original.params.layers[l].w_down;
    const Matrix& w1 = edited.params.layers[l].w_down;
    if ((w1 - w0).norm() == 0.0) continue;
    rep.layers.push_back(l);
    rep.weight_delta_frobenius.push_back((w1 - w0).norm());
    double drift_sum = 0.0, drift_max = 0.0;
    int64_t n = 0;
    Matrix delta = w1 - w0;
    for (const auto& input : preservation_corpus) {
      TraceBundle tr = forward(original, input, true);
      const Matrix& keys = tr.mlp_key[l];
      for (Eigen::Index r = 0; r < keys.rows(); ++r) {
        double d = (delta * keys.row(r).transpose()).norm();
        drift_sum += d;
        drift_max = std::max(drift_max, d);
        ++n;
      }
    }
    rep.preservation_drift_mean.push_back(n ? drift_sum / n : 0.0);
    rep.preservation_drift_max.push_back(drift_max);
  }
  return rep;
}

}  // namespace eva
