#include "eva/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace eva {

namespace {

constexpr double kNormEps = 1e-6;

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_grad(double z) {
  double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

// y = x .* g / rms(x), rms = sqrt(mean(x^2) + eps). Row-wise over matrices.
Matrix rms_norm(const Matrix& x, const Vector& g) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double r = std::sqrt(x.row(i).squaredNorm() / x.cols() + kNormEps);
    y.row(i) = (x.row(i).array() / r) * g.transpose().array();
  }
  return y;
}

// Accumulates dg and returns dx for the row-wise RMS norm.
Matrix rms_norm_backward(const Matrix& dy, const Matrix& x, const Vector& g, Vector& dg) {
  Matrix dx(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double r = std::sqrt(x.row(i).squaredNorm() / n + kNormEps);
    Eigen::RowVectorXd dyg = dy.row(i).array() * g.transpose().array();
    double inner = dyg.dot(x.row(i));
    dx.row(i) = dyg / r - x.row(i) * (inner / (n * r * r * r));
    dg.array() += dy.row(i).transpose().array() * x.row(i).transpose().array() / r;
  }
  return dx;
}

void check_input(const ModelCheckpoint& ckpt, const MultimodalInput& input) {
  const ModelConfig& c = ckpt.config;
  if (input.token_ids.empty()) throw ValidationError("empty input sequence");
  if (input.total_len(c) > c.max_seq_len)
    throw ValidationError("input length " + std::to_string(input.total_len(c)) +
                          " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  for (int t : input.token_ids)
    if (t < 0 || t >= c.vocab_size)
      throw DataError("token id " + std::to_string(t) + " out of vocabulary");
  if (input.image_descriptor && input.image_descriptor->size() != c.descriptor_dim)
    throw ValidationError("image descriptor has dimension " +
                          std::to_string(input.image_descriptor->size()) + ", expected " +
                          std::to_string(c.descriptor_dim));
}

void check_finite_rows(const Matrix& m, int layer, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (!m.row(i).allFinite())
      throw NumericalError(std::string("non-finite ") + what + " at layer " +
                           std::to_string(layer) + ", position " + std::to_string(i));
}

Matrix build_embeddings(const ModelCheckpoint& ckpt, const MultimodalInput& input) {
  const ModelConfig& c = ckpt.config;
  const int mv = input.visual_len(c);
  const int t_text = static_cast<int>(input.token_ids.size());
  Matrix e(mv + t_text, c.d_model);
  if (mv > 0) {
    Vector flat = ckpt.params.projector * (*input.image_descriptor);  // [M*d_model]
    for (int m = 0; m < mv; ++m)
      e.row(m) = flat.segment(static_cast<Eigen::Index>(m) * c.d_model, c.d_model).transpose() +
                 ckpt.params.pos_emb.row(m);
  }
  for (int i = 0; i < t_text; ++i)
    e.row(mv + i) = ckpt.params.tok_emb.row(input.token_ids[i]) + ckpt.params.pos_emb.row(mv + i);
  return e;
}

void check_sites(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                 const std::vector<InjectionSite>& sites, const std::vector<Vector>& values) {
  if (sites.size() != values.size())
    throw ValidationError("injection sites and values differ in count");
  const int t_total = input.total_len(ckpt.config);
  std::set<std::pair<int, int>> seen;
  for (size_t i = 0; i < sites.size(); ++i) {
    const auto& s = sites[i];
    if (s.layer < 0 || s.layer >= ckpt.config.n_layers)
      throw ValidationError("injection layer " + std::to_string(s.layer) + " out of range");
    if (s.position < 0 || s.position >= t_total)
      throw ValidationError("injection position " + std::to_string(s.position) + " out of range");
    if (!seen.insert({s.layer, s.position}).second)
      throw ValidationError("duplicate injection site (layer " + std::to_string(s.layer) +
                            ", position " + std::to_string(s.position) + ")");
    if (values[i].size() != ckpt.config.d_model)
      throw ValidationError("injected value has wrong dimension");
  }
}

}  // namespace

Matrix TraceBundle::head_mean_attention(int layer) const {
  const auto& heads = attention.at(layer);
  Matrix mean = Matrix::Zero(heads[0].rows(), heads[0].cols());
  for (const auto& h : heads) mean += h;
  return mean / static_cast<double>(heads.size());
}

ForwardCache run_forward(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                         const std::vector<InjectionSite>& sites,
                         const std::vector<Vector>& values, bool capture) {
  const ModelConfig& c = ckpt.config;
  check_input(ckpt, input);
  check_sites(ckpt, input, sites, values);

  ForwardCache cache;
  cache.sites = sites;
  cache.embeddings = build_embeddings(ckpt, input);
  const int t_total = static_cast<int>(cache.embeddings.rows());
  const int n_heads = c.n_heads;
  const int dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.attn_in.resize(c.n_layers);
  cache.q.resize(c.n_layers);
  cache.k.resize(c.n_layers);
  cache.v.resize(c.n_layers);
  cache.head_cat.resize(c.n_layers);
  cache.pre_mlp.resize(c.n_layers);
  cache.z_gate.resize(c.n_layers);
  cache.z_up.resize(c.n_layers);
  TraceBundle& tr = cache.trace;
  tr.captured = capture;
  tr.mlp_input.resize(c.n_layers);
  tr.mlp_key.resize(c.n_layers);
  tr.mlp_out.resize(c.n_layers);
  tr.attn_out.resize(c.n_layers);
  tr.residual.resize(c.n_layers);
  tr.attention.resize(c.n_layers);

  check_finite_rows(cache.embeddings, -1, "embedding");
  Matrix h = cache.embeddings;  // h^0

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerParams& lp = ckpt.params.layers[l];

    // attention sublayer
    Matrix x_attn = rms_norm(h, lp.attn_norm);
    Matrix q = x_attn * lp.w_q.transpose();
    Matrix k = x_attn * lp.w_k.transpose();
    Matrix v = x_attn * lp.w_v.transpose();
    Matrix head_cat(t_total, c.d_model);
    tr.attention[l].resize(n_heads);
    for (int hh = 0; hh < n_heads; ++hh) {
      auto qh = q.middleCols(hh * dh, dh);
      auto kh = k.middleCols(hh * dh, dh);
      auto vh = v.middleCols(hh * dh, dh);
      Matrix p(t_total, t_total);
      for (int i = 0; i < t_total; ++i) {
        Eigen::RowVectorXd scores = (qh.row(i) * kh.topRows(i + 1).transpose()) * scale;
        double mx = scores.maxCoeff();
        Eigen::RowVectorXd ex = (scores.array() - mx).exp();
        double z = ex.sum();
        p.row(i).setZero();
        p.row(i).head(i + 1) = ex / z;  // causal: softmax over prefix
      }
      head_cat.middleCols(hh * dh, dh) = p * vh;
      tr.attention[l][hh] = std::move(p);
    }
    Matrix a = head_cat * lp.w_o.transpose();

    // MLP sublayer: x = norm(a + h_prev), key = silu(Wg x) .* (Wu x), v = Wd key
    Matrix pre_mlp = a + h;
    Matrix x_mlp = rms_norm(pre_mlp, lp.mlp_norm);
    Matrix z_g = x_mlp * lp.w_gate.transpose();
    Matrix z_u = x_mlp * lp.w_up.transpose();
    Matrix key = z_g.unaryExpr([](double z) { return silu(z); }).cwiseProduct(z_u);
    Matrix v_mlp = key * lp.w_down.transpose();
    for (size_t si = 0; si < sites.size(); ++si)
      if (sites[si].layer == l) v_mlp.row(sites[si].position) = values[si].transpose();

    Matrix h_next = v_mlp + a + h;
    check_finite_rows(h_next, l, "residual");

    cache.attn_in[l] = std::move(x_attn);
    cache.q[l] = std::move(q);
    cache.k[l] = std::move(k);
    cache.v[l] = std::move(v);
    cache.head_cat[l] = std::move(head_cat);
    cache.pre_mlp[l] = std::move(pre_mlp);
    cache.z_gate[l] = std::move(z_g);
    cache.z_up[l] = std::move(z_u);
    tr.attn_out[l] = std::move(a);
    tr.mlp_input[l] = std::move(x_mlp);
    tr.mlp_key[l] = std::move(key);
    tr.mlp_out[l] = std::move(v_mlp);
    tr.residual[l] = h_next;
    h = std::move(h_next);
  }

  cache.final_normed = rms_norm(h, ckpt.params.final_norm);
  tr.logits = cache.final_normed * ckpt.params.unembed.transpose();
  check_finite_rows(tr.logits, c.n_layers, "logits");
  return cache;
}

TraceBundle forward(const ModelCheckpoint& ckpt, const MultimodalInput& input, bool capture) {
  ForwardCache cache = run_forward(ckpt, input, {}, {}, capture);
  if (!capture) {
    TraceBundle slim;
    slim.captured = false;
    slim.logits = std::move(cache.trace.logits);
    return slim;
  }
  return std::move(cache.trace);
}

TraceBundle inject_value(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                         const std::vector<InjectionSite>& sites,
                         const std::vector<Vector>& values) {
  return std::move(run_forward(ckpt, input, sites, values, true).trace);
}

Vector mlp_key(const ModelCheckpoint& ckpt, int layer, const Vector& x) {
  if (layer < 0 || layer >= ckpt.config.n_layers)
    throw ValidationError("mlp_key: layer " + std::to_string(layer) + " out of range");
  if (x.size() != ckpt.config.d_model)
    throw ValidationError("mlp_key: input has dimension " + std::to_string(x.size()) +
                          ", expected " + std::to_string(ckpt.config.d_model));
  const LayerParams& lp = ckpt.params.layers[layer];
  Vector zg = lp.w_gate * x;
  Vector zu = lp.w_up * x;
  return zg.unaryExpr([](double z) { return silu(z); }).cwiseProduct(zu);
}

LossResult run_backward(const ModelCheckpoint& ckpt, const ForwardCache& cache,
                        const Matrix& dlogits, const GradRequest& req) {
  const ModelConfig& c = ckpt.config;
  const int t_total = static_cast<int>(cache.embeddings.rows());
  const int n_heads = c.n_heads;
  const int dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  LossResult out;
  if (req.values) out.value_grads.assign(cache.sites.size(), Vector::Zero(c.d_model));
  Params grads;
  if (req.params) grads = make_zero_params(c);
  // Norm-scale gradients are accumulated regardless; cheap and simplifies flow.
  Vector d_final_norm = Vector::Zero(c.d_model);
  std::vector<Vector> d_attn_norm(c.n_layers, Vector::Zero(c.d_model));
  std::vector<Vector> d_mlp_norm(c.n_layers, Vector::Zero(c.d_model));

  // logits = final_normed * unembed^T
  Matrix d_final_normed = dlogits * ckpt.params.unembed;
  if (req.params) grads.unembed = dlogits.transpose() * cache.final_normed;
  const Matrix& h_last = cache.trace.residual[c.n_layers - 1];
  Matrix dh_cur = rms_norm_backward(d_final_normed, h_last, ckpt.params.final_norm, d_final_norm);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerParams& lp = ckpt.params.layers[l];
    const Matrix& h_prev = (l == 0) ? cache.embeddings : cache.trace.residual[l - 1];

    // h^l = v + a + h^{l-1}
    Matrix dv = dh_cur;
    Matrix da = dh_cur;
    Matrix dh_prev = dh_cur;

    // Injected rows: the gradient lands on the injected vector, nothing flows
    // into the replaced MLP computation at that position.
    for (size_t si = 0; si < cache.sites.size(); ++si) {
      if (cache.sites[si].layer != l) continue;
      if (req.values) out.value_grads[si] = dv.row(cache.sites[si].position).transpose();
      dv.row(cache.sites[si].position).setZero();
    }

    // MLP backward: v = key * Wd^T, key = silu(zg) .* zu
    Matrix dkey = dv * lp.w_down;
    if (req.params) grads.layers[l].w_down = dv.transpose() * cache.trace.mlp_key[l];
    Matrix silu_zg = cache.z_gate[l].unaryExpr([](double z) { return silu(z); });
    Matrix dzu = dkey.cwiseProduct(silu_zg);
    Matrix dzg = dkey.cwiseProduct(cache.z_up[l])
                     .cwiseProduct(cache.z_gate[l].unaryExpr([](double z) { return silu_grad(z); }));
    Matrix dx_mlp = dzg * lp.w_gate + dzu * lp.w_up;
    if (req.params) {
      grads.layers[l].w_gate = dzg.transpose() * cache.trace.mlp_input[l];
      grads.layers[l].w_up = dzu.transpose() * cache.trace.mlp_input[l];
    }
    Matrix d_pre_mlp = rms_norm_backward(dx_mlp, cache.pre_mlp[l], lp.mlp_norm, d_mlp_norm[l]);
    da += d_pre_mlp;
    dh_prev += d_pre_mlp;

    // attention backward: a = head_cat * Wo^T
    Matrix dhead_cat = da * lp.w_o;
    if (req.params) grads.layers[l].w_o = da.transpose() * cache.head_cat[l];
    Matrix dq = Matrix::Zero(t_total, c.d_model);
    Matrix dk = Matrix::Zero(t_total, c.d_model);
    Matrix dvp = Matrix::Zero(t_total, c.d_model);
    for (int hh = 0; hh < n_heads; ++hh) {
      auto qh = cache.q[l].middleCols(hh * dh, dh);
      auto kh = cache.k[l].middleCols(hh * dh, dh);
      auto vh = cache.v[l].middleCols(hh * dh, dh);
      const Matrix& p = cache.trace.attention[l][hh];
      auto doh = dhead_cat.middleCols(hh * dh, dh);
      Matrix dp = doh * vh.transpose();          // [T x T]
      dvp.middleCols(hh * dh, dh) = p.transpose() * doh;
      // softmax rows: ds = p .* (dp - rowsum(dp .* p)); masked entries have p = 0
      Matrix ds(t_total, t_total);
      for (int i = 0; i < t_total; ++i) {
        double inner = dp.row(i).dot(p.row(i));
        ds.row(i) = p.row(i).cwiseProduct(dp.row(i).array().matrix() -
                                          Eigen::RowVectorXd::Constant(t_total, inner));
      }
      dq.middleCols(hh * dh, dh) = (ds * kh) * scale;
      dk.middleCols(hh * dh, dh) = (ds.transpose() * qh) * scale;
    }
    Matrix dx_attn = dq * lp.w_q + dk * lp.w_k + dvp * lp.w_v;
    if (req.params) {
      grads.layers[l].w_q = dq.transpose() * cache.attn_in[l];
      grads.layers[l].w_k = dk.transpose() * cache.attn_in[l];
      grads.layers[l].w_v = dvp.transpose() * cache.attn_in[l];
    }
    dh_prev += rms_norm_backward(dx_attn, h_prev, lp.attn_norm, d_attn_norm[l]);
    dh_cur = std::move(dh_prev);
  }

  if (req.embeddings) out.embedding_grads = dh_cur;
  if (req.params) {
    grads.final_norm = d_final_norm;
    for (int l = 0; l < c.n_layers; ++l) {
      grads.layers[l].attn_norm = d_attn_norm[l];
      grads.layers[l].mlp_norm = d_mlp_norm[l];
    }
    out.param_grads = std::move(grads);
  }
  return out;
}

// Scatters embedding-row gradients into tok_emb / pos_emb / projector.
// Split out so training can reuse run_backward untouched.
void scatter_embedding_grads(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                             const Matrix& d_embeddings, Params& grads) {
  const ModelConfig& c = ckpt.config;
  const int mv = input.visual_len(c);
  if (mv > 0) {
    Vector dflat(static_cast<Eigen::Index>(mv) * c.d_model);
    for (int m = 0; m < mv; ++m)
      dflat.segment(static_cast<Eigen::Index>(m) * c.d_model, c.d_model) =
          d_embeddings.row(m).transpose();
    grads.projector += dflat * input.image_descriptor->transpose();
  }
  for (int i = 0; i < static_cast<int>(input.token_ids.size()); ++i)
    grads.tok_emb.row(input.token_ids[i]) += d_embeddings.row(mv + i);
  for (int p = 0; p < static_cast<int>(d_embeddings.rows()); ++p)
    grads.pos_emb.row(p) += d_embeddings.row(p);
}

LossResult loss_and_grad_ex(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                            const std::vector<int>& target_ids,
                            const std::vector<InjectionSite>& sites,
                            const std::vector<Vector>& values, const GradRequest& req) {
  if (target_ids.empty()) throw ValidationError("empty target span");
  MultimodalInput full = prompt;
  full.token_ids.insert(full.token_ids.end(), target_ids.begin(), target_ids.end());

  GradRequest inner = req;
  if (req.params) inner.embeddings = true;  // needed for the scatter step
  ForwardCache cache = run_forward(ckpt, full, sites, values, true);

  const int row0 = first_target_row(ckpt.config, prompt);
  Matrix dlogits = Matrix::Zero(cache.trace.logits.rows(), cache.trace.logits.cols());
  double loss = 0.0;
  for (size_t i = 0; i < target_ids.size(); ++i) {
    int row = row0 + static_cast<int>(i);
    Vector logp = log_softmax(cache.trace.logits.row(row).transpose());
    loss -= logp(target_ids[i]);
    Vector p = logp.array().exp();
    dlogits.row(row) = p.transpose();
    dlogits(row, target_ids[i]) -= 1.0;
  }
  LossResult res = run_backward(ckpt, cache, dlogits, inner);
  res.loss = loss;
  if (req.params) {
    scatter_embedding_grads(ckpt, full, res.embedding_grads, res.param_grads);
    if (!req.embeddings) res.embedding_grads.resize(0, 0);
  }
  return res;
}

std::pair<double, std::vector<Vector>> loss_and_grad(const ModelCheckpoint& ckpt,
                                                     const MultimodalInput& prompt,
                                                     const std::vector<int>& target_ids,
                                                     const std::vector<InjectionSite>& sites,
                                                     const std::vector<Vector>& values) {
  GradRequest req;
  req.values = true;
  LossResult res = loss_and_grad_ex(ckpt, prompt, target_ids, sites, values, req);
  return {res.loss, std::move(res.value_grads)};
}

std::vector<int> generate_greedy(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                                 int max_new, int stop_token) {
  MultimodalInput cur = prompt;
  std::vector<int> generated;
  for (int step = 0; step < max_new; ++step) {
    if (cur.total_len(ckpt.config) >= ckpt.config.max_seq_len) break;
    TraceBundle tb = forward(ckpt, cur, false);
    Eigen::Index best;
    tb.logits.row(tb.logits.rows() - 1).maxCoeff(&best);
    int tok = static_cast<int>(best);
    generated.push_back(tok);
    cur.token_ids.push_back(tok);
    if (tok == stop_token) break;
  }
  return generated;
}

Vector softmax(const Vector& logits) {
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Vector log_softmax(const Vector& logits) {
  double mx = logits.maxCoeff();
  double lse = std::log((logits.array() - mx).exp().sum()) + mx;
  return logits.array() - lse;
}

int first_target_row(const ModelConfig& config, const MultimodalInput& prompt) {
  return (prompt.image_descriptor ? config.visual_prefix_len : 0) +
         static_cast<int>(prompt.token_ids.size()) - 1;
}

}  // namespace eva
