#include "reference_model.hpp"

#include <cmath>

namespace eva::ref {

namespace {

// y_i = x_i * g_i / sqrt(mean(x^2) + 1e-6)
Vec norm(const Vec& x, const eva::Vector& g) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  double r = std::sqrt(ms / static_cast<double>(x.size()) + 1e-6);
  Vec y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * g(static_cast<int>(i)) / r;
  return y;
}

Vec matvec(const eva::Matrix& w, const Vec& x) {  // w [out x in]
  Vec y(w.rows(), 0.0);
  for (int i = 0; i < w.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < w.cols(); ++j) s += w(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

}  // namespace

Vec reference_mlp_key(const ModelCheckpoint& ckpt, int layer, const Vec& x) {
  const auto& lp = ckpt.params.layers[layer];
  Vec zg = matvec(lp.w_gate, x);
  Vec zu = matvec(lp.w_up, x);
  Vec k(zg.size());
  for (size_t i = 0; i < k.size(); ++i) k[i] = silu(zg[i]) * zu[i];
  return k;
}

RefOutput reference_forward(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                            const std::vector<InjectionSite>& sites,
                            const std::vector<eva::Vector>& values) {
  const ModelConfig& c = ckpt.config;
  const int mv = input.image_descriptor ? c.visual_prefix_len : 0;
  const int t_total = mv + static_cast<int>(input.token_ids.size());
  const int dh = c.d_model / c.n_heads;

  // embeddings
  Mat h(t_total, Vec(c.d_model, 0.0));
  for (int m = 0; m < mv; ++m)
    for (int d = 0; d < c.d_model; ++d) {
      double proj = 0.0;
      for (int k = 0; k < c.descriptor_dim; ++k)
        proj += ckpt.params.projector(m * c.d_model + d, k) * (*input.image_descriptor)(k);
      h[m][d] = proj + ckpt.params.pos_emb(m, d);
    }
  for (size_t i = 0; i < input.token_ids.size(); ++i)
    for (int d = 0; d < c.d_model; ++d)
      h[mv + i][d] =
          ckpt.params.tok_emb(input.token_ids[i], d) + ckpt.params.pos_emb(mv + i, d);

  RefOutput out;
  out.residual.resize(c.n_layers);
  out.mlp_key.resize(c.n_layers);
  out.mlp_out.resize(c.n_layers);

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lp = ckpt.params.layers[l];
    Mat q(t_total), k(t_total), v(t_total), normed(t_total);
    for (int p = 0; p < t_total; ++p) {
      normed[p] = norm(h[p], lp.attn_norm);
      q[p] = matvec(lp.w_q, normed[p]);
      k[p] = matvec(lp.w_k, normed[p]);
      v[p] = matvec(lp.w_v, normed[p]);
    }

    Mat attn_out(t_total, Vec(c.d_model, 0.0));
    for (int p = 0; p < t_total; ++p) {
      Vec concat(c.d_model, 0.0);
      for (int head = 0; head < c.n_heads; ++head) {
        // causal attention over the prefix, one position at a time
        std::vector<double> scores(p + 1);
        double mx = -1e300;
        for (int j = 0; j <= p; ++j) {
          double s = 0.0;
          for (int d = 0; d < dh; ++d) s += q[p][head * dh + d] * k[j][head * dh + d];
          scores[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (int j = 0; j <= p; ++j) z += std::exp(scores[j] - mx);
        for (int j = 0; j <= p; ++j) {
          double w = std::exp(scores[j] - mx) / z;
          for (int d = 0; d < dh; ++d) concat[head * dh + d] += w * v[j][head * dh + d];
        }
      }
      attn_out[p] = matvec(lp.w_o, concat);
    }

    Mat h_next(t_total);
    out.mlp_key[l].resize(t_total);
    out.mlp_out[l].resize(t_total);
    for (int p = 0; p < t_total; ++p) {
      Vec pre(c.d_model);
      for (int d = 0; d < c.d_model; ++d) pre[d] = attn_out[p][d] + h[p][d];
      Vec x = norm(pre, lp.mlp_norm);
      Vec key = reference_mlp_key(ckpt, l, x);
      Vec mlp = matvec(lp.w_down, key);
      for (size_t si = 0; si < sites.size(); ++si)
        if (sites[si].layer == l && sites[si].position == p)
          for (int d = 0; d < c.d_model; ++d) mlp[d] = values[si](d);
      h_next[p] = Vec(c.d_model);
      for (int d = 0; d < c.d_model; ++d) h_next[p][d] = mlp[d] + attn_out[p][d] + h[p][d];
      out.mlp_key[l][p] = std::move(key);
      out.mlp_out[l][p] = std::move(mlp);
    }
    out.residual[l] = h_next;
    h = std::move(h_next);
  }

  out.logits.resize(t_total);
  for (int p = 0; p < t_total; ++p) {
    Vec f = norm(h[p], ckpt.params.final_norm);
    out.logits[p] = Vec(c.vocab_size);
    for (int vtok = 0; vtok < c.vocab_size; ++vtok) {
      double s = 0.0;
      for (int d = 0; d < c.d_model; ++d) s += ckpt.params.unembed(vtok, d) * f[d];
      out.logits[p][vtok] = s;
    }
  }
  return out;
}

double reference_nll(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                     const std::vector<int>& target_ids,
                     const std::vector<InjectionSite>& sites,
                     const std::vector<eva::Vector>& values) {
  MultimodalInput full = prompt;
  full.token_ids.insert(full.token_ids.end(), target_ids.begin(), target_ids.end());
  RefOutput out = reference_forward(ckpt, full, sites, values);
  const int mv = prompt.image_descriptor ? ckpt.config.visual_prefix_len : 0;
  int row = mv + static_cast<int>(prompt.token_ids.size()) - 1;
  double loss = 0.0;
  for (size_t i = 0; i < target_ids.size(); ++i, ++row) {
    const Vec& logits = out.logits[row];
    double mx = -1e300;
    for (double z : logits) mx = std::max(mx, z);
    double lse = 0.0;
    for (double z : logits) lse += std::exp(z - mx);
    lse = std::log(lse) + mx;
    loss -= logits[target_ids[i]] - lse;
  }
  return loss;
}

}  // namespace eva::ref
