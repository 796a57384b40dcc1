#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "eva/checkpoint.hpp"

namespace eva {

// Token sequence plus an optional image descriptor. When the descriptor is
// present the projector turns it into M prefix embeddings ahead of the text;
// when absent the M visual positions are omitted entirely.
struct MultimodalInput {
  std::vector<int> token_ids;
  std::optional<Vector> image_descriptor;

  int visual_len(const ModelConfig& c) const {
    return image_descriptor ? c.visual_prefix_len : 0;
  }
  int total_len(const ModelConfig& c) const {
    return visual_len(c) + static_cast<int>(token_ids.size());
  }
};

// (layer, position) pair addressing one MLP output. Positions are absolute
// within the embedded sequence (visual prefix included).
struct InjectionSite {
  int layer = 0;
  int position = 0;
  bool operator==(const InjectionSite&) const = default;
};

// Per-forward capture of the quantities the editing pipeline reads.
struct TraceBundle {
  bool captured = false;
  std::vector<Matrix> mlp_input;   // x^l  [T x d_model]
  std::vector<Matrix> mlp_key;     // k^l  [T x d_mlp]
  std::vector<Matrix> mlp_out;     // v^l  [T x d_model] (post-injection value)
  std::vector<Matrix> attn_out;    // a^l  [T x d_model]
  std::vector<Matrix> residual;    // h^l  [T x d_model]
  std::vector<std::vector<Matrix>> attention;  // [layer][head] [T x T] row-stochastic
  Matrix logits;                   // [T x vocab]

  // Head-averaged attention matrix at one layer.
  Matrix head_mean_attention(int layer) const;
};

// Everything the backward pass needs, superset of TraceBundle.
struct ForwardCache {
  TraceBundle trace;
  Matrix embeddings;            // E_in [T x d_model]
  std::vector<Matrix> attn_in;  // normed attention input per layer [T x d_model]
  std::vector<Matrix> q, k, v;  // projections per layer [T x d_model]
  std::vector<Matrix> head_cat; // concatenated head outputs, pre-W_o [T x d_model]
  std::vector<Matrix> pre_mlp;  // a^l + h^{l-1} per layer [T x d_model]
  std::vector<Matrix> z_gate, z_up;  // [T x d_mlp]
  Matrix final_normed;          // [T x d_model]
  std::vector<InjectionSite> sites;  // active injections (empty when none)
};

struct GradRequest {
  bool values = false;      // d loss / d injected value vectors
  bool params = false;      // d loss / d all checkpoint parameters
  bool embeddings = false;  // d loss / d input embedding rows
};

struct LossResult {
  double loss = 0.0;
  std::vector<Vector> value_grads;  // aligned with the sites passed in
  Params param_grads;               // shapes of the checkpoint when requested
  Matrix embedding_grads;           // [T x d_model] when requested
};

// Instrumented forward pass. With capture=false only logits are populated.
TraceBundle forward(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                    bool capture = false);

// SwiGLU key: sigma(W_gate x) .* (W_up x) at one layer.
Vector mlp_key(const ModelCheckpoint& ckpt, int layer, const Vector& x);

// Forward pass with the MLP output replaced by the given vectors at the
// given sites before the residual sum; downstream layers see the substitute.
TraceBundle inject_value(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                         const std::vector<InjectionSite>& sites,
                         const std::vector<Vector>& values);

// Full cached forward. `input` is the complete sequence to run (answer span
// already appended when scoring a continuation).
ForwardCache run_forward(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                         const std::vector<InjectionSite>& sites = {},
                         const std::vector<Vector>& values = {}, bool capture = true);

// Reverse-mode accumulation from arbitrary logit gradients.
LossResult run_backward(const ModelCheckpoint& ckpt, const ForwardCache& cache,
                        const Matrix& dlogits, const GradRequest& req);

// Summed negative log-likelihood of target_ids appended after `prompt`,
// under inject_value semantics, with gradients per the request.
LossResult loss_and_grad_ex(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                            const std::vector<int>& target_ids,
                            const std::vector<InjectionSite>& sites,
                            const std::vector<Vector>& values, const GradRequest& req);

// Gradients with respect to the injected values only; weights frozen.
std::pair<double, std::vector<Vector>> loss_and_grad(const ModelCheckpoint& ckpt,
                                                     const MultimodalInput& prompt,
                                                     const std::vector<int>& target_ids,
                                                     const std::vector<InjectionSite>& sites,
                                                     const std::vector<Vector>& values);

// Greedy (argmax) continuation of max_new tokens; stops after emitting
// stop_token when stop_token >= 0.
std::vector<int> generate_greedy(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                                 int max_new, int stop_token = -1);

Vector softmax(const Vector& logits);
Vector log_softmax(const Vector& logits);

// Row indices of `logits` that predict each appended target token:
// rows first_target_row .. first_target_row+n-1 for n target tokens.
int first_target_row(const ModelConfig& config, const MultimodalInput& prompt);

}  // namespace eva
