#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <vector>

#include "eva/config.hpp"

namespace eva {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// All linear maps are stored [out x in] and applied to row-major activation
// matrices as Y = X * W.transpose().
struct LayerParams {
  Vector attn_norm;  // [d_model] RMS-norm scale before attention
  Matrix w_q, w_k, w_v, w_o;  // [d_model x d_model]
  Vector mlp_norm;   // [d_model] RMS-norm scale on a^l + h^{l-1}
  Matrix w_gate;     // [d_mlp x d_model]
  Matrix w_up;       // [d_mlp x d_model]
  Matrix w_down;     // [d_model x d_mlp]
};

struct Params {
  Matrix tok_emb;    // [vocab_size x d_model]
  Matrix pos_emb;    // [max_seq_len x d_model]
  std::vector<LayerParams> layers;
  Vector final_norm;  // [d_model]
  Matrix unembed;     // [vocab_size x d_model]
  Matrix projector;   // [M*d_model x descriptor_dim], image descriptor -> prefix embeddings
};

struct ModelCheckpoint {
  ModelConfig config;
  Params params;
};

// Visits every parameter block as (data, size) in the fixed serialization
// order. Serialization, the optimizer, and gradient algebra all share it.
void for_each_array(Params& p, const std::function<void(double*, Eigen::Index)>& fn);
void for_each_array(const Params& p, const std::function<void(const double*, Eigen::Index)>& fn);

// Zero-initialized parameter set with shapes from config.
Params make_zero_params(const ModelConfig& config);

// Random initialization, deterministic in config.seed (substream "init").
ModelCheckpoint init_checkpoint(const ModelConfig& config);

void check_shapes(const ModelCheckpoint& ckpt);  // throws ValidationError

// File format: "EVAC" magic, u16 format version, u32 JSON header length,
// JSON config header, then little-endian IEEE-754 32-bit arrays in the
// for_each_array order. Storage is f32; in-memory math is f64.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// Content hash of the serialized form (used for determinism checks).
uint64_t checkpoint_digest(const ModelCheckpoint& ckpt);

}  // namespace eva
