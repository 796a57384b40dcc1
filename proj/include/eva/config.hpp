#pragma once

#include <cstdint>
#include <string>

#include "eva/common.hpp"
#include "json.hpp"

namespace eva {

// Architecture hyperparameters of the mini decoder-only transformer.
// visual_prefix_len is the number M of image-token positions prepended when
// an input carries an image descriptor; descriptor_dim is the width of that
// descriptor vector.
struct ModelConfig {
  int n_layers = 2;
  int d_model = 32;
  int d_mlp = 64;
  int n_heads = 4;
  int vocab_size = 64;
  int max_seq_len = 24;
  int visual_prefix_len = 4;  // M
  int descriptor_dim = 16;
  std::string activation = "silu";
  uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ValidationError(std::string("model config: ") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(d_mlp, "d_mlp");
    positive(n_heads, "n_heads");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    positive(descriptor_dim, "descriptor_dim");
    if (visual_prefix_len < 0)
      throw ValidationError("model config: visual_prefix_len must be non-negative");
    if (d_model % n_heads != 0)
      throw ValidationError("model config: n_heads must divide d_model");
    if (visual_prefix_len >= max_seq_len)
      throw ValidationError("model config: visual_prefix_len must be < max_seq_len");
    if (activation != "silu")
      throw ValidationError("model config: unsupported activation '" + activation + "'");
  }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace eva
