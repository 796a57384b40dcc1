#pragma once

// Slow reference implementation used as an independent oracle. Everything is
// computed position by position with plain scalar loops; no code is shared
// with the library's vectorized forward pass.

#include <optional>
#include <vector>

#include "eva/checkpoint.hpp"
#include "eva/model.hpp"

namespace eva::ref {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>;  // [rows][cols]

struct RefOutput {
  Mat logits;                       // [T][vocab]
  std::vector<Mat> residual;        // per layer [T][d_model]
  std::vector<Mat> mlp_key;         // per layer [T][d_mlp]
  std::vector<Mat> mlp_out;         // per layer [T][d_model]
};

// Forward pass with optional value injection (site list in absolute
// positions, one replacement vector per site).
RefOutput reference_forward(const ModelCheckpoint& ckpt, const MultimodalInput& input,
                            const std::vector<InjectionSite>& sites = {},
                            const std::vector<eva::Vector>& values = {});

// Scalar-loop SwiGLU key for one input vector.
Vec reference_mlp_key(const ModelCheckpoint& ckpt, int layer, const Vec& x);

// Summed NLL of target_ids appended after the prompt, via reference_forward.
double reference_nll(const ModelCheckpoint& ckpt, const MultimodalInput& prompt,
                     const std::vector<int>& target_ids,
                     const std::vector<InjectionSite>& sites = {},
                     const std::vector<eva::Vector>& values = {});

}  // namespace eva::ref
