#pragma once

#include <array>
#include <cstddef>
#include <optional>

#include "fusereg/layers.hpp"

namespace fusereg {

using Spatial = std::array<std::size_t, 3>;

/// Projections for one attention mechanism. `log_tau` ([heads], channel
/// attention only) stores the per-head temperature in log space so tau stays
/// positive; it starts at log(sqrt(d_head)).
template <typename T>
struct AttentionParams {
  std::size_t heads = 1;
  Linear<T> query, key, value, output;
  Tensor<T> log_tau;

  static AttentionParams create_efficient(Initializer<T> init, std::size_t d_model, std::size_t heads);
  static AttentionParams create_channel(Initializer<T> init, std::size_t d_model, std::size_t heads);
};

// Linear-cost attention on already projected q, k, v ([N, d]): per head
// softmax_row(Q) * (softmax_col(K)^T V), heads concatenated. No output projection.
template <typename T>
Tensor<T> efficient_attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                    std::size_t heads);

// Transposed attention on projected q, k, v ([N, d]): per head
// V * softmax(K^T Q / tau), the softmax normalizing each column of the
// d_head x d_head map so output channels are convex mixes of V's channels.
template <typename T>
Tensor<T> channel_attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  std::size_t heads, const Tensor<T>& log_tau);

template <typename T>
Tensor<T> efficient_attention(const Tensor<T>& x, const AttentionParams<T>& p);

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const AttentionParams<T>& p);

template <typename T>
struct MixFfnParams {
  Linear<T> fc_in;
  Conv3d<T> depthwise;
  Linear<T> fc_out;

  static MixFfnParams create(Initializer<T> init, std::size_t d_model, std::size_t expansion,
                             std::size_t kernel);
};

// FC -> depthwise conv over the token volume -> GELU -> FC.
template <typename T>
Tensor<T> mix_ffn(const Tensor<T>& x, const Spatial& spatial, const MixFfnParams<T>& p);

struct DualBlockOptions {
  std::size_t d_model = 8;
  std::size_t heads = 1;
  std::size_t ffn_expansion = 4;
  std::size_t ffn_kernel = 3;
  bool efficient_enabled = true;
  bool channel_enabled = true;
};

/// A disengaged mechanism acts as the identity map.
template <typename T>
struct DualBlockParams {
  std::optional<AttentionParams<T>> efficient;
  std::optional<AttentionParams<T>> channel;
  MixFfnParams<T> mlp1, mlp2;
  LayerNorm<T> norm1, norm2;

  static DualBlockParams create(Initializer<T> init, const DualBlockOptions& options);
};

template <typename T>
struct DualBlockTrace {
  Tensor<T> ea_block, m1, ca_block, m2, output;
};

//   EA_b = EA(X) + X
//   M1   = MLP(LN(EA_b))
//   CA_b = CA(EA_b + M1) + M1
//   M2   = MLP(LN(CA_b))
//   DA   = CA_b + M2
template <typename T>
DualBlockTrace<T> dual_attention_block_trace(const Tensor<T>& x, const Spatial& spatial,
                                             const DualBlockParams<T>& p);

template <typename T>
Tensor<T> dual_attention_block(const Tensor<T>& x, const Spatial& spatial,
                               const DualBlockParams<T>& p) {
  return dual_attention_block_trace(x, spatial, p).output;
}

}  // namespace fusereg
