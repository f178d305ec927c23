#pragma once

#include <cstddef>
#include <random>

#include "fusereg/model.hpp"

namespace testing_support {

// Overwrites every parameter with N(0, std) so zero-initialized pieces
// (biases, the head) take part in the computation.
template <typename T>
void randomize(fusereg::ParamStore<T>& store, std::uint64_t seed, double std = 0.2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (auto& p : store.params()) {
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(n(rng));
  }
}

// Closed-form parameter counts, written from the layer definitions.
namespace closed_form {

inline std::size_t linear(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t layernorm(std::size_t c) { return 2 * c; }
inline std::size_t conv(std::size_t in, std::size_t out, std::size_t k, std::size_t groups = 1) {
  return out * (in / groups) * k * k * k + out;
}

inline std::size_t mix_ffn(std::size_t d, std::size_t e, std::size_t k) {
  return linear(d, e * d) + conv(e * d, e * d, k, e * d) + linear(e * d, d);
}

inline std::size_t dual_block(std::size_t d, const fusereg::AttentionConfig& a) {
  std::size_t n = 2 * layernorm(d) + 2 * mix_ffn(d, a.ffn_expansion, a.depthwise_kernel);
  if (a.efficient) n += 4 * linear(d, d);
  if (a.channel) n += 4 * linear(d, d) + a.heads;
  return n;
}

inline std::size_t fusion(std::size_t c, std::size_t k) {
  return linear(c, c) + conv(c, c, k, c) + conv(c, c, 1) + conv(c, c, k, c) + conv(c, c, 1) + layernorm(c) +
         3 * conv(c, c, 1);
}

inline std::size_t encoder(const fusereg::ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  std::size_t n = 0, c_in = 2;
  for (std::size_t i = 0; i < e.num_stages(); ++i) {
    const std::size_t c = e.stage_channels[i];
    n += conv(c_in, c, e.patch_kernels[i]) + layernorm(c) + e.blocks_per_stage * dual_block(c, cfg.attention) +
         layernorm(c);
    c_in = c;
  }
  return n;
}

// Decoder stage i, counted deep to shallow.
inline std::size_t decoder_stage(const fusereg::ModelConfig& cfg, std::size_t i) {
  const auto& e = cfg.encoder;
  const auto& d = cfg.decoder;
  const std::size_t level = e.num_stages() - 1 - i;
  const std::size_t c = e.stage_channels[level];
  std::size_t n = 0;
  if (i < d.dae_former_count) {
    n += dual_block(c, cfg.attention);
  } else {
    n += conv(c, c, d.lka_kernel, c) + conv(c, c, d.lka_dilated_kernel, c) + conv(c, c, 1);
  }
  if (level > 0) {
    const std::size_t cn = e.stage_channels[level - 1];
    n += conv(c, cn, 1) + fusion(cn, cfg.attention.depthwise_kernel);
  }
  return n;
}

inline std::size_t head(const fusereg::ModelConfig& cfg) { return conv(cfg.encoder.stage_channels.front(), 3, 1); }

inline std::size_t total(const fusereg::ModelConfig& cfg) {
  std::size_t n = encoder(cfg) + head(cfg);
  for (std::size_t i = 0; i < cfg.encoder.num_stages(); ++i) n += decoder_stage(cfg, i);
  return n;
}

}  // namespace closed_form

// The three configurations used for exact parameter accounting.
inline std::vector<fusereg::ModelConfig> accounting_configs() {
  std::vector<fusereg::ModelConfig> out;
  out.push_back(fusereg::ModelConfig::tiny());

  auto b = fusereg::ModelConfig::tiny();
  b.attention.efficient = false;
  b.attention.heads = 1;
  b.encoder.blocks_per_stage = 2;
  b.decoder.dae_former_count = 3;
  b.decoder.lka_count = 1;
  out.push_back(b);

  auto c = fusereg::ModelConfig::tiny();
  c.attention.channel = false;
  c.attention.depthwise_kernel = 6;
  c.attention.ffn_expansion = 2;
  c.decoder.dae_former_count = 0;
  c.decoder.lka_count = 4;
  out.push_back(c);
  return out;
}

}  // namespace testing_support
