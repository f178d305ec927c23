#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fusereg {

struct EncoderConfig {
  std::vector<std::size_t> stage_strides{4, 2, 2, 2};
  std::vector<std::size_t> patch_kernels{7, 3, 3, 3};
  std::vector<std::size_t> stage_channels{8, 16, 32, 64};
  std::size_t blocks_per_stage = 1;

  std::size_t num_stages() const { return stage_strides.size(); }
  std::size_t total_stride() const;
};

struct DecoderConfig {
  // Decoder stages run deep to shallow; the first dae_former_count use
  // dual-attention blocks, the remaining lka_count use large-kernel attention.
  std::size_t dae_former_count = 2;
  std::size_t lka_count = 2;
  std::size_t lka_kernel = 5;
  std::size_t lka_dilated_kernel = 7;
  std::size_t lka_dilation = 3;
};

struct AttentionConfig {
  std::size_t heads = 2;
  bool efficient = true;
  bool channel = true;
  std::size_t ffn_expansion = 4;
  // Extent of the depthwise kernels in Mix-FFN and fusion feature extraction.
  std::size_t depthwise_kernel = 3;
};

struct LossConfig {
  double lambda = 1.0;
  std::size_t ncc_window = 5;
  double eps = 1e-5;
};

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double weight_decay = 3e-5;
  std::size_t batch_size = 2;
  std::size_t epochs = 50;
  double momentum = 0.0;  // 0 is plain SGD
};

struct ModelConfig {
  std::array<std::size_t, 3> volume_shape{32, 32, 32};
  EncoderConfig encoder;
  DecoderConfig decoder;
  AttentionConfig attention;
  LossConfig loss;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  int precision = 64;

  // Every violated constraint, one message each; empty when valid.
  std::vector<std::string> validation_errors() const;
  // Throws ConfigError listing all violations.
  void validate() const;

  // 32^3 volumes, channels [8,16,32,64], 2 heads, batch 2, 50 epochs.
  static ModelConfig desk();
  // 8^3 volumes, channels [2,4,6,8], strides [2,2,2,1]: for gradient checks.
  static ModelConfig tiny();
  // 16^3 volumes with strides [2,2,2,2]: base row for ablation sweeps.
  static ModelConfig ablation_base();
};

// Sets blocks_per_stage so the encoder holds `layers` dual-attention blocks.
void set_total_layers(ModelConfig& cfg, std::size_t layers);

struct AblationRow {
  std::string label;
  ModelConfig config;
};

// One-factor-at-a-time rows: batch {2,8}, heads {1,8}, depthwise kernel {3,6},
// layers {4,8}, EA-only, CA-only, and the five DAE/LKA splits.
std::vector<AblationRow> ablation_grid(const ModelConfig& base);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig load_config(const std::string& path);
std::string config_hash(const ModelConfig& cfg);

}  // namespace fusereg
