#include "fusereg/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fusereg/error.hpp"

namespace fusereg {

std::size_t EncoderConfig::total_stride() const {
  std::size_t s = 1;
  for (auto v : stage_strides) s *= v;
  return s;
}

std::vector<std::string> ModelConfig::validation_errors() const {
  std::vector<std::string> errs;
  auto fail = [&](std::string msg) { errs.push_back(std::move(msg)); };
  const auto& e = encoder;
  const std::size_t stages = e.stage_strides.size();
  if (stages == 0) fail("encoder: at least one stage is required");
  if (e.patch_kernels.size() != stages || e.stage_channels.size() != stages) {
    fail("encoder: stage_strides, patch_kernels and stage_channels must have equal length");
  }
  for (std::size_t i = 0; i < stages && i < e.patch_kernels.size(); ++i) {
    if (e.stage_strides[i] == 0) fail("encoder: stage " + std::to_string(i) + " stride must be >= 1");
    if (e.patch_kernels[i] <= e.stage_strides[i]) {
      fail("encoder: stage " + std::to_string(i) + " patch kernel " + std::to_string(e.patch_kernels[i]) +
           " must exceed stride " + std::to_string(e.stage_strides[i]) + " (overlapping patches)");
    }
  }
  for (std::size_t i = 0; i < e.stage_channels.size(); ++i) {
    const auto c = e.stage_channels[i];
    if (c == 0) fail("encoder: stage " + std::to_string(i) + " has zero channels");
    if (i > 0 && c < e.stage_channels[i - 1]) fail("encoder: stage_channels must be non-decreasing");
    if (attention.heads == 0 || (c % attention.heads) != 0) {
      fail("attention: stage " + std::to_string(i) + " width " + std::to_string(c) +
           " is not divisible by heads " + std::to_string(attention.heads));
    }
  }
  if (e.blocks_per_stage == 0) fail("encoder: blocks_per_stage must be >= 1");
  if (stages > 0 && e.stage_strides.size() == stages) {
    const std::size_t total = e.total_stride();
    for (int a = 0; a < 3; ++a) {
      if (total == 0 || volume_shape[a] == 0 || volume_shape[a] % total != 0) {
        fail("volume_shape: extent " + std::to_string(volume_shape[a]) + " on axis " + std::to_string(a) +
             " must be a positive multiple of the total encoder stride " + std::to_string(total));
      }
    }
  }
  if (decoder.dae_former_count + decoder.lka_count != stages) {
    fail("decoder: dae_former_count + lka_count = " +
         std::to_string(decoder.dae_former_count + decoder.lka_count) + " but the encoder has " +
         std::to_string(stages) + " stages");
  }
  if (decoder.lka_kernel == 0 || decoder.lka_dilated_kernel == 0 || decoder.lka_dilation == 0) {
    fail("decoder: LKA kernels and dilation must be >= 1");
  }
  if (!attention.efficient && !attention.channel) fail("attention: enable at least one of efficient/channel");
  if (attention.ffn_expansion == 0) fail("attention: ffn_expansion must be >= 1");
  if (attention.depthwise_kernel == 0) fail("attention: depthwise_kernel must be >= 1");
  if (!(loss.lambda >= 0)) fail("loss: lambda must be >= 0");
  if (loss.ncc_window == 0 || loss.ncc_window % 2 == 0) fail("loss: ncc_window must be odd and >= 1");
  if (!(loss.eps >= 0)) fail("loss: eps must be >= 0");
  if (!(optimizer.learning_rate > 0)) fail("optimizer: learning_rate must be > 0");
  if (!(optimizer.weight_decay >= 0)) fail("optimizer: weight_decay must be >= 0");
  if (optimizer.batch_size == 0) fail("optimizer: batch_size must be >= 1");
  if (optimizer.epochs == 0) fail("optimizer: epochs must be >= 1");
  if (!(optimizer.momentum >= 0 && optimizer.momentum < 1)) fail("optimizer: momentum must be in [0, 1)");
  if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
  return errs;
}

void ModelConfig::validate() const {
  const auto errs = validation_errors();
  if (errs.empty()) return;
  std::ostringstream os;
  os << "invalid configuration (" << errs.size() << " problem" << (errs.size() == 1 ? "" : "s") << "):";
  for (const auto& e : errs) os << "\n  - " << e;
  throw ConfigError(os.str());
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.optimizer.learning_rate = 0.1;
  c.optimizer.momentum = 0.9;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.volume_shape = {8, 8, 8};
  c.encoder.stage_strides = {2, 2, 2, 1};
  c.encoder.patch_kernels = {3, 3, 3, 3};
  c.encoder.stage_channels = {2, 4, 6, 8};
  c.attention.heads = 2;
  c.decoder.lka_kernel = 3;
  c.decoder.lka_dilated_kernel = 3;
  c.decoder.lka_dilation = 2;
  c.loss.ncc_window = 3;
  c.optimizer.batch_size = 1;
  c.optimizer.epochs = 1;
  return c;
}

ModelConfig ModelConfig::ablation_base() {
  ModelConfig c = desk();
  c.volume_shape = {16, 16, 16};
  c.encoder.stage_strides = {2, 2, 2, 2};
  c.encoder.patch_kernels = {3, 3, 3, 3};
  c.loss.ncc_window = 5;
  c.optimizer.epochs = 1;
  return c;
}

void set_total_layers(ModelConfig& cfg, std::size_t layers) {
  const std::size_t stages = cfg.encoder.num_stages();
  if (stages == 0 || layers % stages != 0) {
    throw ConfigError(std::to_string(layers) + " layers cannot be spread evenly over " +
                      std::to_string(stages) + " encoder stages");
  }
  cfg.encoder.blocks_per_stage = layers / stages;
}

std::vector<AblationRow> ablation_grid(const ModelConfig& base) {
  std::vector<AblationRow> rows;
  auto row = [&](std::string label, auto mutate) {
    ModelConfig c = base;
    mutate(c);
    rows.push_back({std::move(label), c});
  };
  for (std::size_t b : {2u, 8u}) row("batch=" + std::to_string(b), [b](ModelConfig& c) { c.optimizer.batch_size = b; });
  for (std::size_t h : {1u, 8u}) row("heads=" + std::to_string(h), [h](ModelConfig& c) { c.attention.heads = h; });
  for (std::size_t k : {3u, 6u}) row("patch=" + std::to_string(k), [k](ModelConfig& c) { c.attention.depthwise_kernel = k; });
  for (std::size_t l : {4u, 8u}) row("layers=" + std::to_string(l), [l](ModelConfig& c) { set_total_layers(c, l); });
  row("EA-only", [](ModelConfig& c) { c.attention.channel = false; });
  row("CA-only", [](ModelConfig& c) { c.attention.efficient = false; });
  const std::pair<std::size_t, std::size_t> splits[] = {{0, 4}, {1, 3}, {2, 2}, {3, 1}, {4, 0}};
  for (auto [dae, lka] : splits) {
    row("dae=" + std::to_string(dae) + ",lka=" + std::to_string(lka), [dae, lka](ModelConfig& c) {
      c.decoder.dae_former_count = dae;
      c.decoder.lka_count = lka;
    });
  }
  return rows;
}

nlohmann::json to_json(const ModelConfig& c) {
  using nlohmann::json;
  return json{
      {"volume_shape", c.volume_shape},
      {"encoder",
       {{"stage_strides", c.encoder.stage_strides},
        {"patch_kernels", c.encoder.patch_kernels},
        {"stage_channels", c.encoder.stage_channels},
        {"blocks_per_stage", c.encoder.blocks_per_stage}}},
      {"decoder",
       {{"dae_former_count", c.decoder.dae_former_count},
        {"lka_count", c.decoder.lka_count},
        {"lka_kernel", c.decoder.lka_kernel},
        {"lka_dilated_kernel", c.decoder.lka_dilated_kernel},
        {"lka_dilation", c.decoder.lka_dilation}}},
      {"attention",
       {{"heads", c.attention.heads},
        {"efficient", c.attention.efficient},
        {"channel", c.attention.channel},
        {"ffn_expansion", c.attention.ffn_expansion},
        {"depthwise_kernel", c.attention.depthwise_kernel}}},
      {"loss", {{"lambda", c.loss.lambda}, {"ncc_window", c.loss.ncc_window}, {"eps", c.loss.eps}}},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"weight_decay", c.optimizer.weight_decay},
        {"batch_size", c.optimizer.batch_size},
        {"epochs", c.optimizer.epochs},
        {"momentum", c.optimizer.momentum}}},
      {"seed", c.seed},
      {"precision", c.precision},
  };
}

namespace {

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config field '") + key + "': " + ex.what());
  }
}

const nlohmann::json& section(const nlohmann::json& j, const char* key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(key)) return empty;
  if (!j.at(key).is_object()) throw ConfigError(std::string("config section '") + key + "' must be an object");
  return j.at(key);
}

}  // namespace

ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ModelConfig c = ModelConfig::desk();
  read(j, "volume_shape", c.volume_shape);
  read(j, "seed", c.seed);
  read(j, "precision", c.precision);
  const auto& e = section(j, "encoder");
  read(e, "stage_strides", c.encoder.stage_strides);
  read(e, "patch_kernels", c.encoder.patch_kernels);
  read(e, "stage_channels", c.encoder.stage_channels);
  read(e, "blocks_per_stage", c.encoder.blocks_per_stage);
  const auto& d = section(j, "decoder");
  read(d, "dae_former_count", c.decoder.dae_former_count);
  read(d, "lka_count", c.decoder.lka_count);
  read(d, "lka_kernel", c.decoder.lka_kernel);
  read(d, "lka_dilated_kernel", c.decoder.lka_dilated_kernel);
  read(d, "lka_dilation", c.decoder.lka_dilation);
  const auto& a = section(j, "attention");
  read(a, "heads", c.attention.heads);
  read(a, "efficient", c.attention.efficient);
  read(a, "channel", c.attention.channel);
  read(a, "ffn_expansion", c.attention.ffn_expansion);
  read(a, "depthwise_kernel", c.attention.depthwise_kernel);
  const auto& l = section(j, "loss");
  read(l, "lambda", c.loss.lambda);
  read(l, "ncc_window", c.loss.ncc_window);
  read(l, "eps", c.loss.eps);
  const auto& o = section(j, "optimizer");
  read(o, "learning_rate", c.optimizer.learning_rate);
  read(o, "weight_decay", c.optimizer.weight_decay);
  read(o, "batch_size", c.optimizer.batch_size);
  read(o, "epochs", c.optimizer.epochs);
  read(o, "momentum", c.optimizer.momentum);
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& ex) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + ex.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ModelConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 14695981039346656037ull;  // FNV-1a
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fusereg
