#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fusereg/decoder.hpp"

namespace fusereg {

template <typename T>
struct Model {
  ModelConfig config;
  std::shared_ptr<ParamStore<T>> store;
  EncoderParams<T> encoder;
  DecoderParams<T> decoder;

  const std::vector<Parameter<T>>& params() const { return store->params(); }
};

// Validates cfg and initializes every parameter from cfg.seed.
template <typename T>
Model<T> build_model(const ModelConfig& cfg);

// moving, fixed: [1, D, H, W]. Returns the displacement field [3, D, H, W].
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& moving, const Tensor<T>& fixed);

struct ParamRow {
  std::string module;
  std::size_t count = 0;
};

struct ParamTable {
  std::vector<ParamRow> rows;
  std::size_t total = 0;
};

// Groups parameters as Encoder / DAE-Former i / LKA-Former i / Other.
template <typename T>
ParamTable param_table(const Model<T>& model);

ParamTable count_params(const ModelConfig& cfg);

}  // namespace fusereg
