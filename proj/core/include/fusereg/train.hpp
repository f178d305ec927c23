#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fusereg/model.hpp"

namespace fusereg {

struct TrainingRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_ssim = 0.0;
  double val_ssim = 0.0;
};

using TrainingCurve = std::vector<TrainingRecord>;

struct VolumePair {
  std::string name;
  Tensor<double> moving;  // [1, D, H, W]
  Tensor<double> fixed;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedArray> params;
  std::vector<NamedArray> velocity;  // momentum buffers, empty for plain SGD
  std::size_t epoch = 0;
  std::string rng_state;
  TrainingCurve curve;
  double best_val_ssim = -1.0;
  std::size_t best_epoch = 0;
};

// p <- p - lr * (g + weight_decay * p), with an optional heavy-ball momentum
// buffer when momentum > 0. Throws ContractError when a gradient is missing.
template <typename T>
void sgd_step(const std::vector<Parameter<T>>& params, const OptimizerConfig& opt,
              std::vector<std::vector<T>>* velocity = nullptr);

// Seeded 80/20 split. A single pair serves as both training and validation set.
std::pair<std::vector<VolumePair>, std::vector<VolumePair>> split_pairs(std::vector<VolumePair> pairs,
                                                                        std::uint64_t seed);

struct TrainOptions {
  const Checkpoint* resume = nullptr;
  std::function<void(const TrainingRecord&)> on_epoch;
  // Stop after this epoch (0 = cfg.optimizer.epochs); used to test resumption.
  std::size_t stop_after = 0;
};

struct TrainResult {
  Checkpoint last;
  Checkpoint best;  // params stay empty when a resumed run never beat the stored best
  TrainingCurve curve;
};

template <typename T>
TrainResult train(const ModelConfig& cfg, const std::vector<VolumePair>& train_pairs,
                  const std::vector<VolumePair>& val_pairs, const TrainOptions& options = {});

// Dispatches on cfg.precision.
TrainResult train_model(const ModelConfig& cfg, const std::vector<VolumePair>& train_pairs,
                        const std::vector<VolumePair>& val_pairs, const TrainOptions& options = {});

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model);

// Rebuilds the model from the checkpoint config and copies the stored values.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt);

struct RegistrationReport {
  double ssim = 0.0;
  double hd95 = 0.0;
  double sdlogj = 0.0;
  double ncc = 0.0;
  double loss_total = 0.0;
  double loss_sim = 0.0;
  double loss_smooth = 0.0;
  double nonpositive_jacobian_fraction = 0.0;
};

// Metrics of warp(moving, field) against fixed. Undefined metrics (empty
// mask, every Jacobian folded) are NaN.
RegistrationReport evaluate_registration(const Tensor<double>& moving, const Tensor<double>& fixed,
                                         const Tensor<double>& field, const LossConfig& loss);

struct Registration {
  Tensor<double> field;
  Tensor<double> warped;
  RegistrationReport report;
};

Registration register_pair(const Checkpoint& ckpt, const Tensor<double>& moving, const Tensor<double>& fixed);

}  // namespace fusereg
