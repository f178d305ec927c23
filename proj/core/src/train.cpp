#include "fusereg/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "fusereg/losses.hpp"
#include "fusereg/metrics.hpp"
#include "fusereg/warp.hpp"

namespace fusereg {

template <typename T>
void sgd_step(const std::vector<Parameter<T>>& params, const OptimizerConfig& opt,
              std::vector<std::vector<T>>* velocity) {
  const bool use_momentum = opt.momentum > 0.0;
  if (use_momentum) {
    if (!velocity) throw ContractError("sgd_step: momentum > 0 needs a velocity buffer");
    if (velocity->empty()) {
      for (const auto& p : params) velocity->emplace_back(p.tensor.numel(), T(0));
    }
    if (velocity->size() != params.size()) throw ContractError("sgd_step: velocity buffer does not match parameters");
  }
  const T lr = static_cast<T>(opt.learning_rate);
  const T wd = static_cast<T>(opt.weight_decay);
  const T mu = static_cast<T>(opt.momentum);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T> t = params[k].tensor;
    if (!t.has_grad()) throw ContractError("sgd_step: parameter '" + params[k].name + "' has no gradient");
    const auto g = t.grad();
    auto p = t.mutable_data();
    if (!use_momentum) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (g[i] + wd * p[i]);
    } else {
      auto& v = (*velocity)[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = mu * v[i] + (g[i] + wd * p[i]);
        p[i] -= lr * v[i];
      }
    }
  }
}

std::pair<std::vector<VolumePair>, std::vector<VolumePair>> split_pairs(std::vector<VolumePair> pairs,
                                                                        std::uint64_t seed) {
  if (pairs.empty()) throw ContractError("split_pairs: no pairs");
  if (pairs.size() == 1) return {pairs, pairs};
  std::mt19937_64 rng(seed);
  for (std::size_t i = pairs.size() - 1; i > 0; --i) std::swap(pairs[i], pairs[rng() % (i + 1)]);
  std::size_t n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(pairs.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, pairs.size() - 1);
  std::vector<VolumePair> train(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<VolumePair> val(pairs.begin() + static_cast<std::ptrdiff_t>(n_train), pairs.end());
  return {train, val};
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model) {
  Checkpoint c;
  c.config = model.config;
  for (const auto& p : model.params()) {
    const auto d = p.tensor.data();
    c.params.push_back({p.name, p.tensor.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return c;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  Model<T> m = build_model<T>(ckpt.config);
  if (m.params().size() != ckpt.params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, the model needs " +
                      std::to_string(m.params().size()));
  }
  for (const auto& stored : ckpt.params) {
    Tensor<T> t = m.store->find(stored.name);
    if (!t.defined()) throw FormatError("checkpoint parameter '" + stored.name + "' is not part of the model");
    if (t.shape() != stored.shape || stored.values.size() != t.numel()) {
      throw FormatError("checkpoint parameter '" + stored.name + "' has shape " + shape_str(stored.shape) +
                        ", expected " + shape_str(t.shape()));
    }
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(stored.values[i]);
  }
  return m;
}

namespace {

template <typename T>
struct CastPair {
  std::string name;
  Tensor<T> moving, fixed;
};

template <typename T>
std::vector<CastPair<T>> cast_pairs(const std::vector<VolumePair>& pairs, const ModelConfig& cfg) {
  const Shape expected{1, cfg.volume_shape[0], cfg.volume_shape[1], cfg.volume_shape[2]};
  std::vector<CastPair<T>> out;
  for (const auto& p : pairs) {
    for (const auto* v : {&p.moving, &p.fixed}) {
      if (v->shape() != expected) {
        throw ShapeError("pair '" + p.name + "': volume " + shape_str(v->shape()) + " does not match the configured " +
                         shape_str(expected));
      }
    }
    out.push_back({p.name, tensor_cast<T>(p.moving), tensor_cast<T>(p.fixed)});
  }
  return out;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("checkpoint RNG state is corrupt");
}

template <typename T>
std::vector<NamedArray> velocity_arrays(const Model<T>& model, const std::vector<std::vector<T>>& velocity) {
  std::vector<NamedArray> out;
  for (std::size_t k = 0; k < velocity.size(); ++k) {
    const auto& p = model.params()[k];
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(velocity[k].begin(), velocity[k].end())});
  }
  return out;
}

}  // namespace

template <typename T>
TrainResult train(const ModelConfig& cfg, const std::vector<VolumePair>& train_pairs,
                  const std::vector<VolumePair>& val_pairs, const TrainOptions& options) {
  cfg.validate();
  if (train_pairs.empty()) throw ContractError("train: at least one training pair is required");
  const auto train_set = cast_pairs<T>(train_pairs, cfg);
  const auto val_set = cast_pairs<T>(val_pairs.empty() ? train_pairs : val_pairs, cfg);

  TrainResult result;
  Model<T> model;
  std::vector<std::vector<T>> velocity;
  std::mt19937_64 rng(cfg.seed + 0x5eed);
  std::size_t start_epoch = 1;
  if (options.resume) {
    const Checkpoint& ck = *options.resume;
    if (to_json(ck.config) != to_json(cfg)) throw ConfigError("train: resume checkpoint was made with another config");
    model = model_from_checkpoint<T>(ck);
    for (const auto& v : ck.velocity) velocity.emplace_back(v.values.begin(), v.values.end());
    rng_from_string(rng, ck.rng_state);
    result.curve = ck.curve;
    result.best.best_val_ssim = ck.best_val_ssim;
    result.best.best_epoch = ck.best_epoch;
    start_epoch = ck.epoch + 1;
  } else {
    model = build_model<T>(cfg);
  }

  const std::size_t last_epoch = options.stop_after ? std::min(options.stop_after, cfg.optimizer.epochs)
                                                    : cfg.optimizer.epochs;
  const std::size_t batch = cfg.optimizer.batch_size;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);

    TrainingRecord rec;
    rec.epoch = epoch;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      const T inv = static_cast<T>(1.0 / static_cast<double>(b1 - b0));
      GradTape<T> tape;
      Tensor<T> loss;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& pr = train_set[order[k]];
        const auto field = forward(model, pr.moving, pr.fixed);
        const auto terms = composite_loss(pr.fixed, pr.moving, field, cfg.loss);
        if (!std::isfinite(static_cast<double>(terms.total.item()))) {
          std::ostringstream os;
          os << "non-finite loss at epoch " << epoch << " on pair '" << pr.name
             << "': total=" << terms.total.item() << " similarity=" << terms.similarity.item()
             << " smoothness=" << terms.smoothness.item() << " field_finite=" << (field.all_finite() ? "yes" : "no");
          throw NumericError(os.str());
        }
        rec.train_loss += static_cast<double>(terms.total.item());
        rec.train_ssim += ssim(terms.warped, pr.fixed);
        const auto scaled = scale(terms.total, inv);
        loss = loss.defined() ? add(loss, scaled) : scaled;
      }
      tape.backward(loss);
      sgd_step(model.params(), cfg.optimizer, &velocity);
    }
    rec.train_loss /= static_cast<double>(train_set.size());
    rec.train_ssim /= static_cast<double>(train_set.size());

    {
      NoGradScope<T> no_grad;
      for (const auto& pr : val_set) {
        const auto field = forward(model, pr.moving, pr.fixed);
        const auto terms = composite_loss(pr.fixed, pr.moving, field, cfg.loss);
        rec.val_loss += static_cast<double>(terms.total.item());
        rec.val_ssim += ssim(terms.warped, pr.fixed);
      }
      rec.val_loss /= static_cast<double>(val_set.size());
      rec.val_ssim /= static_cast<double>(val_set.size());
    }
    if (!std::isfinite(rec.val_loss) || !std::isfinite(rec.val_ssim)) {
      throw NumericError("non-finite validation metrics at epoch " + std::to_string(epoch));
    }
    result.curve.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    const bool improved = rec.val_ssim > result.best.best_val_ssim;
    if (improved) {
      result.best.best_val_ssim = rec.val_ssim;
      result.best.best_epoch = epoch;
    }
    Checkpoint snap = make_checkpoint(model);
    snap.velocity = velocity_arrays(model, velocity);
    snap.epoch = epoch;
    snap.rng_state = rng_to_string(rng);
    snap.curve = result.curve;
    snap.best_val_ssim = result.best.best_val_ssim;
    snap.best_epoch = result.best.best_epoch;
    if (improved) result.best = snap;
    result.last = std::move(snap);
  }
  if (result.last.params.empty()) {
    // Nothing left to run (resumed at the final epoch): report the input state.
    result.last = options.resume ? *options.resume : make_checkpoint(model);
  }
  return result;
}

TrainResult train_model(const ModelConfig& cfg, const std::vector<VolumePair>& train_pairs,
                        const std::vector<VolumePair>& val_pairs, const TrainOptions& options) {
  if (cfg.precision == 32) return train<float>(cfg, train_pairs, val_pairs, options);
  return train<double>(cfg, train_pairs, val_pairs, options);
}

RegistrationReport evaluate_registration(const Tensor<double>& moving, const Tensor<double>& fixed,
                                         const Tensor<double>& field, const LossConfig& loss) {
  NoGradScope<double> no_grad;
  const auto terms = composite_loss(fixed, moving, field, loss);
  RegistrationReport r;
  r.loss_total = terms.total.item();
  r.loss_sim = terms.similarity.item();
  r.loss_smooth = terms.smoothness.item();
  r.ncc = 1.0 - r.loss_sim;
  r.ssim = ssim(terms.warped, fixed);
  try {
    r.hd95 = hd95(mask_from_volume(terms.warped), mask_from_volume(fixed));
  } catch (const MetricUndefinedError&) {
    r.hd95 = std::numeric_limits<double>::quiet_NaN();
  }
  try {
    const auto js = jacobian_stats(field);
    r.sdlogj = js.sdlogj;
    r.nonpositive_jacobian_fraction = js.folding_fraction;
  } catch (const MetricUndefinedError&) {
    r.sdlogj = std::numeric_limits<double>::quiet_NaN();
    r.nonpositive_jacobian_fraction = 1.0;
  }
  return r;
}

namespace {

template <typename T>
Tensor<double> predict_field(const Checkpoint& ckpt, const Tensor<double>& moving, const Tensor<double>& fixed) {
  const Model<T> model = model_from_checkpoint<T>(ckpt);
  NoGradScope<T> no_grad;
  return tensor_cast<double>(forward(model, tensor_cast<T>(moving), tensor_cast<T>(fixed)));
}

}  // namespace

Registration register_pair(const Checkpoint& ckpt, const Tensor<double>& moving, const Tensor<double>& fixed) {
  const auto& vs = ckpt.config.volume_shape;
  const Shape expected{1, vs[0], vs[1], vs[2]};
  for (const auto* v : {&moving, &fixed}) {
    if (v->shape() != expected && v->shape() != Shape{vs[0], vs[1], vs[2]}) {
      throw ShapeError("register: checkpoint expects volumes of shape " + shape_str(expected) + ", got " +
                       shape_str(v->shape()));
    }
  }
  const auto m = moving.reshaped_copy(expected);
  const auto f = fixed.reshaped_copy(expected);
  Registration r;
  r.field = ckpt.config.precision == 32 ? predict_field<float>(ckpt, m, f) : predict_field<double>(ckpt, m, f);
  r.field.check_finite("predicted field");
  r.report = evaluate_registration(m, f, r.field, ckpt.config.loss);
  r.warped = warp_trilinear(m, r.field);
  return r;
}

#define FUSEREG_INSTANTIATE_TRAIN(T)                                                                       \
  template void sgd_step(const std::vector<Parameter<T>>&, const OptimizerConfig&, std::vector<std::vector<T>>*); \
  template Checkpoint make_checkpoint(const Model<T>&);                                                   \
  template Model<T> model_from_checkpoint(const Checkpoint&);                                             \
  template TrainResult train<T>(const ModelConfig&, const std::vector<VolumePair>&,                       \
                                const std::vector<VolumePair>&, const TrainOptions&);

FUSEREG_INSTANTIATE_TRAIN(float)
FUSEREG_INSTANTIATE_TRAIN(double)

#undef FUSEREG_INSTANTIATE_TRAIN

}  // namespace fusereg
