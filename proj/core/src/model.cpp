#include "fusereg/model.hpp"

#include <algorithm>

namespace fusereg {

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  m.store = std::make_shared<ParamStore<T>>();
  std::mt19937_64 rng(cfg.seed);
  Initializer<T> root(*m.store, rng);
  m.encoder = EncoderParams<T>::create(root.sub("encoder"), cfg);
  m.decoder = DecoderParams<T>::create(root.sub("decoder"), cfg);
  return m;
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& moving, const Tensor<T>& fixed) {
  const auto& vs = model.config.volume_shape;
  const Shape expected{1, vs[0], vs[1], vs[2]};
  const auto m = as_single_channel(moving, "moving");
  if (m.shape() != expected) {
    throw ShapeError("model expects volumes of shape " + shape_str(expected) + ", got " + shape_str(m.shape()));
  }
  const auto pyr = encoder_forward(m, fixed, model.config, model.encoder);
  return decoder_forward(pyr, model.config, model.decoder);
}

namespace {

std::string group_of(const std::string& name) {
  auto starts = [&](const std::string& p) { return name.rfind(p, 0) == 0; };
  if (starts("encoder.")) return "Encoder";
  for (const char* kind : {"dae", "lka"}) {
    const std::string prefix = std::string("decoder.") + kind;
    if (!starts(prefix)) continue;
    const auto end = name.find('.', prefix.size());
    const std::size_t idx = std::stoul(name.substr(prefix.size(), end - prefix.size()));
    return std::string(kind[0] == 'd' ? "DAE-Former " : "LKA-Former ") + std::to_string(idx + 1);
  }
  return "Other";
}

}  // namespace

template <typename T>
ParamTable param_table(const Model<T>& model) {
  ParamTable t;
  for (const auto& p : model.params()) {
    const auto g = group_of(p.name);
    auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const ParamRow& r) { return r.module == g; });
    if (it == t.rows.end()) {
      t.rows.push_back({g, 0});
      it = t.rows.end() - 1;
    }
    it->count += p.tensor.numel();
    t.total += p.tensor.numel();
  }
  // "Other" last, the remaining rows keep construction order.
  std::stable_partition(t.rows.begin(), t.rows.end(), [](const ParamRow& r) { return r.module != "Other"; });
  return t;
}

ParamTable count_params(const ModelConfig& cfg) { return param_table(build_model<double>(cfg)); }

template struct Model<float>;
template struct Model<double>;
template Model<float> build_model(const ModelConfig&);
template Model<double> build_model(const ModelConfig&);
template Tensor<float> forward(const Model<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> forward(const Model<double>&, const Tensor<double>&, const Tensor<double>&);
template ParamTable param_table(const Model<float>&);
template ParamTable param_table(const Model<double>&);

}  // namespace fusereg
