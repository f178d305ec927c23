#include "fusereg/decoder.hpp"

#include <string>

namespace fusereg {

template <typename T>
LkaParams<T> LkaParams<T>::create(Initializer<T> init, std::size_t channels, std::size_t kernel,
                                  std::size_t dilated_kernel, std::size_t dilation, bool zero_init) {
  LkaParams p;
  p.depthwise = Conv3d<T>::create(init.sub("depthwise"), channels, channels, kernel,
                                  Conv3dOptions::same(kernel, 1, channels), zero_init);
  p.dilated = Conv3d<T>::create(init.sub("dilated"), channels, channels, dilated_kernel,
                                Conv3dOptions::same(dilated_kernel, dilation, channels), zero_init);
  p.pointwise = Conv3d<T>::create(init.sub("pointwise"), channels, channels, 1, {}, zero_init);
  return p;
}

template <typename T>
Tensor<T> lka_block(const Tensor<T>& x, const LkaParams<T>& p) {
  const auto attn = p.pointwise(p.dilated(p.depthwise(x)));
  return add(x, mul(attn, x));
}

template <typename T>
FusionParams<T> FusionParams<T>::create(Initializer<T> init, std::size_t channels, std::size_t kernel) {
  FusionParams p;
  p.global = Linear<T>::create(init.sub("global"), channels, channels);
  p.local_depthwise = Conv3d<T>::create(init.sub("local_depthwise"), channels, channels, kernel,
                                        Conv3dOptions::same(kernel, 1, channels));
  p.local_pointwise = Conv3d<T>::create(init.sub("local_pointwise"), channels, channels, 1, {});
  p.local_dilated = Conv3d<T>::create(init.sub("local_dilated"), channels, channels, kernel,
                                      Conv3dOptions::same(kernel, 2, channels));
  p.local_reduce = Conv3d<T>::create(init.sub("local_reduce"), channels, channels, 1, {});
  p.norm = LayerNorm<T>::create(init.sub("norm"), channels);
  p.select = Conv3d<T>::create(init.sub("select"), channels, channels, 1, {});
  p.gate = Conv3d<T>::create(init.sub("gate"), channels, channels, 1, {});
  p.project = Conv3d<T>::create(init.sub("project"), channels, channels, 1, {});
  return p;
}

template <typename T>
Tensor<T> global_extract(const Tensor<T>& x2, const FusionParams<T>& p) {
  const std::size_t c = x2.dim(0);
  const auto avg = reshape(global_pool(x2, PoolMode::Avg), Shape{1, c});
  const auto mx = reshape(global_pool(x2, PoolMode::Max), Shape{1, c});
  return reshape(add(p.global(avg), p.global(mx)), Shape{c});
}

template <typename T>
Tensor<T> feature_extract(const Tensor<T>& x1, const FusionParams<T>& p) {
  return p.local_reduce(p.local_dilated(p.local_pointwise(p.local_depthwise(x1))));
}

template <typename T>
FusionTrace<T> nested_attention_fusion_trace(const Tensor<T>& x1, const Tensor<T>& x2, const FusionParams<T>& p) {
  if (x1.rank() != 4 || x1.shape() != x2.shape()) {
    throw ShapeError("fusion: decoder features " + shape_str(x1.shape()) + " and skip " + shape_str(x2.shape()) +
                     " must match; upsample and project the decoder features first");
  }
  const std::size_t c = x1.dim(0);
  FusionTrace<T> t;
  const auto ctx = reshape(global_extract(x2, p), Shape{c, 1, 1, 1});
  t.u = p.norm(add(feature_extract(x1, p), ctx), 0);
  t.selection = softmax(p.select(t.u), 0);
  t.x1_sel = add(mul(t.selection, x1), x1);
  t.x2_sel = add(mul(t.selection, x2), x2);
  t.u_fused = mul(mul(t.x1_sel, sigmoid(t.x2_sel)), mul(t.x2_sel, sigmoid(t.x1_sel)));
  t.output = p.project(mul(sigmoid(p.gate(t.u_fused)), x1));
  return t;
}

template <typename T>
DecoderParams<T> DecoderParams<T>::create(Initializer<T> init, const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  const auto& d = cfg.decoder;
  const std::size_t levels = e.num_stages();
  if (d.dae_former_count + d.lka_count != levels) {
    throw ConfigError("decoder: " + std::to_string(d.dae_former_count) + " DAE-Former + " +
                      std::to_string(d.lka_count) + " LKA blocks do not cover " + std::to_string(levels) +
                      " levels");
  }
  DecoderParams p;
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t level = levels - 1 - i;
    const std::size_t c = e.stage_channels[level];
    const bool is_dae = i < d.dae_former_count;
    const std::string name = is_dae ? "dae" + std::to_string(i) : "lka" + std::to_string(i - d.dae_former_count);
    auto si = init.sub(name);
    DecoderStageParams<T> st;
    st.level = level;
    if (is_dae) {
      DualBlockOptions bo;
      bo.d_model = c;
      bo.heads = cfg.attention.heads;
      bo.ffn_expansion = cfg.attention.ffn_expansion;
      bo.ffn_kernel = cfg.attention.depthwise_kernel;
      bo.efficient_enabled = cfg.attention.efficient;
      bo.channel_enabled = cfg.attention.channel;
      st.dae = DualBlockParams<T>::create(si.sub("block"), bo);
    } else {
      st.lka = LkaParams<T>::create(si.sub("block"), c, d.lka_kernel, d.lka_dilated_kernel, d.lka_dilation);
    }
    if (level > 0) {
      const std::size_t c_next = e.stage_channels[level - 1];
      st.project = Conv3d<T>::create(si.sub("project"), c, c_next, 1, {});
      st.fusion = FusionParams<T>::create(si.sub("fusion"), c_next, cfg.attention.depthwise_kernel);
    }
    p.stages.push_back(std::move(st));
  }
  p.head = Conv3d<T>::create(init.sub("head"), e.stage_channels.front(), 3, 1, {}, true);
  return p;
}

template <typename T>
Tensor<T> decoder_forward(const FeaturePyramid<T>& pyr, const ModelConfig& cfg, const DecoderParams<T>& p) {
  const std::size_t levels = pyr.size();
  if (levels == 0 || p.stages.size() != levels || cfg.encoder.num_stages() != levels) {
    throw ConfigError("decoder: pyramid has " + std::to_string(levels) + " levels, decoder has " +
                      std::to_string(p.stages.size()) + " stages");
  }
  Tensor<T> x = pyr[levels - 1].feature;
  for (const auto& st : p.stages) {
    const auto& lvl = pyr[st.level];
    if (x.shape()[0] != lvl.feature.dim(0) || x.dim(1) != lvl.spatial[0]) {
      throw ConfigError("decoder: features " + shape_str(x.shape()) + " do not match level " +
                        std::to_string(st.level) + " " + shape_str(lvl.feature.shape()));
    }
    if (st.dae) {
      x = tokens_to_volume(dae_former_block(volume_to_tokens(x), lvl.spatial, *st.dae), lvl.spatial);
    } else {
      x = lka_block(x, *st.lka);
    }
    x = upsample_trilinear(x, cfg.encoder.stage_strides[st.level]);
    if (st.level > 0) x = nested_attention_fusion((*st.project)(x), pyr[st.level - 1].feature, *st.fusion);
  }
  const Tensor<T> ones(Shape{x.dim(0)}, T(1)), zeros(Shape{x.dim(0)}, T(0));
  return p.head(layernorm(x, ones, zeros, 0, 1e-5));
}

#define FUSEREG_INSTANTIATE_DECODER(T)                                                              \
  template struct LkaParams<T>;                                                                    \
  template struct FusionParams<T>;                                                                 \
  template struct DecoderParams<T>;                                                                \
  template Tensor<T> lka_block(const Tensor<T>&, const LkaParams<T>&);                             \
  template Tensor<T> global_extract(const Tensor<T>&, const FusionParams<T>&);                     \
  template Tensor<T> feature_extract(const Tensor<T>&, const FusionParams<T>&);                    \
  template FusionTrace<T> nested_attention_fusion_trace(const Tensor<T>&, const Tensor<T>&,        \
                                                        const FusionParams<T>&);                   \
  template Tensor<T> decoder_forward(const FeaturePyramid<T>&, const ModelConfig&, const DecoderParams<T>&);

FUSEREG_INSTANTIATE_DECODER(float)
FUSEREG_INSTANTIATE_DECODER(double)

#undef FUSEREG_INSTANTIATE_DECODER

}  // namespace fusereg
