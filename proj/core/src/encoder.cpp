#include "fusereg/encoder.hpp"

#include <string>

namespace fusereg {

template <typename T>
PatchEmbedParams<T> PatchEmbedParams<T>::create(Initializer<T> init, std::size_t in_channels,
                                                std::size_t out_channels, std::size_t kernel,
                                                std::size_t stride) {
  if (kernel <= stride) {
    throw ConfigError("patch embedding: kernel " + std::to_string(kernel) + " must exceed stride " +
                      std::to_string(stride) + " for overlapping patches");
  }
  PatchEmbedParams p;
  p.stride = stride;
  p.kernel = kernel;
  Conv3dOptions opt;
  opt.stride = stride;
  opt.pad_before = opt.pad_after = kernel / 2;
  p.conv = Conv3d<T>::create(init.sub("conv"), in_channels, out_channels, kernel, opt);
  p.norm = LayerNorm<T>::create(init.sub("norm"), out_channels);
  return p;
}

template <typename T>
Tensor<T> overlap_patch_embed(const Tensor<T>& x, const PatchEmbedParams<T>& p) {
  return p.norm(p.conv(x), 0);
}

std::vector<Spatial> pyramid_extents(const EncoderConfig& cfg, const Spatial& input) {
  const std::size_t total = cfg.total_stride();
  for (std::size_t a = 0; a < 3; ++a) {
    if (input[a] == 0 || input[a] % total != 0) {
      throw ConfigError("encoder input " + shape_str(Shape{input[0], input[1], input[2]}) +
                        ": every extent must be a multiple of " + std::to_string(total) +
                        " (product of stage strides)");
    }
  }
  std::vector<Spatial> out;
  Spatial s = input;
  for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
    for (auto& e : s) e /= cfg.stage_strides[i];
    out.push_back(s);
  }
  return out;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::create(Initializer<T> init, const ModelConfig& cfg, std::size_t in_channels) {
  const auto& e = cfg.encoder;
  EncoderParams p;
  std::size_t c_in = in_channels;
  for (std::size_t i = 0; i < e.num_stages(); ++i) {
    auto si = init.sub("stage" + std::to_string(i));
    const std::size_t c = e.stage_channels[i];
    EncoderStageParams<T> st;
    st.embed = PatchEmbedParams<T>::create(si.sub("embed"), c_in, c, e.patch_kernels[i], e.stage_strides[i]);
    DualBlockOptions bo;
    bo.d_model = c;
    bo.heads = cfg.attention.heads;
    bo.ffn_expansion = cfg.attention.ffn_expansion;
    bo.ffn_kernel = cfg.attention.depthwise_kernel;
    bo.efficient_enabled = cfg.attention.efficient;
    bo.channel_enabled = cfg.attention.channel;
    for (std::size_t b = 0; b < e.blocks_per_stage; ++b) {
      st.blocks.push_back(DualBlockParams<T>::create(si.sub("block" + std::to_string(b)), bo));
    }
    st.out_norm = LayerNorm<T>::create(si.sub("out_norm"), c);
    p.stages.push_back(std::move(st));
    c_in = c;
  }
  return p;
}

template <typename T>
FeaturePyramid<T> encoder_forward(const Tensor<T>& input, const ModelConfig& cfg, const EncoderParams<T>& p) {
  if (input.rank() != 4) throw ShapeError("encoder expects [C, D, H, W], got " + shape_str(input.shape()));
  if (p.stages.size() != cfg.encoder.num_stages()) {
    throw ConfigError("encoder parameters have " + std::to_string(p.stages.size()) + " stages, config has " +
                      std::to_string(cfg.encoder.num_stages()));
  }
  const auto extents = pyramid_extents(cfg.encoder, {input.dim(1), input.dim(2), input.dim(3)});
  FeaturePyramid<T> pyr;
  Tensor<T> x = input;
  for (std::size_t i = 0; i < p.stages.size(); ++i) {
    const auto& st = p.stages[i];
    const Tensor<T> embedded = overlap_patch_embed(x, st.embed);
    const Spatial spatial{embedded.dim(1), embedded.dim(2), embedded.dim(3)};
    if (spatial != extents[i]) {
      throw ConfigError("encoder stage " + std::to_string(i) + " produced " + shape_str(embedded.shape()) +
                        "; check patch kernels against strides");
    }
    Tensor<T> tokens = volume_to_tokens(embedded);
    for (const auto& block : st.blocks) tokens = dual_attention_block(tokens, spatial, block);
    x = tokens_to_volume(st.out_norm(tokens), spatial);
    pyr.levels.push_back({x, spatial});
  }
  return pyr;
}

template <typename T>
Tensor<T> as_single_channel(const Tensor<T>& v, const char* what) {
  if (v.rank() == 3) return reshape(v, Shape{1, v.dim(0), v.dim(1), v.dim(2)});
  if (v.rank() == 4 && v.dim(0) == 1) return v;
  throw ShapeError(std::string(what) + ": expected a [D,H,W] or [1,D,H,W] volume, got " + shape_str(v.shape()));
}

template <typename T>
FeaturePyramid<T> encoder_forward(const Tensor<T>& moving, const Tensor<T>& fixed, const ModelConfig& cfg,
                                  const EncoderParams<T>& p) {
  const auto m = as_single_channel(moving, "moving");
  const auto f = as_single_channel(fixed, "fixed");
  if (m.shape() != f.shape()) {
    throw ShapeError("moving " + shape_str(m.shape()) + " and fixed " + shape_str(f.shape()) + " differ");
  }
  const Tensor<T> parts[] = {m, f};
  return encoder_forward(concat<T>(parts, 0), cfg, p);
}

#define FUSEREG_INSTANTIATE_ENCODER(T)                                                                 \
  template struct PatchEmbedParams<T>;                                                                \
  template struct EncoderParams<T>;                                                                   \
  template Tensor<T> overlap_patch_embed(const Tensor<T>&, const PatchEmbedParams<T>&);               \
  template FeaturePyramid<T> encoder_forward(const Tensor<T>&, const ModelConfig&, const EncoderParams<T>&); \
  template FeaturePyramid<T> encoder_forward(const Tensor<T>&, const Tensor<T>&, const ModelConfig&,  \
                                             const EncoderParams<T>&);                                \
  template Tensor<T> as_single_channel(const Tensor<T>&, const char*);

FUSEREG_INSTANTIATE_ENCODER(float)
FUSEREG_INSTANTIATE_ENCODER(double)

#undef FUSEREG_INSTANTIATE_ENCODER

}  // namespace fusereg
