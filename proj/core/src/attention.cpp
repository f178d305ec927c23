#include "fusereg/attention.hpp"

#include <cmath>

namespace fusereg {

namespace {

void require_divisible(std::size_t d_model, std::size_t heads) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d_model) +
                      " is not divisible by heads " + std::to_string(heads));
  }
}

// [N, d] -> [h, N, d/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 2) throw ShapeError("attention expects [N, d] tokens, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  require_divisible(d, heads);
  return permute(reshape(x, Shape{n, heads, d / heads}), {1, 0, 2});
}

// [h, N, dh] -> [N, h*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t h = x.dim(0), n = x.dim(1), dh = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), Shape{n, h * dh});
}

}  // namespace

template <typename T>
AttentionParams<T> AttentionParams<T>::create_efficient(Initializer<T> init, std::size_t d_model,
                                                        std::size_t heads) {
  require_divisible(d_model, heads);
  AttentionParams p;
  p.heads = heads;
  p.query = Linear<T>::create(init.sub("query"), d_model, d_model);
  p.key = Linear<T>::create(init.sub("key"), d_model, d_model);
  p.value = Linear<T>::create(init.sub("value"), d_model, d_model);
  p.output = Linear<T>::create(init.sub("output"), d_model, d_model);
  return p;
}

template <typename T>
AttentionParams<T> AttentionParams<T>::create_channel(Initializer<T> init, std::size_t d_model,
                                                      std::size_t heads) {
  AttentionParams p = create_efficient(init, d_model, heads);
  const double d_head = static_cast<double>(d_model / heads);
  p.log_tau = init.constant("log_tau", {heads}, static_cast<T>(std::log(std::sqrt(d_head))));
  return p;
}

template <typename T>
Tensor<T> efficient_attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                    std::size_t heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("efficient attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const auto qh = softmax(split_heads(q, heads), -1);  // each query over its channels
  const auto kh = softmax(split_heads(k, heads), 1);   // each key channel over positions
  const auto vh = split_heads(v, heads);
  const auto context = matmul(transpose(kh), vh);      // [h, dh, dh]
  return merge_heads(matmul(qh, context));
}

template <typename T>
Tensor<T> channel_attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  std::size_t heads, const Tensor<T>& log_tau) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("channel attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (log_tau.numel() != heads) {
    throw ShapeError("channel attention: log_tau has " + std::to_string(log_tau.numel()) +
                     " entries for " + std::to_string(heads) + " heads");
  }
  const auto qh = split_heads(q, heads);
  const auto kh = split_heads(k, heads);
  const auto vh = split_heads(v, heads);
  const auto inv_tau = reshape(exp(neg(log_tau)), Shape{heads, 1, 1});
  const auto logits = mul(matmul(transpose(kh), qh), inv_tau);  // [h, dh, dh]
  const auto mixing = softmax(logits, 1);
  return merge_heads(matmul(vh, mixing));
}

template <typename T>
Tensor<T> efficient_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  return p.output(efficient_attention_heads(p.query(x), p.key(x), p.value(x), p.heads));
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  return p.output(channel_attention_heads(p.query(x), p.key(x), p.value(x), p.heads, p.log_tau));
}

template <typename T>
MixFfnParams<T> MixFfnParams<T>::create(Initializer<T> init, std::size_t d_model,
                                        std::size_t expansion, std::size_t kernel) {
  const std::size_t hidden = d_model * expansion;
  MixFfnParams p;
  p.fc_in = Linear<T>::create(init.sub("fc_in"), d_model, hidden);
  p.depthwise = Conv3d<T>::create(init.sub("depthwise"), hidden, hidden, kernel,
                                  Conv3dOptions::same(kernel, 1, hidden));
  p.fc_out = Linear<T>::create(init.sub("fc_out"), hidden, d_model);
  return p;
}

template <typename T>
Tensor<T> mix_ffn(const Tensor<T>& x, const Spatial& spatial, const MixFfnParams<T>& p) {
  if (x.rank() != 2 || x.dim(0) != spatial[0] * spatial[1] * spatial[2]) {
    throw ShapeError("mix_ffn: tokens " + shape_str(x.shape()) + " do not match spatial shape " +
                     shape_str(Shape{spatial[0], spatial[1], spatial[2]}));
  }
  const auto hidden = tokens_to_volume(p.fc_in(x), spatial);
  return p.fc_out(volume_to_tokens(gelu(p.depthwise(hidden))));
}

template <typename T>
DualBlockParams<T> DualBlockParams<T>::create(Initializer<T> init, const DualBlockOptions& o) {
  if (!o.efficient_enabled && !o.channel_enabled) {
    throw ConfigError("dual attention block needs at least one of efficient/channel attention");
  }
  DualBlockParams p;
  if (o.efficient_enabled) p.efficient = AttentionParams<T>::create_efficient(init.sub("ea"), o.d_model, o.heads);
  p.norm1 = LayerNorm<T>::create(init.sub("norm1"), o.d_model);
  p.mlp1 = MixFfnParams<T>::create(init.sub("mlp1"), o.d_model, o.ffn_expansion, o.ffn_kernel);
  if (o.channel_enabled) p.channel = AttentionParams<T>::create_channel(init.sub("ca"), o.d_model, o.heads);
  p.norm2 = LayerNorm<T>::create(init.sub("norm2"), o.d_model);
  p.mlp2 = MixFfnParams<T>::create(init.sub("mlp2"), o.d_model, o.ffn_expansion, o.ffn_kernel);
  return p;
}

template <typename T>
DualBlockTrace<T> dual_attention_block_trace(const Tensor<T>& x, const Spatial& spatial,
                                             const DualBlockParams<T>& p) {
  DualBlockTrace<T> t;
  const auto ea = p.efficient ? efficient_attention(x, *p.efficient) : x;
  t.ea_block = add(ea, x);
  t.m1 = mix_ffn(p.norm1(t.ea_block), spatial, p.mlp1);
  const auto ca_in = add(t.ea_block, t.m1);
  const auto ca = p.channel ? channel_attention(ca_in, *p.channel) : ca_in;
  t.ca_block = add(ca, t.m1);
  t.m2 = mix_ffn(p.norm2(t.ca_block), spatial, p.mlp2);
  t.output = add(t.ca_block, t.m2);
  return t;
}

#define FUSEREG_INSTANTIATE_ATTENTION(T)                                                        \
  template struct AttentionParams<T>;                                                          \
  template struct MixFfnParams<T>;                                                             \
  template struct DualBlockParams<T>;                                                          \
  template Tensor<T> efficient_attention_heads(const Tensor<T>&, const Tensor<T>&,             \
                                               const Tensor<T>&, std::size_t);                 \
  template Tensor<T> channel_attention_heads(const Tensor<T>&, const Tensor<T>&,               \
                                             const Tensor<T>&, std::size_t, const Tensor<T>&); \
  template Tensor<T> efficient_attention(const Tensor<T>&, const AttentionParams<T>&);         \
  template Tensor<T> channel_attention(const Tensor<T>&, const AttentionParams<T>&);           \
  template Tensor<T> mix_ffn(const Tensor<T>&, const Spatial&, const MixFfnParams<T>&);        \
  template DualBlockTrace<T> dual_attention_block_trace(const Tensor<T>&, const Spatial&,      \
                                                        const DualBlockParams<T>&);

FUSEREG_INSTANTIATE_ATTENTION(float)
FUSEREG_INSTANTIATE_ATTENTION(double)

#undef FUSEREG_INSTANTIATE_ATTENTION

}  // namespace fusereg
