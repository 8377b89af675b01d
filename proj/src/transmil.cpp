#include <cmath>

#include "milsurv/error.hpp"
#include "milsurv/heads.hpp"
#include "milsurv/ops.hpp"

namespace milsurv {
namespace {

template <class T>
void check_attention(const Tensor<T>& x, const AttentionWeights<T>& w, const TransMilConfig& config) {
  const std::size_t hidden = x.cols(), inner = config.inner_dim();
  if (!(w.qkv.rows() == hidden && w.qkv.cols() == 3 * inner)) fail(ErrorKind::dimension, "attention: qkv weight " + shape_string(w.qkv.shape()) + " does not match hidden " +
              std::to_string(hidden) + " and inner " + std::to_string(inner));
  if (!(w.out_w.rows() == inner && w.out_w.cols() == hidden)) fail(ErrorKind::dimension, "attention: output weight " + shape_string(w.out_w.shape()));
  if (!(w.residual.rows() == config.heads && w.residual.cols() == config.residual_kernel)) fail(ErrorKind::dimension, "attention: residual kernel " + shape_string(w.residual.shape()));
}

/// Splits qkv projections into per-head (q·scale, k, v) blocks.
template <class T>
struct HeadViews {
  std::vector<Tensor<T>> q, k, v;
  Tensor<T> v_all;
};

template <class T>
HeadViews<T> project(Tape<T>& tape, const Tensor<T>& x, const AttentionWeights<T>& w, const TransMilConfig& config) {
  const std::size_t inner = config.inner_dim(), dh = config.head_dim;
  const auto qkv = ops::matmul(tape, x, w.qkv);
  const auto scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  HeadViews<T> views;
  const auto q_all = ops::affine(tape, ops::slice_cols(tape, qkv, 0, inner), scale, T{0});
  const auto k_all = ops::slice_cols(tape, qkv, inner, inner);
  views.v_all = ops::slice_cols(tape, qkv, 2 * inner, inner);
  for (std::size_t h = 0; h < config.heads; ++h) {
    views.q.push_back(ops::slice_cols(tape, q_all, h * dh, dh));
    views.k.push_back(ops::slice_cols(tape, k_all, h * dh, dh));
    views.v.push_back(ops::slice_cols(tape, views.v_all, h * dh, dh));
  }
  return views;
}

template <class T>
Tensor<T> merge(Tape<T>& tape, const std::vector<Tensor<T>>& per_head, const HeadViews<T>& views,
                const AttentionWeights<T>& w, const TransMilConfig& config) {
  auto merged = ops::concat_cols(tape, std::span<const Tensor<T>>(per_head));
  merged = ops::add(tape, merged, ops::depthwise_conv1d(tape, views.v_all, w.residual, config.head_dim));
  return ops::linear(tape, merged, w.out_w, w.out_b);
}

}  // namespace

template <class T>
Tensor<T> iterative_pinv(Tape<T>& tape, const Tensor<T>& a, std::size_t iterations) {
  auto z = ops::pinv_init(tape, a);
  for (std::size_t i = 0; i < iterations; ++i) {
    const auto az = ops::matmul(tape, a, z);
    const auto inner = ops::scaled_identity_minus(tape, T{7}, az);
    const auto middle = ops::scaled_identity_minus(tape, T{15}, ops::matmul(tape, az, inner));
    const auto outer = ops::scaled_identity_minus(tape, T{13}, ops::matmul(tape, az, middle));
    z = ops::affine(tape, ops::matmul(tape, z, outer), T(0.25), T{0});
  }
  return z;
}

template <class T>
Tensor<T> nystrom_attention(Tape<T>& tape, const Tensor<T>& x, const AttentionWeights<T>& w,
                            const TransMilConfig& config) {
  check_attention(x, w, config);
  const std::size_t n = x.rows();
  const std::size_t landmarks = std::min(config.landmarks, n);
  const std::size_t pad = (landmarks - n % landmarks) % landmarks;

  Tensor<T> seq = x;
  if (pad > 0) {
    const std::vector<Tensor<T>> parts{Tensor<T>({pad, x.cols()}), x};
    seq = ops::concat_rows(tape, std::span<const Tensor<T>>(parts));
  }
  const std::size_t padded = n + pad;
  const std::size_t group = padded / landmarks;

  // Landmarks are means of consecutive groups of `group` tokens.
  Tensor<T> pool({landmarks, padded});
  {
    auto p = pool.values();
    const T inv = T{1} / static_cast<T>(group);
    for (std::size_t j = 0; j < landmarks; ++j)
      for (std::size_t t = 0; t < group; ++t) p[j * padded + j * group + t] = inv;
  }

  const auto views = project(tape, seq, w, config);
  std::vector<Tensor<T>> per_head;
  for (std::size_t h = 0; h < config.heads; ++h) {
    const auto q_land = ops::matmul(tape, pool, views.q[h]);
    const auto k_land = ops::matmul(tape, pool, views.k[h]);
    const auto k_land_t = ops::transpose(tape, k_land);
    const auto kernel1 = ops::softmax(tape, ops::matmul(tape, views.q[h], k_land_t), 1);
    const auto kernel2 = ops::softmax(tape, ops::matmul(tape, q_land, k_land_t), 1);
    const auto kernel3 = ops::softmax(tape, ops::matmul(tape, q_land, ops::transpose(tape, views.k[h])), 1);
    const auto kernel2_inv = iterative_pinv(tape, kernel2, config.pinv_iterations);
    const auto context = ops::matmul(tape, kernel3, views.v[h]);
    per_head.push_back(ops::matmul(tape, ops::matmul(tape, kernel1, kernel2_inv), context));
  }
  auto out = merge(tape, per_head, views, w, config);
  return pad > 0 ? ops::slice_rows(tape, out, pad, n) : out;
}

template <class T>
Tensor<T> exact_attention(Tape<T>& tape, const Tensor<T>& x, const AttentionWeights<T>& w,
                          const TransMilConfig& config) {
  check_attention(x, w, config);
  const auto views = project(tape, x, w, config);
  std::vector<Tensor<T>> per_head;
  for (std::size_t h = 0; h < config.heads; ++h) {
    const auto weights = ops::softmax(tape, ops::matmul(tape, views.q[h], ops::transpose(tape, views.k[h])), 1);
    per_head.push_back(ops::matmul(tape, weights, views.v[h]));
  }
  return merge(tape, per_head, views, w, config);
}

template <class T>
TransMilHead<T>::TransMilHead(HeadConfig config, Rng& rng) : MilHead<T>(std::move(config)) {
  const auto& c = this->config();
  require(c.kind == HeadKind::transmil, ErrorKind::configuration, "transmil head kind");
  const auto& t = c.transmil;
  const std::size_t H = c.hidden_dim, inner = t.inner_dim();
  auto bound = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  embed_w_ = this->add_parameter("embed.weight", {c.input_dim, H}, bound(c.input_dim), true, rng);
  embed_b_ = this->add_parameter("embed.bias", {H}, 0.0, false, rng);
  cls_token_ = this->add_parameter("cls_token", {1, H}, 0.02, false, rng);
  for (std::size_t l = 0; l < t.layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    Layer layer;
    layer.norm_gain = this->add_constant_parameter(prefix + "norm.gain", {H}, T{1});
    layer.norm_shift = this->add_constant_parameter(prefix + "norm.shift", {H}, T{0});
    layer.attn.qkv = this->add_parameter(prefix + "attn.qkv.weight", {H, 3 * inner}, bound(H), true, rng);
    layer.attn.out_w = this->add_parameter(prefix + "attn.out.weight", {inner, H}, bound(inner), true, rng);
    layer.attn.out_b = this->add_parameter(prefix + "attn.out.bias", {H}, 0.0, false, rng);
    layer.attn.residual =
        this->add_parameter(prefix + "attn.residual.weight", {t.heads, t.residual_kernel}, bound(t.residual_kernel),
                            true, rng);
    layers_.push_back(std::move(layer));
  }
  for (std::size_t k : {7, 5, 3}) {
    const std::string prefix = "ppeg.conv" + std::to_string(k) + ".";
    PositionConv conv{k, {}, {}};
    conv.weight = this->add_parameter(prefix + "weight", {H, k * k}, bound(k * k), true, rng);
    conv.bias = this->add_parameter(prefix + "bias", {H}, 0.0, false, rng);
    ppeg_.push_back(std::move(conv));
  }
  norm_gain_ = this->add_constant_parameter("norm.gain", {H}, T{1});
  norm_shift_ = this->add_constant_parameter("norm.shift", {H}, T{0});
  cls_w_ = this->add_parameter("classifier.weight", {H, c.bins}, bound(H), true, rng);
  cls_b_ = this->add_parameter("classifier.bias", {c.bins}, 0.0, false, rng);
}

template <class T>
Tensor<T> TransMilHead<T>::compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const {
  const auto& c = this->config();
  auto h = ops::relu(tape, ops::linear(tape, bag, embed_w_, embed_b_));
  h = ops::dropout(tape, h, c.dropout, rng, training);

  // Square the instance count by cyclically repeating leading instances.
  const std::size_t m = h.rows();
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(m))));
  const std::size_t squared = side * side;
  if (squared > m) {
    std::vector<std::size_t> index(squared);
    for (std::size_t i = 0; i < squared; ++i) index[i] = i % m;
    h = ops::gather_rows(tape, h, std::move(index));
  }

  const std::vector<Tensor<T>> with_cls{cls_token_, h};
  auto x = ops::concat_rows(tape, std::span<const Tensor<T>>(with_cls));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const auto normed = ops::layer_norm(tape, x, layer.norm_gain, layer.norm_shift);
    x = ops::add(tape, x, nystrom_attention(tape, normed, layer.attn, c.transmil));
    if (l == 0) {
      const auto cls = ops::slice_rows(tape, x, 0, 1);
      const auto grid = ops::slice_rows(tape, x, 1, squared);
      auto encoded = grid;
      for (const auto& conv : ppeg_) {
        encoded = ops::add(tape, encoded, ops::depthwise_conv2d(tape, grid, side, conv.weight, conv.kernel, conv.bias));
      }
      const std::vector<Tensor<T>> parts{cls, encoded};
      x = ops::concat_rows(tape, std::span<const Tensor<T>>(parts));
    }
  }
  x = ops::layer_norm(tape, x, norm_gain_, norm_shift_);
  return ops::linear(tape, ops::slice_rows(tape, x, 0, 1), cls_w_, cls_b_);
}

template class TransMilHead<float>;
template class TransMilHead<double>;

#define MILSURV_INSTANTIATE_ATTENTION(T)                                                                      \
  template Tensor<T> iterative_pinv(Tape<T>&, const Tensor<T>&, std::size_t);                                \
  template Tensor<T> nystrom_attention(Tape<T>&, const Tensor<T>&, const AttentionWeights<T>&,               \
                                       const TransMilConfig&);                                               \
  template Tensor<T> exact_attention(Tape<T>&, const Tensor<T>&, const AttentionWeights<T>&, const TransMilConfig&);

MILSURV_INSTANTIATE_ATTENTION(float)
MILSURV_INSTANTIATE_ATTENTION(double)

#undef MILSURV_INSTANTIATE_ATTENTION

}  // namespace milsurv
