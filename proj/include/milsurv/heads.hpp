#pragma once

// Bag-level MIL networks mapping an [m × D] bag to a [1 × B] row of time-bin
// logits. Layer shapes are fixed so that parameter counts at D = 1024 with
// the default config are:
//   MeanMIL / MaxMIL  526,852
//   ABMIL             592,645
//   TransMIL        2,673,172

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "milsurv/rng.hpp"
#include "milsurv/tensor.hpp"

namespace milsurv {

enum class HeadKind { mean, max, abmil, transmil };

HeadKind parse_head_kind(std::string_view name);
std::string to_string(HeadKind kind);

struct TransMilConfig {
  std::size_t layers = 2;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  std::size_t landmarks = 256;
  std::size_t pinv_iterations = 6;
  std::size_t residual_kernel = 33;

  std::size_t inner_dim() const { return heads * head_dim; }
};

struct HeadConfig {
  HeadKind kind = HeadKind::mean;
  std::size_t input_dim = 1024;
  std::size_t hidden_dim = 512;
  std::size_t attn_dim = 128;
  std::size_t bins = 4;
  double dropout = 0.25;
  TransMilConfig transmil;

  /// Throws a configuration error; bins other than 4 are rejected.
  void validate() const;
};

void to_json(nlohmann::json& j, const HeadConfig& config);
void from_json(const nlohmann::json& j, HeadConfig& config);

/// Trainable scalars implied by the config, from per-layer formulas.
std::size_t parameter_count(const HeadConfig& config);

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool regularized = false;  // weight matrices and kernels; excludes biases, norms, class token
};

template <class T>
class MilHead {
 public:
  explicit MilHead(HeadConfig config);
  virtual ~MilHead() = default;
  MilHead(const MilHead&) = delete;
  MilHead& operator=(const MilHead&) = delete;

  const HeadConfig& config() const { return config_; }

  /// Bag logits [1 × B]. Dropout is active only when `training`; evaluation
  /// mode does not touch `rng`.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const;

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  const Parameter<T>& parameter(std::string_view name) const;
  std::size_t parameter_size() const;
  void zero_grad();

 protected:
  virtual Tensor<T> compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const = 0;

  /// Uniform(−bound, bound) init; bound 0 gives zeros.
  Tensor<T> add_parameter(std::string name, Shape shape, double bound, bool regularized, Rng& rng);
  Tensor<T> add_constant_parameter(std::string name, Shape shape, T value);

 private:
  HeadConfig config_;
  std::vector<Parameter<T>> params_;
};

/// MeanMIL / MaxMIL: per-instance Linear(D→H) → ReLU → Dropout → Linear(H→B),
/// then mean or elementwise max of the instance logits.
template <class T>
class PoolingHead final : public MilHead<T> {
 public:
  PoolingHead(HeadConfig config, Rng& rng);

 protected:
  Tensor<T> compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const override;

 private:
  Tensor<T> embed_w_, embed_b_, cls_w_, cls_b_;
};

/// Non-gated attention MIL.
template <class T>
class AbMilHead final : public MilHead<T> {
 public:
  AbMilHead(HeadConfig config, Rng& rng);

  /// Attention weights over instances [m × 1] (evaluation mode).
  Tensor<T> attention(const Tensor<T>& bag) const;

 protected:
  Tensor<T> compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const override;

 private:
  Tensor<T> embed(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const;
  Tensor<T> scores(Tape<T>& tape, const Tensor<T>& embedded) const;

  Tensor<T> embed_w_, embed_b_, attn_w_, attn_b_, score_w_, score_b_, cls_w_, cls_b_;
};

/// Weights of one Nyström self-attention block.
template <class T>
struct AttentionWeights {
  Tensor<T> qkv;       // [H × 3·inner], no bias
  Tensor<T> out_w;     // [inner × H]
  Tensor<T> out_b;     // [H]
  Tensor<T> residual;  // [heads × kernel], depthwise over the sequence, no bias
};

/// Nyström-approximated multi-head self-attention over x [n × H] with up to
/// `landmarks` landmark tokens (clamped to n). The sequence is zero-padded at
/// the front to a multiple of the landmark count and the padding removed from
/// the output.
template <class T>
Tensor<T> nystrom_attention(Tape<T>& tape, const Tensor<T>& x, const AttentionWeights<T>& weights,
                            const TransMilConfig& config);

/// Same block with exact softmax attention; used as the reference for the
/// Nyström approximation.
template <class T>
Tensor<T> exact_attention(Tape<T>& tape, const Tensor<T>& x, const AttentionWeights<T>& weights,
                          const TransMilConfig& config);

/// Moore–Penrose pseudo-inverse of a square matrix by the order-7 Newton–Schulz
/// style iteration z ← ¼ z (13I − az(15I − az(7I − az))).
template <class T>
Tensor<T> iterative_pinv(Tape<T>& tape, const Tensor<T>& a, std::size_t iterations);

template <class T>
class TransMilHead final : public MilHead<T> {
 public:
  TransMilHead(HeadConfig config, Rng& rng);

 protected:
  Tensor<T> compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const override;

 private:
  struct Layer {
    Tensor<T> norm_gain, norm_shift;
    AttentionWeights<T> attn;
  };
  struct PositionConv {
    std::size_t kernel;
    Tensor<T> weight, bias;
  };

  Tensor<T> embed_w_, embed_b_, cls_token_;
  std::vector<Layer> layers_;
  std::vector<PositionConv> ppeg_;
  Tensor<T> norm_gain_, norm_shift_, cls_w_, cls_b_;
};

template <class T>
std::unique_ptr<MilHead<T>> build_head(const HeadConfig& config, Rng& rng);

extern template class MilHead<float>;
extern template class MilHead<double>;
extern template class PoolingHead<float>;
extern template class PoolingHead<double>;
extern template class AbMilHead<float>;
extern template class AbMilHead<double>;
extern template class TransMilHead<float>;
extern template class TransMilHead<double>;

}  // namespace milsurv
