#include "milsurv/heads.hpp"

#include <cmath>

#include "milsurv/error.hpp"
#include "milsurv/ops.hpp"

namespace milsurv {

HeadKind parse_head_kind(std::string_view name) {
  if (name == "mean" || name == "meanmil") return HeadKind::mean;
  if (name == "max" || name == "maxmil") return HeadKind::max;
  if (name == "abmil") return HeadKind::abmil;
  if (name == "transmil") return HeadKind::transmil;
  fail(ErrorKind::configuration, "unknown head '" + std::string(name) + "' (expected mean|max|abmil|transmil)");
}

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::mean: return "mean";
    case HeadKind::max: return "max";
    case HeadKind::abmil: return "abmil";
    case HeadKind::transmil: return "transmil";
  }
  return "unknown";
}

void HeadConfig::validate() const {
  require(input_dim >= 1 && hidden_dim >= 1, ErrorKind::configuration, "head dimensions must be positive");
  if (!(bins == 4)) fail(ErrorKind::configuration, "the survival heads use exactly 4 time bins, got " + std::to_string(bins));
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::configuration, "dropout must lie in [0, 1)");
  if (kind == HeadKind::abmil) require(attn_dim >= 1, ErrorKind::configuration, "attn_dim must be positive");
  if (kind == HeadKind::transmil) {
    const auto& t = transmil;
    require(t.layers >= 1 && t.heads >= 1 && t.head_dim >= 1 && t.landmarks >= 1 && t.pinv_iterations >= 1,
            ErrorKind::configuration, "transmil sizes must be positive");
    require(t.residual_kernel % 2 == 1, ErrorKind::configuration, "transmil residual kernel must be odd");
  }
}

void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},   {"input_dim", c.input_dim}, {"hidden_dim", c.hidden_dim},
                     {"attn_dim", c.attn_dim},       {"bins", c.bins},           {"dropout", c.dropout}};
  if (c.kind == HeadKind::transmil) {
    j["transmil"] = {{"layers", c.transmil.layers},
                     {"heads", c.transmil.heads},
                     {"head_dim", c.transmil.head_dim},
                     {"landmarks", c.transmil.landmarks},
                     {"pinv_iterations", c.transmil.pinv_iterations},
                     {"residual_kernel", c.transmil.residual_kernel}};
  }
}

void from_json(const nlohmann::json& j, HeadConfig& c) {
  c.kind = parse_head_kind(j.at("kind").get<std::string>());
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.attn_dim = j.at("attn_dim").get<std::size_t>();
  c.bins = j.at("bins").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  if (j.contains("transmil")) {
    const auto& t = j.at("transmil");
    c.transmil.layers = t.at("layers").get<std::size_t>();
    c.transmil.heads = t.at("heads").get<std::size_t>();
    c.transmil.head_dim = t.at("head_dim").get<std::size_t>();
    c.transmil.landmarks = t.at("landmarks").get<std::size_t>();
    c.transmil.pinv_iterations = t.at("pinv_iterations").get<std::size_t>();
    c.transmil.residual_kernel = t.at("residual_kernel").get<std::size_t>();
  }
}

std::size_t parameter_count(const HeadConfig& c) {
  c.validate();
  const std::size_t D = c.input_dim, H = c.hidden_dim, B = c.bins;
  const std::size_t embed = D * H + H;
  const std::size_t classifier = H * B + B;
  switch (c.kind) {
    case HeadKind::mean:
    case HeadKind::max:
      return embed + classifier;
    case HeadKind::abmil:
      return embed + (H * c.attn_dim + c.attn_dim) + (c.attn_dim + 1) + classifier;
    case HeadKind::transmil: {
      const auto& t = c.transmil;
      const std::size_t inner = t.inner_dim();
      const std::size_t layer = 2 * H + H * 3 * inner + (inner * H + H) + t.heads * t.residual_kernel;
      const std::size_t ppeg = H * (7 * 7 + 5 * 5 + 3 * 3) + 3 * H;
      return embed + H + t.layers * layer + ppeg + 2 * H + classifier;
    }
  }
  return 0;
}

template <class T>
MilHead<T>::MilHead(HeadConfig config) : config_(std::move(config)) {
  config_.validate();
}

template <class T>
Tensor<T> MilHead<T>::forward(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const {
  require(bag.defined() && bag.rank() == 2, ErrorKind::contract, "bag must be an [m x D] matrix");
  require(bag.rows() >= 1, ErrorKind::empty_bag, "bag has no instances");
  if (!(bag.cols() == config_.input_dim)) fail(ErrorKind::contract, "bag " + shape_string(bag.shape()) + " does not match head input dimension " +
              std::to_string(config_.input_dim));
  auto logits = compute(tape, bag, training, rng);
  for (T v : logits.values()) {
    if (!(std::isfinite(v))) fail(ErrorKind::non_finite, to_string(config_.kind) + " head produced a non-finite logit");
  }
  return logits;
}

template <class T>
const Parameter<T>& MilHead<T>::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  fail(ErrorKind::contract, "no parameter named '" + std::string(name) + "'");
}

template <class T>
std::size_t MilHead<T>::parameter_size() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

template <class T>
void MilHead<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <class T>
Tensor<T> MilHead<T>::add_parameter(std::string name, Shape shape, double bound, bool regularized, Rng& rng) {
  Tensor<T> value(std::move(shape));
  if (bound > 0.0) {
    for (auto& v : value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  value.set_requires_grad(true);
  params_.push_back({std::move(name), value, regularized});
  return value;
}

template <class T>
Tensor<T> MilHead<T>::add_constant_parameter(std::string name, Shape shape, T fill) {
  Tensor<T> value(std::move(shape), fill);
  value.set_requires_grad(true);
  params_.push_back({std::move(name), value, false});
  return value;
}

namespace {

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

template <class T>
PoolingHead<T>::PoolingHead(HeadConfig config, Rng& rng) : MilHead<T>(std::move(config)) {
  const auto& c = this->config();
  require(c.kind == HeadKind::mean || c.kind == HeadKind::max, ErrorKind::configuration, "pooling head kind");
  embed_w_ = this->add_parameter("embed.weight", {c.input_dim, c.hidden_dim}, fan_in_bound(c.input_dim), true, rng);
  embed_b_ = this->add_parameter("embed.bias", {c.hidden_dim}, 0.0, false, rng);
  cls_w_ = this->add_parameter("classifier.weight", {c.hidden_dim, c.bins}, fan_in_bound(c.hidden_dim), true, rng);
  cls_b_ = this->add_parameter("classifier.bias", {c.bins}, 0.0, false, rng);
}

template <class T>
Tensor<T> PoolingHead<T>::compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const {
  const auto& c = this->config();
  auto h = ops::relu(tape, ops::linear(tape, bag, embed_w_, embed_b_));
  h = ops::dropout(tape, h, c.dropout, rng, training);
  const auto instance_logits = ops::linear(tape, h, cls_w_, cls_b_);
  return ops::reduce(tape, instance_logits, c.kind == HeadKind::mean ? ops::Reduce::mean : ops::Reduce::max);
}

template <class T>
AbMilHead<T>::AbMilHead(HeadConfig config, Rng& rng) : MilHead<T>(std::move(config)) {
  const auto& c = this->config();
  embed_w_ = this->add_parameter("embed.weight", {c.input_dim, c.hidden_dim}, fan_in_bound(c.input_dim), true, rng);
  embed_b_ = this->add_parameter("embed.bias", {c.hidden_dim}, 0.0, false, rng);
  attn_w_ = this->add_parameter("attention.weight", {c.hidden_dim, c.attn_dim}, fan_in_bound(c.hidden_dim), true, rng);
  attn_b_ = this->add_parameter("attention.bias", {c.attn_dim}, 0.0, false, rng);
  score_w_ = this->add_parameter("score.weight", {c.attn_dim, 1}, fan_in_bound(c.attn_dim), true, rng);
  score_b_ = this->add_parameter("score.bias", {1}, 0.0, false, rng);
  cls_w_ = this->add_parameter("classifier.weight", {c.hidden_dim, c.bins}, fan_in_bound(c.hidden_dim), true, rng);
  cls_b_ = this->add_parameter("classifier.bias", {c.bins}, 0.0, false, rng);
}

template <class T>
Tensor<T> AbMilHead<T>::embed(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const {
  auto h = ops::relu(tape, ops::linear(tape, bag, embed_w_, embed_b_));
  return ops::dropout(tape, h, this->config().dropout, rng, training);
}

template <class T>
Tensor<T> AbMilHead<T>::scores(Tape<T>& tape, const Tensor<T>& embedded) const {
  const auto hidden = ops::tanh(tape, ops::linear(tape, embedded, attn_w_, attn_b_));
  return ops::softmax(tape, ops::linear(tape, hidden, score_w_, score_b_), 0);
}

template <class T>
Tensor<T> AbMilHead<T>::attention(const Tensor<T>& bag) const {
  Tape<T> tape(false);
  Rng unused;
  return scores(tape, embed(tape, bag, false, unused));
}

template <class T>
Tensor<T> AbMilHead<T>::compute(Tape<T>& tape, const Tensor<T>& bag, bool training, Rng& rng) const {
  const auto embedded = embed(tape, bag, training, rng);
  const auto weights = scores(tape, embedded);
  const auto pooled = ops::matmul(tape, ops::transpose(tape, weights), embedded);
  return ops::linear(tape, pooled, cls_w_, cls_b_);
}

template <class T>
std::unique_ptr<MilHead<T>> build_head(const HeadConfig& config, Rng& rng) {
  config.validate();
  switch (config.kind) {
    case HeadKind::mean:
    case HeadKind::max:
      return std::make_unique<PoolingHead<T>>(config, rng);
    case HeadKind::abmil:
      return std::make_unique<AbMilHead<T>>(config, rng);
    case HeadKind::transmil:
      return std::make_unique<TransMilHead<T>>(config, rng);
  }
  fail(ErrorKind::configuration, "unknown head kind");
}

template class MilHead<float>;
template class MilHead<double>;
template class PoolingHead<float>;
template class PoolingHead<double>;
template class AbMilHead<float>;
template class AbMilHead<double>;
template std::unique_ptr<MilHead<float>> build_head<float>(const HeadConfig&, Rng&);
template std::unique_ptr<MilHead<double>> build_head<double>(const HeadConfig&, Rng&);

}  // namespace milsurv
