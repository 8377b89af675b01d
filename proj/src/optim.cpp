#include "milsurv/optim.hpp"

#include <cmath>

#include "milsurv/error.hpp"

namespace milsurv {

template <class T>
Adam<T>::Adam(std::vector<Parameter<T>>& params, AdamConfig config) : config_(config) {
  require(config.learning_rate > 0.0 && config.eps > 0.0 && config.weight_decay >= 0.0, ErrorKind::configuration,
          "adam: learning rate and eps must be positive, weight decay nonnegative");
  require(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 && config.beta2 < 1.0,
          ErrorKind::configuration, "adam: betas must lie in [0, 1)");
  for (auto& p : params) {
    params_.push_back(p.value);
    first_.emplace_back(p.value.size(), 0.0);
    second_.emplace_back(p.value.size(), 0.0);
  }
}

template <class T>
void Adam<T>::step() {
  ++steps_;
  const double correction1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const double step_size = config_.learning_rate / correction1;
  const double root_correction2 = std::sqrt(correction2);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto values = params_[k].values();
    const auto grad = params_[k].grad();
    auto& m = first_[k];
    auto& v = second_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = (grad.empty() ? 0.0 : static_cast<double>(grad[i])) +
                       config_.weight_decay * static_cast<double>(values[i]);
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double denom = std::sqrt(v[i]) / root_correction2 + config_.eps;
      values[i] = static_cast<T>(static_cast<double>(values[i]) - step_size * m[i] / denom);
    }
  }
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace milsurv
