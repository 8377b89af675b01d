#pragma once

#include <vector>

#include "milsurv/heads.hpp"

namespace milsurv {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled L2: added to the gradient before the moments
};

/// Adam with bias correction. Parameters without an allocated gradient
/// buffer are stepped with a zero gradient.
template <class T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>>& params, AdamConfig config);

  void step();
  void zero_grad();
  long steps() const { return steps_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> first_, second_;
  AdamConfig config_;
  long steps_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace milsurv
