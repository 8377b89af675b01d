#pragma once

#include <functional>
#include <string>
#include <vector>

#include "milsurv/tensor.hpp"

namespace milsurv {

/// |analytic − numeric| / max(1, |analytic|, |numeric|)
double relative_error(double analytic, double numeric);

struct GradCheckInput {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_error = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double max_error() const;
  bool passed() const;
};

using Objective = std::function<Tensor<double>(Tape<double>&)>;

/// Compares tape gradients of the scalar `objective` against central
/// differences (f(x+h) − f(x−h)) / 2h for every element of every input.
/// Inputs are switched to requires_grad and their grad buffers are reset.
/// A non-finite objective value marks the check as failed rather than throwing.
GradCheckReport grad_check(const Objective& objective, std::vector<GradCheckInput> inputs,
                           double step = 1e-5, double tolerance = 1e-6);

}  // namespace milsurv
