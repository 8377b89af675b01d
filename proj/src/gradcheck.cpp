#include "milsurv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "milsurv/error.hpp"

namespace milsurv {

double relative_error(double analytic, double numeric) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

double GradCheckReport::max_error() const {
  double worst = 0.0;
  for (const auto& e : entries) {
    if (!e.finite) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, e.max_error);
  }
  return worst;
}

bool GradCheckReport::passed() const { return !entries.empty() && max_error() < tolerance; }

GradCheckReport grad_check(const Objective& objective, std::vector<GradCheckInput> inputs, double step,
                           double tolerance) {
  require(step > 0.0, ErrorKind::configuration, "grad_check: step must be positive");
  GradCheckReport report;
  report.tolerance = tolerance;

  for (auto& input : inputs) {
    input.tensor.set_requires_grad(true);
    input.tensor.zero_grad();
  }

  Tape<double> tape;
  const Tensor<double> loss = objective(tape);
  require(loss.size() == 1, ErrorKind::contract, "grad_check: objective must return a scalar");
  const bool loss_finite = std::isfinite(loss.item());
  if (loss_finite && loss.requires_grad()) tape.backward(loss);

  for (auto& input : inputs) {
    GradCheckEntry entry;
    entry.name = input.name;
    entry.elements = input.tensor.size();
    entry.finite = loss_finite;
    if (!loss_finite) {
      entry.max_error = std::numeric_limits<double>::infinity();
      report.entries.push_back(entry);
      continue;
    }
    std::vector<double> analytic(input.tensor.size(), 0.0);
    if (input.tensor.has_grad()) {
      auto g = input.tensor.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto values = input.tensor.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      Tape<double> plus_tape(false);
      const double plus = objective(plus_tape).item();
      values[i] = saved - step;
      Tape<double> minus_tape(false);
      const double minus = objective(minus_tape).item();
      values[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        entry.finite = false;
        entry.max_error = std::numeric_limits<double>::infinity();
        break;
      }
      const double numeric = (plus - minus) / (2.0 * step);
      entry.max_error = std::max(entry.max_error, relative_error(analytic[i], numeric));
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace milsurv
