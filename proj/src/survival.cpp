#include "milsurv/survival.hpp"

#include <cmath>
#include <string>

#include "milsurv/error.hpp"
#include "milsurv/kernels.hpp"
#include "milsurv/ops.hpp"

namespace milsurv {

SurvivalOutput SurvivalOutput::from_logits(std::span<const double> logits) {
  SurvivalOutput out;
  out.logits.assign(logits.begin(), logits.end());
  double running = 1.0;
  for (double z : logits) {
    const double h = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    running *= 1.0 - h;
    out.hazards.push_back(h);
    out.survival.push_back(running);
    out.risk -= running;
  }
  return out;
}

double risk_score(std::span<const double> logits) { return SurvivalOutput::from_logits(logits).risk; }

template <class T>
Tensor<T> nll_loss(Tape<T>& tape, const Tensor<T>& logits, int bin, bool censored, T eps) {
  const auto bins = static_cast<int>(logits.size());
  if (!(bin >= 0 && bin < bins)) fail(ErrorKind::contract, "nll_loss: bin " + std::to_string(bin) + " outside [0, " + std::to_string(bins) + ")");
  require(eps > T{0} && eps < T(0.5), ErrorKind::configuration, "nll_loss: eps must lie in (0, 0.5)");

  const auto hazards = ops::sigmoid(tape, logits);
  const auto survival = ops::cumprod(tape, ops::affine(tape, hazards, T{-1}, T{1}));
  const auto survival_c = ops::clamp(tape, survival, eps, T{1} - eps);

  if (censored) {
    return ops::affine(tape, ops::log(tape, ops::element(tape, survival_c, static_cast<std::size_t>(bin))), T{-1},
                       T{0});
  }
  const auto hazards_c = ops::clamp(tape, hazards, eps, T{1} - eps);
  auto log_h = ops::log(tape, ops::element(tape, hazards_c, static_cast<std::size_t>(bin)));
  if (bin == 0) return ops::affine(tape, log_h, T{-1}, T{0});
  const auto log_s = ops::log(tape, ops::element(tape, survival_c, static_cast<std::size_t>(bin - 1)));
  return ops::affine(tape, ops::add(tape, log_s, log_h), T{-1}, T{0});
}

double concordance_index(std::span<const double> risks, std::span<const double> times,
                         const std::vector<bool>& censored) {
  require(risks.size() == times.size() && times.size() == censored.size(), ErrorKind::dimension,
          "concordance_index: inputs differ in length");
  require(risks.size() >= 2, ErrorKind::undefined_metric, "concordance_index: need at least two patients");
  std::vector<std::uint8_t> event(censored.size());
  for (std::size_t i = 0; i < censored.size(); ++i) event[i] = censored[i] ? 0 : 1;
  const auto counts = kernels::concordance_pairs(risks, times, event);
  require(counts.comparable > 0, ErrorKind::undefined_metric, "concordance_index: no comparable pairs");
  return static_cast<double>(counts.concordant_halves) / (2.0 * static_cast<double>(counts.comparable));
}

template Tensor<float> nll_loss(Tape<float>&, const Tensor<float>&, int, bool, float);
template Tensor<double> nll_loss(Tape<double>&, const Tensor<double>&, int, bool, double);

}  // namespace milsurv
