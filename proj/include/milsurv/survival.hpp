#pragma once

#include <span>
#include <vector>

#include "milsurv/tensor.hpp"

namespace milsurv {

/// Discrete-time survival view of a head's bin logits.
struct SurvivalOutput {
  std::vector<double> logits;
  std::vector<double> hazards;   // sigmoid(logits)
  std::vector<double> survival;  // survival[j] = Π_{k≤j} (1 − hazards[k])
  double risk = 0.0;             // −Σ_j survival[j]

  static SurvivalOutput from_logits(std::span<const double> logits);
};

/// r̂ = −Σ_j Π_{k≤j} (1 − sigmoid(logit_k)); ranges over (−B, 0).
double risk_score(std::span<const double> logits);

/// Censored discrete-time negative log-likelihood of one bag.
///
/// With hazards h = sigmoid(logits), S(j) = Π_{k≤j}(1 − h_k), S(−1) = 1 and
/// h, S clamped to [eps, 1 − eps]:
///   censored:   −log S(bin)
///   uncensored: −log S(bin − 1) − log h(bin)
/// `logits` is a 1 × B row.
template <class T>
Tensor<T> nll_loss(Tape<T>& tape, const Tensor<T>& logits, int bin, bool censored, T eps = T(1e-7));

/// Harrell's concordance index over comparable pairs (time_i < time_j with i
/// uncensored): 1 for risk_i > risk_j, 0.5 for ties. Throws an
/// undefined-metric error when no pair is comparable.
double concordance_index(std::span<const double> risks, std::span<const double> times,
                         const std::vector<bool>& censored);

}  // namespace milsurv
