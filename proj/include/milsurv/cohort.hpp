#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "milsurv/features.hpp"
#include "milsurv/rng.hpp"

namespace milsurv {

struct PatientRecord {
  std::string case_id;
  double survival_months = 0.0;
  bool censored = false;  // true: event not observed, survival is a lower bound
  int bin = -1;           // assigned by discretize()
};

using Cohort = std::vector<PatientRecord>;

Cohort cohort_from_manifest(const Manifest& manifest);

struct BinEdges {
  int bins = 4;
  std::vector<double> edges;  // bins − 1 strictly increasing cut points

  /// Right-open intervals: t < edges[0] → 0, edges[k−1] ≤ t < edges[k] → k,
  /// t ≥ edges.back() → bins − 1.
  int bin_of(double survival_months) const;
};

/// Cut points at the order statistics sorted[⌊k·n/B⌋], k = 1..B−1, of the
/// uncensored survival times of the whole cohort, then labels every patient.
BinEdges discretize(Cohort& cohort, int bins = 4);

struct FoldSplit {
  int folds = 0;
  std::vector<std::string> case_ids;
  std::vector<int> assignment;  // parallel to case_ids

  int fold_of(const std::string& case_id) const;
  std::vector<std::size_t> members(int fold) const;
  std::vector<std::size_t> complement(int fold) const;
};

/// Stratified by censoring status: each stratum is shuffled and dealt round
/// robin, the second stratum continuing where the first stopped, so fold
/// sizes differ by at most one both overall and within each stratum.
FoldSplit split_kfold(const Cohort& cohort, int folds, Rng rng);

void write_split(const FoldSplit& split, const std::filesystem::path& path);
FoldSplit read_split(const std::filesystem::path& path);

struct SynthConfig {
  std::size_t patients = 400;
  std::size_t dim = 32;
  double censor_fraction = 0.45;
  double signal_strength = 1.0;
  /// Weibull shape of the event-time noise; 1 gives exponential event times.
  double time_shape = 4.0;
  double time_scale_months = 30.0;
  std::size_t min_patches = 20;
  std::size_t max_patches = 200;
  /// Extractor ids to emit; ids in the registry use the registered width,
  /// others use `dim`.
  std::vector<std::string> extractors{"synth"};
};

struct SynthCohort {
  Manifest manifest;
  std::vector<double> latent_risk;
  double realized_censor_fraction = 0.0;
};

/// Generates a synthetic cohort with a known risk signal and writes
/// `<out>/manifest.csv` plus `<out>/features/<extractor>/<case>.milf`.
///
/// Patient i has latent risk r ~ N(0, 1) and event time
/// scale · E^(1/shape) · exp(−signal·r), E ~ Exp(1); shape 1 is an exponential
/// time with rate exp(signal·r). Censoring times are c·U(0, 1) with c chosen by
/// bisection so the realized censored fraction matches the target. Each slide
/// has m ~ U{min..max} patches with features N(0, I) + r·u for a fixed unit
/// direction u per extractor.
SynthCohort synth_cohort(const SynthConfig& config, Rng rng, const std::filesystem::path& out_dir,
                         const ExtractorRegistry& registry = default_registry());

}  // namespace milsurv
