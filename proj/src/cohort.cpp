#include "milsurv/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "milsurv/csv.hpp"
#include "milsurv/error.hpp"

namespace milsurv {
namespace fs = std::filesystem;

Cohort cohort_from_manifest(const Manifest& manifest) {
  Cohort cohort;
  cohort.reserve(manifest.rows.size());
  for (const auto& row : manifest.rows) cohort.push_back({row.case_id, row.survival_months, row.censored, -1});
  return cohort;
}

int BinEdges::bin_of(double survival_months) const {
  const auto it = std::upper_bound(edges.begin(), edges.end(), survival_months);
  return static_cast<int>(it - edges.begin());
}

BinEdges discretize(Cohort& cohort, int bins) {
  require(bins >= 2, ErrorKind::configuration, "discretize: need at least 2 bins");
  std::vector<double> times;
  for (const auto& p : cohort) {
    if (!p.censored) times.push_back(p.survival_months);
  }
  std::sort(times.begin(), times.end());
  const auto distinct = std::set<double>(times.begin(), times.end()).size();
  if (!(distinct >= static_cast<std::size_t>(bins))) fail(ErrorKind::degenerate_cohort, "discretize: " + std::to_string(distinct) + " distinct uncensored times, need " + std::to_string(bins));

  BinEdges result;
  result.bins = bins;
  const std::size_t n = times.size();
  for (int k = 1; k < bins; ++k) {
    const double edge = times[static_cast<std::size_t>(k) * n / static_cast<std::size_t>(bins)];
    if (!(edge > 0.0 && (result.edges.empty() || edge > result.edges.back()))) fail(ErrorKind::degenerate_cohort, "discretize: tied survival times collapse quantile " + std::to_string(k) + " of " + std::to_string(bins));
    result.edges.push_back(edge);
  }
  for (auto& p : cohort) p.bin = result.bin_of(p.survival_months);
  return result;
}

int FoldSplit::fold_of(const std::string& case_id) const {
  for (std::size_t i = 0; i < case_ids.size(); ++i) {
    if (case_ids[i] == case_id) return assignment[i];
  }
  fail(ErrorKind::contract, "case '" + case_id + "' is not in the split");
}

std::vector<std::size_t> FoldSplit::members(int fold) const {
  if (!(fold >= 0 && fold < folds)) fail(ErrorKind::configuration, "fold " + std::to_string(fold) + " out of range");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldSplit::complement(int fold) const {
  if (!(fold >= 0 && fold < folds)) fail(ErrorKind::configuration, "fold " + std::to_string(fold) + " out of range");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] != fold) out.push_back(i);
  }
  return out;
}

FoldSplit split_kfold(const Cohort& cohort, int folds, Rng rng) {
  require(folds >= 2, ErrorKind::configuration, "split_kfold: K must be at least 2");
  if (!(cohort.size() >= static_cast<std::size_t>(folds))) fail(ErrorKind::configuration, "split_kfold: K=" + std::to_string(folds) + " exceeds cohort size " + std::to_string(cohort.size()));
  FoldSplit split;
  split.folds = folds;
  split.assignment.assign(cohort.size(), -1);
  for (const auto& p : cohort) split.case_ids.push_back(p.case_id);

  std::vector<std::size_t> uncensored, censored;
  for (std::size_t i = 0; i < cohort.size(); ++i) (cohort[i].censored ? censored : uncensored).push_back(i);
  rng.shuffle(std::span<std::size_t>(uncensored));
  rng.shuffle(std::span<std::size_t>(censored));

  std::size_t next = 0;
  for (const auto* stratum : {&uncensored, &censored}) {
    for (auto i : *stratum) {
      split.assignment[i] = static_cast<int>(next % static_cast<std::size_t>(folds));
      ++next;
    }
  }
  return split;
}

void write_split(const FoldSplit& split, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) fail(ErrorKind::io, "cannot write " + path.string());
  out << "case_id,fold\n";
  for (std::size_t i = 0; i < split.case_ids.size(); ++i) {
    out << csv::escape(split.case_ids[i]) << ',' << split.assignment[i] << '\n';
  }
}

FoldSplit read_split(const fs::path& path) {
  const auto rows = csv::read_file(path);
  if (!(!rows.empty() && rows.front().size() == 2 && rows.front()[0] == "case_id" && rows.front()[1] == "fold")) fail(ErrorKind::ingestion, path.string() + ": expected header case_id,fold");
  FoldSplit split;
  int max_fold = -1;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (!(rows[r].size() == 2)) fail(ErrorKind::ingestion, path.string() + ": malformed row " + std::to_string(r + 1));
    int fold = -1;
    try {
      fold = std::stoi(rows[r][1]);
    } catch (const std::logic_error&) {
      fail(ErrorKind::ingestion, path.string() + ": bad fold '" + rows[r][1] + "'");
    }
    if (!(fold >= 0)) fail(ErrorKind::ingestion, path.string() + ": negative fold");
    split.case_ids.push_back(rows[r][0]);
    split.assignment.push_back(fold);
    max_fold = std::max(max_fold, fold);
  }
  split.folds = max_fold + 1;
  return split;
}

SynthCohort synth_cohort(const SynthConfig& config, Rng rng, const fs::path& out_dir,
                         const ExtractorRegistry& registry) {
  require(config.patients >= 20, ErrorKind::configuration, "synth: need at least 20 patients");
  require(config.dim >= 1, ErrorKind::configuration, "synth: dimension must be positive");
  require(config.censor_fraction >= 0.0 && config.censor_fraction < 1.0, ErrorKind::configuration,
          "synth: censor fraction must lie in [0, 1)");
  require(config.time_shape > 0.0 && config.time_scale_months > 0.0, ErrorKind::configuration,
          "synth: time shape and scale must be positive");
  require(config.min_patches >= 1 && config.min_patches <= config.max_patches, ErrorKind::configuration,
          "synth: invalid patch range");
  require(!config.extractors.empty(), ErrorKind::configuration, "synth: no extractors");

  const std::size_t n = config.patients;
  Rng risk_rng = rng.split(1);
  Rng censor_rng = rng.split(2);
  Rng direction_rng = rng.split(3);

  SynthCohort out;
  out.latent_risk.resize(n);
  std::vector<double> event_time(n), censor_draw(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = risk_rng.normal();
    out.latent_risk[i] = r;
    const double e = risk_rng.exponential(1.0);
    event_time[i] = config.time_scale_months * std::pow(e, 1.0 / config.time_shape) *
                    std::exp(-config.signal_strength * r);
    censor_draw[i] = censor_rng.uniform();
  }

  // Realized censored fraction is nonincreasing in the censoring horizon.
  auto fraction_at = [&](double horizon) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += horizon * censor_draw[i] < event_time[i] ? 1 : 0;
    return static_cast<double>(count) / static_cast<double>(n);
  };
  double horizon = std::numeric_limits<double>::infinity();
  if (config.censor_fraction > 0.0) {
    double lo = 0.0;
    double hi = 1.0;
    while (fraction_at(hi) > config.censor_fraction) hi *= 2.0;
    for (int iter = 0; iter < 200; ++iter) {
      const double mid = 0.5 * (lo + hi);
      (fraction_at(mid) > config.censor_fraction ? lo : hi) = mid;
    }
    horizon = std::abs(fraction_at(lo) - config.censor_fraction) < std::abs(fraction_at(hi) - config.censor_fraction)
                  ? lo
                  : hi;
  }

  out.manifest.feature_root = out_dir / "features";
  out.manifest.extractors = config.extractors;

  struct ExtractorPlan {
    std::string id;
    std::size_t dim;
    std::vector<double> direction;
  };
  std::vector<ExtractorPlan> plans;
  for (const auto& id : config.extractors) {
    ExtractorPlan plan{id, registry.dim(id).value_or(config.dim), {}};
    plan.direction.resize(plan.dim);
    double norm = 0.0;
    for (auto& v : plan.direction) {
      v = direction_rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : plan.direction) v /= norm;
    plans.push_back(std::move(plan));
  }

  std::size_t censored_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "SYN-%04zu", i + 1);
    ManifestRow row;
    row.case_id = name;
    row.slide_id = row.case_id + "-DX1";
    const double censor_time = horizon * censor_draw[i];
    row.censored = censor_time < event_time[i];
    row.survival_months = row.censored ? censor_time : event_time[i];
    censored_count += row.censored ? 1 : 0;

    Rng slide_rng = rng.split(1000 + i);
    const auto patches = static_cast<std::size_t>(slide_rng.uniform_int(
        static_cast<std::int64_t>(config.min_patches), static_cast<std::int64_t>(config.max_patches)));
    const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(patches))));
    std::vector<PatchCoord> coords(patches);
    for (std::size_t p = 0; p < patches; ++p) {
      coords[p] = {static_cast<std::int32_t>(256 * (p % grid)), static_cast<std::int32_t>(256 * (p / grid))};
    }

    for (std::size_t e = 0; e < plans.size(); ++e) {
      const auto& plan = plans[e];
      Rng feature_rng = slide_rng.split(e + 1);
      FeatureMatrix fm;
      fm.extractor_id = plan.id;
      fm.patches = patches;
      fm.dim = plan.dim;
      fm.coords = coords;
      fm.values.resize(patches * plan.dim);
      for (std::size_t p = 0; p < patches; ++p) {
        for (std::size_t j = 0; j < plan.dim; ++j) {
          fm.values[p * plan.dim + j] =
              static_cast<float>(feature_rng.normal() + out.latent_risk[i] * plan.direction[j]);
        }
      }
      const std::string relative = plan.id + "/" + row.case_id + ".milf";
      write_features(fm, out.manifest.feature_root / relative, registry);
      row.feature_paths[plan.id] = relative;
    }
    out.manifest.rows.push_back(std::move(row));
  }
  out.realized_censor_fraction = static_cast<double>(censored_count) / static_cast<double>(n);
  write_manifest(out.manifest, out_dir / "manifest.csv");
  return out;
}

}  // namespace milsurv
