#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "milsurv/cohort.hpp"
#include "milsurv/features.hpp"
#include "milsurv/heads.hpp"
#include "milsurv/report.hpp"

namespace milsurv {

struct TrainConfig {
  double learning_rate = 2e-4;
  double weight_decay = 1e-3;
  double l1_coeff = 1e-4;
  int epochs = 200;
  int earliest_stop_epoch = 40;
  int patience = 10;
  int grad_accum_steps = 32;
  double dropout = 0.25;
  /// Mixing weight between bag and instance losses. No head defines an
  /// instance loss, so it is carried in the config without numerical effect.
  double bag_weight = 0.7;
  std::uint64_t seed = 0;

  /// Per-cohort presets: blca, luad, brca.
  static TrainConfig preset(std::string_view name);
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

/// Patience-based stopping on a maximized metric. Epochs are 1-based.
/// `update` returns true when training should stop after this epoch: the
/// metric has not improved for `patience` consecutive epochs and the epoch is
/// at least `earliest_epoch`.
class EarlyStopping {
 public:
  EarlyStopping(int earliest_epoch, int patience);

  bool update(int epoch, double metric);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_metric_; }

 private:
  int earliest_epoch_;
  int patience_;
  int best_epoch_ = 0;
  double best_metric_ = 0.0;
  int stale_ = 0;
  bool improved_ = false;
};

struct Sample {
  std::string case_id;
  Tensor<float> bag;
  double survival_months = 0.0;
  bool censored = false;
  int bin = 0;
};

struct Dataset {
  std::string name;
  std::vector<std::string> extractors;
  BinEdges edges;
  std::vector<Sample> samples;

  Cohort cohort() const;
  std::size_t dim() const;
};

/// Loads every case's bag for an extractor set (concatenated when it has
/// several members) and labels time bins on the full cohort.
Dataset load_dataset(const Manifest& manifest, std::vector<std::string> extractors, std::string name = "cohort",
                     int bins = 4, const ExtractorRegistry& registry = default_registry());

/// L1 penalty: l1_coeff · Σ|w| over regularized parameters.
template <class T>
Tensor<T> l1_penalty(Tape<T>& tape, const MilHead<T>& head, double l1_coeff);

/// Forward and backward for one slide: loss = nll + L1, backpropagated after
/// scaling by 1/grad_accum_steps so gradients accumulate into the head's
/// buffers. Returns the unscaled loss.
template <class T>
double backprop_slide(MilHead<T>& head, const Tensor<T>& bag, int bin, bool censored, const TrainConfig& config,
                      Rng& rng, bool training = true);

/// Risk scores of a head on a set of samples (evaluation mode).
std::vector<double> predict_risks(const MilHead<float>& head, const Dataset& data,
                                  const std::vector<std::size_t>& indices);
double evaluate_cindex(const MilHead<float>& head, const Dataset& data, const std::vector<std::size_t>& indices);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_cindex = 0.0;
};

struct FoldResult {
  int fold = 0;
  int best_epoch = 0;
  double best_val_cindex = 0.0;
  double final_train_loss = 0.0;
  int epochs_run = 0;
  std::filesystem::path checkpoint;
  std::vector<EpochLog> history;
  bool failed = false;
  std::string error;
};

struct FoldOutputs {
  std::filesystem::path dir;  // empty: keep everything in memory
  std::string config_hash;
};

/// Trains one fold: seeded shuffles, per-slide backprop, an Adam step every
/// grad_accum_steps slides (and for the remainder at epoch end), validation
/// c-index after each epoch, early stopping, and the best checkpoint written
/// to `<dir>/best.milc` with its log in `<dir>/log.csv`. A non-finite loss
/// yields a failed result naming the epoch and slide.
FoldResult train_fold(const Dataset& data, const HeadConfig& head_config, const TrainConfig& config,
                      const FoldSplit& split, int fold, const FoldOutputs& outputs = {});

struct CvRequest {
  std::string dataset = "cohort";
  const Manifest* manifest = nullptr;
  std::vector<std::vector<std::string>> extractor_sets;
  std::vector<HeadKind> heads;
  HeadConfig head_template;  // hidden/attention sizes; kind and input_dim are filled per cell
  TrainConfig train;
  int folds = 5;
  int jobs = 1;
  std::filesystem::path out_dir;  // empty: no files
  const ExtractorRegistry* registry = nullptr;
  /// Called once per finished fold with a one-line summary.
  std::function<void(const std::string&)> progress;
};

std::string config_hash(const CvRequest& request);

/// K-fold cross-validation over every (head, extractor set) cell. Failed folds
/// mark their cell failed; the remaining cells still run.
ReportTable run_cv(const CvRequest& request);

}  // namespace milsurv
