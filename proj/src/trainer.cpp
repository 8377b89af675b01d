#include "milsurv/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "milsurv/checkpoint.hpp"
#include "milsurv/error.hpp"
#include "milsurv/ops.hpp"
#include "milsurv/optim.hpp"
#include "milsurv/survival.hpp"

namespace milsurv {

TrainConfig TrainConfig::preset(std::string_view name) {
  TrainConfig c;
  if (name == "blca") {
    c.learning_rate = 2e-4;
    c.weight_decay = 1e-3;
    c.patience = 10;
  } else if (name == "luad") {
    c.learning_rate = 1e-4;
    c.weight_decay = 5e-4;
    c.patience = 5;
  } else if (name == "brca") {
    c.learning_rate = 5e-5;
    c.weight_decay = 5e-4;
    c.patience = 10;
  } else {
    fail(ErrorKind::configuration, "unknown preset '" + std::string(name) + "' (expected blca|luad|brca)");
  }
  return c;
}

void TrainConfig::validate() const {
  require(std::isfinite(learning_rate) && learning_rate > 0, ErrorKind::configuration, "learning rate must be > 0");
  require(std::isfinite(weight_decay) && weight_decay >= 0, ErrorKind::configuration, "weight decay must be >= 0");
  require(std::isfinite(l1_coeff) && l1_coeff >= 0, ErrorKind::configuration, "l1 coefficient must be >= 0");
  require(epochs >= 1, ErrorKind::configuration, "epochs must be >= 1");
  require(earliest_stop_epoch >= 0, ErrorKind::configuration, "earliest stop epoch must be >= 0");
  if (earliest_stop_epoch > epochs)
    fail(ErrorKind::configuration, "earliest stop epoch " + std::to_string(earliest_stop_epoch) + " exceeds epochs " +
                                       std::to_string(epochs));
  require(patience >= 1, ErrorKind::configuration, "patience must be >= 1");
  require(grad_accum_steps >= 1, ErrorKind::configuration, "gradient accumulation steps must be >= 1");
  require(dropout >= 0 && dropout < 1, ErrorKind::configuration, "dropout must be in [0, 1)");
  require(bag_weight >= 0 && bag_weight <= 1, ErrorKind::configuration, "bag weight must be in [0, 1]");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"l1_coeff", c.l1_coeff},
       {"epochs", c.epochs},
       {"earliest_stop_epoch", c.earliest_stop_epoch},
       {"patience", c.patience},
       {"grad_accum_steps", c.grad_accum_steps},
       {"dropout", c.dropout},
       {"bag_weight", c.bag_weight},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.l1_coeff = j.value("l1_coeff", d.l1_coeff);
  c.epochs = j.value("epochs", d.epochs);
  c.earliest_stop_epoch = j.value("earliest_stop_epoch", d.earliest_stop_epoch);
  c.patience = j.value("patience", d.patience);
  c.grad_accum_steps = j.value("grad_accum_steps", d.grad_accum_steps);
  c.dropout = j.value("dropout", d.dropout);
  c.bag_weight = j.value("bag_weight", d.bag_weight);
  c.seed = j.value("seed", d.seed);
}

EarlyStopping::EarlyStopping(int earliest_epoch, int patience) : earliest_epoch_(earliest_epoch), patience_(patience) {
  require(patience >= 1, ErrorKind::configuration, "patience must be >= 1");
}

bool EarlyStopping::update(int epoch, double metric) {
  improved_ = best_epoch_ == 0 || metric > best_metric_;
  if (improved_) {
    best_metric_ = metric;
    best_epoch_ = epoch;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return stale_ >= patience_ && epoch >= earliest_epoch_;
}

Cohort Dataset::cohort() const {
  Cohort out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.case_id, s.survival_months, s.censored, s.bin});
  return out;
}

std::size_t Dataset::dim() const { return samples.empty() ? 0 : samples.front().bag.cols(); }

Dataset load_dataset(const Manifest& manifest, std::vector<std::string> extractors, std::string name, int bins,
                     const ExtractorRegistry& registry) {
  require(!extractors.empty(), ErrorKind::configuration, "dataset needs at least one extractor");
  Dataset data;
  data.name = std::move(name);
  data.extractors = std::move(extractors);
  auto cohort = cohort_from_manifest(manifest);
  data.edges = discretize(cohort, bins);
  data.samples.reserve(manifest.rows.size());
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    const auto& row = manifest.rows[i];
    auto features = load_case_features(manifest, row, data.extractors, registry);
    if (!(features.patches > 0)) fail(ErrorKind::empty_bag, "case " + row.case_id + " has no patches");
    if (!data.samples.empty()) {
      if (!(features.dim == data.dim())) fail(ErrorKind::dimension, "case " + row.case_id + " has width " + std::to_string(features.dim) + ", expected " +
                  std::to_string(data.dim()));
    }
    Sample s;
    s.case_id = row.case_id;
    s.bag = Tensor<float>({features.patches, features.dim}, std::move(features.values));
    s.survival_months = row.survival_months;
    s.censored = row.censored;
    s.bin = cohort[i].bin;
    data.samples.push_back(std::move(s));
  }
  return data;
}

template <class T>
Tensor<T> l1_penalty(Tape<T>& tape, const MilHead<T>& head, double l1_coeff) {
  Tensor<T> total = Tensor<T>::scalar(T{0});
  if (l1_coeff == 0.0) return total;
  bool first = true;
  for (const auto& p : head.parameters()) {
    if (!p.regularized) continue;
    const auto term = ops::abs_sum(tape, p.value);
    total = first ? term : ops::add(tape, total, term);
    first = false;
  }
  return ops::affine(tape, total, static_cast<T>(l1_coeff), T{0});
}

template <class T>
double backprop_slide(MilHead<T>& head, const Tensor<T>& bag, int bin, bool censored, const TrainConfig& config,
                      Rng& rng, bool training) {
  Tape<T> tape;
  const auto logits = head.forward(tape, bag, training, rng);
  const auto loss = ops::add(tape, nll_loss(tape, logits, bin, censored), l1_penalty(tape, head, config.l1_coeff));
  const double value = static_cast<double>(loss.item());
  require(std::isfinite(value), ErrorKind::non_finite, "loss is not finite");
  const auto scaled = ops::affine(tape, loss, static_cast<T>(1.0 / config.grad_accum_steps), T{0});
  tape.backward(scaled);
  return value;
}

std::vector<double> predict_risks(const MilHead<float>& head, const Dataset& data,
                                  const std::vector<std::size_t>& indices) {
  std::vector<double> risks;
  risks.reserve(indices.size());
  Rng unused(0);
  for (std::size_t i : indices) {
    Tape<float> tape(false);
    const auto logits = head.forward(tape, data.samples.at(i).bag, false, unused);
    std::vector<double> row(logits.values().begin(), logits.values().end());
    risks.push_back(risk_score(row));
  }
  return risks;
}

double evaluate_cindex(const MilHead<float>& head, const Dataset& data, const std::vector<std::size_t>& indices) {
  const auto risks = predict_risks(head, data, indices);
  std::vector<double> times;
  std::vector<bool> censored;
  for (std::size_t i : indices) {
    times.push_back(data.samples[i].survival_months);
    censored.push_back(data.samples[i].censored);
  }
  return concordance_index(risks, times, censored);
}

namespace {

std::vector<std::size_t> to_sample_indices(const Dataset& data, const FoldSplit& split,
                                           const std::vector<std::size_t>& split_indices) {
  std::map<std::string, std::size_t> by_case;
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_case.emplace(data.samples[i].case_id, i);
  std::vector<std::size_t> out;
  out.reserve(split_indices.size());
  for (std::size_t s : split_indices) {
    const auto& id = split.case_ids.at(s);
    const auto it = by_case.find(id);
    if (!(it != by_case.end())) fail(ErrorKind::configuration, "split case " + id + " is not in the dataset");
    out.push_back(it->second);
  }
  return out;
}

std::string format_g(double v) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", v);
  return buffer;
}

}  // namespace

FoldResult train_fold(const Dataset& data, const HeadConfig& head_config, const TrainConfig& config,
                      const FoldSplit& split, int fold, const FoldOutputs& outputs) {
  config.validate();
  head_config.validate();
  require(fold >= 0 && fold < split.folds, ErrorKind::configuration, "fold out of range");
  if (!(head_config.input_dim == data.dim())) fail(ErrorKind::dimension, "head input width " + std::to_string(head_config.input_dim) + " does not match features " +
              std::to_string(data.dim()));

  const auto train = to_sample_indices(data, split, split.complement(fold));
  const auto val = to_sample_indices(data, split, split.members(fold));
  require(!train.empty() && !val.empty(), ErrorKind::configuration, "empty training or validation fold");

  const Rng root = Rng(config.seed).split(static_cast<std::uint64_t>(fold) + 1);
  Rng init_rng = root.split(1);
  Rng order_rng = root.split(2);
  Rng dropout_rng = root.split(3);

  auto head = build_head<float>(head_config, init_rng);
  Adam<float> adam(head->parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  EarlyStopping stopper(config.earliest_stop_epoch, config.patience);

  FoldResult result;
  result.fold = fold;
  std::ofstream log;
  if (!outputs.dir.empty()) {
    std::filesystem::create_directories(outputs.dir);
    log.open(outputs.dir / "log.csv", std::ios::trunc);
    if (!log.good()) fail(ErrorKind::io, "cannot write " + (outputs.dir / "log.csv").string());
    log << "# seed=" << config.seed << " config_hash=" << outputs.config_hash << " fold=" << fold << "\n";
    log << "epoch,train_loss,val_cindex\n";
  }

  std::vector<std::size_t> order = train;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    adam.zero_grad();
    double total = 0.0;
    int pending = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& s = data.samples[order[k]];
      try {
        total += backprop_slide(*head, s.bag, s.bin, s.censored, config, dropout_rng);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::non_finite) throw;
        result.failed = true;
        result.error = "non-finite loss at epoch " + std::to_string(epoch) + ", slide " + s.case_id;
        result.epochs_run = epoch;
        return result;
      }
      if (++pending == config.grad_accum_steps) {
        adam.step();
        adam.zero_grad();
        pending = 0;
      }
    }
    if (pending > 0) {
      adam.step();
      adam.zero_grad();
    }

    EpochLog entry{epoch, total / static_cast<double>(order.size()), evaluate_cindex(*head, data, val)};
    result.history.push_back(entry);
    result.final_train_loss = entry.train_loss;
    result.epochs_run = epoch;
    if (log.is_open()) log << epoch << ',' << format_g(entry.train_loss) << ',' << format_g(entry.val_cindex) << '\n';

    const bool stop = stopper.update(epoch, entry.val_cindex);
    if (stopper.improved() && !outputs.dir.empty()) {
      CheckpointMeta meta;
      meta.seed = config.seed;
      meta.epoch = epoch;
      meta.extra = {{"fold", fold}, {"val_cindex", entry.val_cindex}, {"config_hash", outputs.config_hash},
                    {"extractors", join_extractors(data.extractors)}, {"train", config}};
      result.checkpoint = outputs.dir / "best.milc";
      save_checkpoint(*head, meta, result.checkpoint);
    }
    if (stop) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_cindex = stopper.best_metric();
  return result;
}

namespace {

nlohmann::json request_json(const CvRequest& r) {
  std::vector<std::string> heads;
  for (auto h : r.heads) heads.push_back(to_string(h));
  return {{"dataset", r.dataset}, {"extractor_sets", r.extractor_sets}, {"heads", heads},
          {"head_template", r.head_template}, {"train", r.train}, {"folds", r.folds}};
}

}  // namespace

std::string config_hash(const CvRequest& request) {
  const std::string text = request_json(request).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016llx", static_cast<unsigned long long>(h));
  return buffer;
}

ReportTable run_cv(const CvRequest& request) {
  require(request.manifest != nullptr, ErrorKind::configuration, "cross-validation needs a manifest");
  require(!request.extractor_sets.empty() && !request.heads.empty(), ErrorKind::configuration,
          "cross-validation needs at least one head and one extractor set");
  require(request.jobs >= 1, ErrorKind::configuration, "jobs must be >= 1");
  request.train.validate();
  const auto& registry = request.registry ? *request.registry : default_registry();
  const std::string hash = config_hash(request);

  ReportTable table;
  table.seed = request.train.seed;
  table.config_hash = hash;
  table.datasets.push_back(request.dataset);

  if (!request.out_dir.empty()) {
    std::filesystem::create_directories(request.out_dir);
    auto j = request_json(request);
    j["config_hash"] = hash;
    std::ofstream(request.out_dir / "config.json", std::ios::trunc) << j.dump(2) << '\n';
  }

  struct Cell {
    HeadConfig head;
    std::string extractors;
    const Dataset* data;
    std::filesystem::path dir;
  };
  std::vector<Dataset> datasets;
  datasets.reserve(request.extractor_sets.size());
  std::vector<Cell> cells;
  std::vector<FoldSplit> splits;
  for (const auto& set : request.extractor_sets) {
    datasets.push_back(load_dataset(*request.manifest, set, request.dataset, 4, registry));
    splits.push_back(split_kfold(datasets.back().cohort(), request.folds, Rng(request.train.seed).split(7)));
    const std::string joined = join_extractors(set);
    if (!request.out_dir.empty()) {
      const auto dir = request.out_dir / request.dataset / joined;
      std::filesystem::create_directories(dir);
      write_split(splits.back(), dir / "splits.csv");
    }
    for (auto kind : request.heads) {
      HeadConfig hc = request.head_template;
      hc.kind = kind;
      hc.input_dim = datasets.back().dim();
      hc.dropout = request.train.dropout;
      std::filesystem::path dir;
      if (!request.out_dir.empty()) dir = request.out_dir / request.dataset / (to_string(kind) + "__" + joined);
      cells.push_back({hc, joined, &datasets.back(), dir});
    }
  }

  const std::size_t per_cell = static_cast<std::size_t>(request.folds);
  const std::size_t tasks = cells.size() * per_cell;
  std::vector<FoldResult> results(tasks);
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks; t = next++) {
      const auto& cell = cells[t / per_cell];
      const int fold = static_cast<int>(t % per_cell);
      const auto& split = splits[static_cast<std::size_t>(cell.data - datasets.data())];
      FoldOutputs outputs{cell.dir.empty() ? cell.dir : cell.dir / ("fold_" + std::to_string(fold)), hash};
      try {
        results[t] = train_fold(*cell.data, cell.head, request.train, split, fold, outputs);
      } catch (const Error& e) {
        results[t].fold = fold;
        results[t].failed = true;
        results[t].error = e.what();
      }
      if (request.progress) {
        const auto& r = results[t];
        std::string line = to_string(cell.head.kind) + "/" + cell.extractors + " fold " + std::to_string(fold) + ": ";
        line += r.failed ? "failed (" + r.error + ")"
                         : "c-index " + format_g(r.best_val_cindex).substr(0, 6) + " at epoch " +
                               std::to_string(r.best_epoch) + " of " + std::to_string(r.epochs_run);
        std::lock_guard lock(progress_mutex);
        request.progress(line);
      }
    }
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(request.jobs), tasks);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
  }

  for (std::size_t c = 0; c < cells.size(); ++c) {
    ReportCell cell;
    cell.dataset = request.dataset;
    for (std::size_t f = 0; f < per_cell; ++f) {
      const auto& r = results[c * per_cell + f];
      if (r.failed) {
        cell.failed = true;
      } else {
        cell.fold_values.push_back(r.best_val_cindex);
      }
    }
    table.add_cell(to_string(cells[c].head.kind), cells[c].extractors, std::move(cell));
  }

  if (!request.out_dir.empty()) {
    emit_report(table, ReportFormat::csv, request.out_dir / "report.csv");
    emit_report(table, ReportFormat::markdown, request.out_dir / "report.md");
  }
  return table;
}

template Tensor<float> l1_penalty(Tape<float>&, const MilHead<float>&, double);
template Tensor<double> l1_penalty(Tape<double>&, const MilHead<double>&, double);
template double backprop_slide(MilHead<float>&, const Tensor<float>&, int, bool, const TrainConfig&, Rng&, bool);
template double backprop_slide(MilHead<double>&, const Tensor<double>&, int, bool, const TrainConfig&, Rng&, bool);

}  // namespace milsurv
