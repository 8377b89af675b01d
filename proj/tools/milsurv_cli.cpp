#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "milsurv/checkpoint.hpp"
#include "milsurv/checks.hpp"
#include "milsurv/cohort.hpp"
#include "milsurv/error.hpp"
#include "milsurv/features.hpp"
#include "milsurv/heads.hpp"
#include "milsurv/kernels.hpp"
#include "milsurv/report.hpp"
#include "milsurv/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace milsurv;

namespace {

fs::path output_root() {
  const char* env = std::getenv("MILSURV_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::vector<std::string> split_list(const std::string& text, char separator = ',') {
  std::vector<std::string> out;
  std::string item;
  for (char c : text) {
    if (c == separator) {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else if (c != ' ') {
      item += c;
    }
  }
  if (!item.empty()) out.push_back(item);
  return out;
}

/// Every distinct extractor named by "a,b+c" style sets, in first-seen order.
std::vector<std::string> flatten_sets(const std::vector<std::vector<std::string>>& sets) {
  std::vector<std::string> out;
  for (const auto& set : sets)
    for (const auto& e : set)
      if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
  return out;
}

std::vector<std::vector<std::string>> parse_sets(const std::string& text) {
  std::vector<std::vector<std::string>> sets;
  for (const auto& s : split_list(text)) sets.push_back(split_extractors(s));
  return sets;
}

void announce(const std::string& command, const json& config, std::uint64_t seed) {
  std::cerr << json{{"command", command}, {"config", config}, {"seed", seed}}.dump() << '\n';
}

struct Common {
  std::string registry_path;
  int threads = 0;

  ExtractorRegistry registry() const {
    auto r = ExtractorRegistry::defaults();
    if (!registry_path.empty()) r.load_json(registry_path);
    return r;
  }
};

struct Paths {
  std::string manifest;
  std::string features;
  std::string extractors;

  void add(CLI::App* app, bool extractors_required) {
    app->add_option("--manifest", manifest, "Clinical manifest CSV")->required();
    app->add_option("--features", features, "Feature root (default: <manifest dir>/features if present, else the manifest dir)");
    auto* opt = app->add_option("--extractors", extractors,
                                "Extractor sets: comma separates sets, '+' joins an ensemble");
    if (extractors_required) opt->required();
  }

  fs::path feature_root() const {
    if (!features.empty()) return features;
    const auto dir = fs::path(manifest).parent_path();
    return fs::is_directory(dir / "features") ? dir / "features" : dir;
  }
};

int run_ingest(const Paths& p, const std::string& out, const Common& common) {
  const auto registry = common.registry();
  const auto sets = parse_sets(p.extractors);
  announce("ingest", {{"manifest", p.manifest}, {"features", p.feature_root()}, {"extractors", p.extractors},
                      {"out", out}},
           0);
  const auto load = load_manifest(p.manifest, p.feature_root(), flatten_sets(sets), registry);
  json rejected = json::array();
  for (const auto& r : load.rejected) rejected.push_back({{"line", r.line}, {"case_id", r.case_id}, {"reason", r.reason}});
  std::cout << json{{"accepted", load.manifest.rows.size()}, {"rejected", rejected}}.dump(2) << '\n';
  if (!out.empty()) write_manifest(load.manifest, out);
  return 0;
}

int run_synth(const SynthConfig& config, std::uint64_t seed, std::string out, const Common& common) {
  if (out.empty()) out = (output_root() / "synth").string();
  announce("synth", {{"patients", config.patients}, {"dim", config.dim}, {"censor_fraction", config.censor_fraction},
                     {"signal_strength", config.signal_strength}, {"time_shape", config.time_shape},
                     {"min_patches", config.min_patches}, {"max_patches", config.max_patches},
                     {"extractors", config.extractors}, {"out", out}},
           seed);
  const auto cohort = synth_cohort(config, Rng(seed), out, common.registry());
  std::cout << json{{"patients", cohort.manifest.rows.size()},
                    {"censored_fraction", cohort.realized_censor_fraction},
                    {"manifest", (fs::path(out) / "manifest.csv").string()}}
                   .dump(2)
            << '\n';
  return 0;
}

int run_concat(const std::string& parts_text, const std::string& in, const std::string& out,
               const std::string& manifest_path, const Common& common) {
  const auto parts = split_list(parts_text);
  require(parts.size() >= 2, ErrorKind::configuration, "concat needs at least two parts");
  const auto registry = common.registry();
  const std::string joined = join_extractors(parts);
  announce("concat", {{"parts", parts}, {"in", in}, {"out", out}, {"manifest", manifest_path}}, 0);

  const fs::path first_dir = fs::path(in) / parts.front();
  require(fs::is_directory(first_dir), ErrorKind::io, "missing feature directory " + first_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(first_dir))
    if (entry.path().extension() == ".milf") files.push_back(entry.path().filename());
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorKind::ingestion, "no .milf files in " + first_dir.string());

  std::size_t dim = 0;
  for (const auto& name : files) {
    std::vector<FeatureMatrix> loaded;
    for (const auto& part : parts) loaded.push_back(read_features(fs::path(in) / part / name, registry));
    const auto matrix = concat_ensemble(loaded).to_matrix();
    dim = matrix.dim;
    write_features(matrix, fs::path(out) / joined / name, registry);
  }
  if (!manifest_path.empty()) {
    auto load = load_manifest(manifest_path, in, parts, registry);
    auto& m = load.manifest;
    m.extractors.push_back(joined);
    for (auto& row : m.rows) {
      const auto source = fs::path(m.feature_path(row, parts.front())).filename();
      row.feature_paths[joined] = (fs::relative(fs::absolute(out), fs::absolute(in)) / joined / source).generic_string();
    }
    write_manifest(m, fs::path(out) / "manifest.csv");
  }
  std::cout << json{{"extractor", joined}, {"files", files.size()}, {"dim", dim}}.dump(2) << '\n';
  return 0;
}

int run_split(const Paths& p, int folds, std::uint64_t seed, const std::string& out, const Common& common) {
  announce("split", {{"manifest", p.manifest}, {"folds", folds}, {"out", out}}, seed);
  const auto load = load_manifest(p.manifest, p.feature_root(), flatten_sets(parse_sets(p.extractors)),
                                  common.registry());
  const auto split = split_kfold(cohort_from_manifest(load.manifest), folds, Rng(seed).split(7));
  write_split(split, out);
  json sizes = json::array();
  for (int f = 0; f < folds; ++f) sizes.push_back(split.members(f).size());
  std::cout << json{{"folds", folds}, {"sizes", sizes}, {"out", out}}.dump(2) << '\n';
  return 0;
}

struct TrainFlags {
  std::string preset;
  std::string heads = "mean";
  std::string dataset;
  std::string out;
  std::string format = "markdown";
  int folds = 5;
  int jobs = 1;
  std::size_t hidden = 512;
  std::size_t attn = 128;
  TrainConfig overrides;
  CLI::Option *lr = nullptr, *wd = nullptr, *l1 = nullptr, *epochs = nullptr, *patience = nullptr, *seed = nullptr,
              *dropout = nullptr, *accum = nullptr, *earliest = nullptr;
};

int run_train(const Paths& p, const TrainFlags& f, const Common& common) {
  TrainConfig train = f.preset.empty() ? TrainConfig{} : TrainConfig::preset(f.preset);
  if (*f.lr) train.learning_rate = f.overrides.learning_rate;
  if (*f.wd) train.weight_decay = f.overrides.weight_decay;
  if (*f.l1) train.l1_coeff = f.overrides.l1_coeff;
  if (*f.epochs) train.epochs = f.overrides.epochs;
  if (*f.patience) train.patience = f.overrides.patience;
  if (*f.seed) train.seed = f.overrides.seed;
  if (*f.dropout) train.dropout = f.overrides.dropout;
  if (*f.accum) train.grad_accum_steps = f.overrides.grad_accum_steps;
  if (*f.earliest) {
    train.earliest_stop_epoch = f.overrides.earliest_stop_epoch;
  } else if (train.earliest_stop_epoch > train.epochs) {
    train.earliest_stop_epoch = train.epochs;
  }
  train.validate();

  const auto registry = common.registry();
  const auto sets = parse_sets(p.extractors);
  require(!sets.empty(), ErrorKind::configuration, "--extractors names no extractor");
  const auto load = load_manifest(p.manifest, p.feature_root(), flatten_sets(sets), registry);
  for (const auto& r : load.rejected)
    std::cerr << json{{"rejected", r.case_id}, {"line", r.line}, {"reason", r.reason}}.dump() << '\n';

  CvRequest request;
  request.dataset = f.dataset.empty() ? (f.preset.empty() ? "cohort" : f.preset) : f.dataset;
  request.manifest = &load.manifest;
  request.extractor_sets = sets;
  for (const auto& h : split_list(f.heads)) request.heads.push_back(parse_head_kind(h));
  request.head_template.hidden_dim = f.hidden;
  request.head_template.attn_dim = f.attn;
  request.train = train;
  request.folds = f.folds;
  request.jobs = f.jobs;
  request.out_dir = f.out.empty() ? output_root() / "cv" : fs::path(f.out);
  request.registry = &registry;
  request.progress = [](const std::string& line) { std::cerr << line << '\n'; };

  json config{{"manifest", p.manifest}, {"features", p.feature_root()}, {"extractors", p.extractors},
              {"heads", f.heads}, {"dataset", request.dataset}, {"preset", f.preset}, {"train", train},
              {"folds", f.folds}, {"jobs", f.jobs}, {"hidden", f.hidden}, {"attn", f.attn},
              {"out", request.out_dir}, {"config_hash", config_hash(request)}};
  announce("train", config, train.seed);

  const auto table = run_cv(request);
  const auto format = parse_report_format(f.format);
  std::cout << (format == ReportFormat::csv ? render_csv(table) : render_markdown(table));
  return 0;
}

int run_eval(const Paths& p, const std::string& checkpoint, const std::string& split_path, int fold,
             const std::string& out, const Common& common) {
  const auto loaded = load_checkpoint(checkpoint);
  const auto registry = common.registry();
  auto sets = parse_sets(p.extractors);
  require(sets.size() <= 1, ErrorKind::configuration, "eval takes a single extractor set");
  if (sets.empty()) {
    const auto hint = loaded.meta.extra.value("extractors", std::string{});
    require(!hint.empty(), ErrorKind::configuration, "eval needs --extractors");
    sets.push_back(split_extractors(hint));
  }
  announce("eval", {{"checkpoint", checkpoint}, {"manifest", p.manifest}, {"extractors", join_extractors(sets[0])},
                    {"split", split_path}, {"fold", fold}, {"head", loaded.config}},
           loaded.meta.seed);
  const auto load = load_manifest(p.manifest, p.feature_root(), sets[0], registry);
  const auto data = load_dataset(load.manifest, sets[0], "eval", 4, registry);
  std::vector<std::size_t> indices;
  if (split_path.empty()) {
    for (std::size_t i = 0; i < data.samples.size(); ++i) indices.push_back(i);
  } else {
    const auto split = read_split(split_path);
    require(fold >= 0 && fold < split.folds, ErrorKind::configuration, "--fold out of range");
    for (std::size_t i = 0; i < data.samples.size(); ++i)
      if (split.fold_of(data.samples[i].case_id) == fold) indices.push_back(i);
  }
  const auto risks = predict_risks(*loaded.head, data, indices);
  const double cindex = evaluate_cindex(*loaded.head, data, indices);
  if (!out.empty()) {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream file(out, std::ios::trunc);
    require(file.good(), ErrorKind::io, "cannot write " + out);
    file << "case_id,risk,survival_months,censored\n";
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto& s = data.samples[indices[k]];
      file << s.case_id << ',' << json(risks[k]).dump() << ',' << json(s.survival_months).dump() << ','
           << (s.censored ? 1 : 0) << '\n';
    }
  }
  std::cout << json{{"cases", indices.size()}, {"cindex", cindex}}.dump(2) << '\n';
  return 0;
}

int run_report(const std::vector<std::string>& inputs, const std::string& format_name, const std::string& out) {
  announce("report", {{"in", inputs}, {"format", format_name}, {"out", out}}, 0);
  const auto format = parse_report_format(format_name);
  ReportTable table;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto part = read_report_csv(inputs[i]);
    if (i == 0) {
      table.seed = part.seed;
      table.config_hash = part.config_hash;
    } else if (part.config_hash != table.config_hash) {
      table.config_hash += "," + part.config_hash;
    }
    table.merge(part);
  }
  if (out.empty()) {
    std::cout << (format == ReportFormat::csv ? render_csv(table) : render_markdown(table));
  } else {
    emit_report(table, format, out);
  }
  return 0;
}

int run_paramcount(const std::string& heads, std::size_t dim, std::size_t hidden, std::size_t attn) {
  std::vector<HeadKind> kinds;
  if (heads == "all") {
    kinds = {HeadKind::mean, HeadKind::max, HeadKind::abmil, HeadKind::transmil};
  } else {
    for (const auto& h : split_list(heads)) kinds.push_back(parse_head_kind(h));
  }
  announce("paramcount", {{"head", heads}, {"dim", dim}, {"hidden", hidden}, {"attn", attn}}, 0);
  for (auto kind : kinds) {
    HeadConfig c;
    c.kind = kind;
    c.input_dim = dim;
    c.hidden_dim = hidden;
    c.attn_dim = attn;
    if (kinds.size() == 1) {
      std::cout << parameter_count(c) << '\n';
    } else {
      std::cout << to_string(kind) << ' ' << parameter_count(c) << '\n';
    }
  }
  return 0;
}

int run_gradcheck(std::uint64_t seed, SuiteTolerances tol) {
  announce("gradcheck", {{"tol_primitive", tol.primitive}, {"tol_head", tol.head}}, seed);
  const auto suite = gradcheck_suite(seed, tol);
  bool ok = true;
  json failures = json::array();
  for (const auto& e : suite) {
    const bool passed = e.report.passed();
    ok = ok && passed;
    std::printf("%-4s %-10s %-24s max_rel_err=%.3e tol=%.0e\n", passed ? "ok" : "FAIL", to_string(e.scope).c_str(),
                e.name.c_str(), e.report.max_error(), e.report.tolerance);
    if (!passed) failures.push_back(e.name);
  }
  if (!ok) {
    std::cerr << json{{"error", {{"kind", "gradient"}, {"message", "gradient check exceeded tolerance"},
                                 {"failed", failures}}}}
                     .dump()
              << '\n';
    return 1;
  }
  return 0;
}

void print_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Survival MIL training and evaluation engine", "milsurv"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--registry", common.registry_path, "JSON object of extra extractor widths");
  app.add_option("--threads", common.threads, "OpenMP threads for kernels (0 keeps the default)");

  Paths ingest_paths;
  std::string ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Validate a manifest against its feature files");
  ingest_paths.add(ingest, false);
  ingest->add_option("--out", ingest_out, "Write the accepted rows as a cleaned manifest");

  SynthConfig synth_config;
  std::uint64_t synth_seed = 0;
  std::string synth_out, synth_extractors = "synth";
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with a known risk signal");
  synth->add_option("--n", synth_config.patients, "Patients")->check(CLI::PositiveNumber);
  synth->add_option("--censor", synth_config.censor_fraction, "Target censored fraction")->check(CLI::Range(0.0, 0.99));
  synth->add_option("--signal", synth_config.signal_strength, "Signal strength (0 for a null cohort)");
  synth->add_option("--shape", synth_config.time_shape, "Weibull shape of event times (1 = exponential)")
      ->check(CLI::PositiveNumber);
  synth->add_option("--dim", synth_config.dim, "Feature width for unregistered extractors")->check(CLI::PositiveNumber);
  synth->add_option("--min-patches", synth_config.min_patches)->check(CLI::PositiveNumber);
  synth->add_option("--max-patches", synth_config.max_patches)->check(CLI::PositiveNumber);
  synth->add_option("--extractors", synth_extractors, "Comma-separated extractor ids to emit");
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out", synth_out, "Output directory (default $MILSURV_OUT/synth)");

  std::string concat_parts, concat_in, concat_out, concat_manifest;
  auto* concat = app.add_subcommand("concat", "Write per-patch ensemble feature files");
  concat->add_option("--parts", concat_parts, "Comma-separated extractor ids in concatenation order")->required();
  concat->add_option("--in", concat_in, "Feature root holding one directory per extractor")->required();
  concat->add_option("--out", concat_out, "Output feature root")->required();
  concat->add_option("--manifest", concat_manifest, "Also write <out>/manifest.csv with the ensemble column");

  Paths split_paths;
  int split_folds = 5;
  std::uint64_t split_seed = 0;
  std::string split_out;
  auto* split = app.add_subcommand("split", "Write stratified k-fold assignments");
  split_paths.add(split, false);
  split->add_option("--folds", split_folds)->check(CLI::Range(2, 1000));
  split->add_option("--seed", split_seed);
  split->add_option("--out", split_out, "Output CSV")->required();

  Paths train_paths;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "K-fold cross-validation over heads and extractor sets");
  train_paths.add(train, true);
  train->add_option("--head", tf.heads, "Comma-separated heads: mean,max,abmil,transmil");
  train->add_option("--preset", tf.preset, "blca | luad | brca");
  tf.lr = train->add_option("--lr", tf.overrides.learning_rate);
  tf.wd = train->add_option("--wd", tf.overrides.weight_decay);
  tf.l1 = train->add_option("--l1", tf.overrides.l1_coeff);
  tf.epochs = train->add_option("--epochs", tf.overrides.epochs);
  tf.patience = train->add_option("--patience", tf.overrides.patience);
  tf.seed = train->add_option("--seed", tf.overrides.seed);
  tf.dropout = train->add_option("--dropout", tf.overrides.dropout);
  tf.earliest = train->add_option("--earliest-stop", tf.overrides.earliest_stop_epoch,
                                  "Earliest epoch early stopping may end training (default 40, capped at --epochs)");
  tf.accum = train->add_option("--accum", tf.overrides.grad_accum_steps, "Slides per optimizer step");
  train->add_option("--folds", tf.folds)->check(CLI::Range(2, 1000));
  train->add_option("--jobs", tf.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);
  train->add_option("--dataset", tf.dataset, "Dataset column name in the report");
  train->add_option("--hidden", tf.hidden)->check(CLI::PositiveNumber);
  train->add_option("--attn", tf.attn)->check(CLI::PositiveNumber);
  train->add_option("--out", tf.out, "Run directory (default $MILSURV_OUT/cv)");
  train->add_option("--format", tf.format, "Report printed to stdout: markdown | csv");

  Paths eval_paths;
  std::string eval_checkpoint, eval_split, eval_out;
  int eval_fold = 0;
  auto* eval = app.add_subcommand("eval", "Concordance of a checkpoint on a manifest");
  eval_paths.add(eval, false);
  eval->add_option("--checkpoint", eval_checkpoint)->required();
  eval->add_option("--split", eval_split, "Restrict to one fold of a split CSV");
  eval->add_option("--fold", eval_fold);
  eval->add_option("--out", eval_out, "Write per-case risks as CSV");
  eval->add_option("--jobs", common.threads, "Kernel threads");

  std::vector<std::string> report_in;
  std::string report_format = "markdown", report_out;
  auto* report = app.add_subcommand("report", "Render or merge report CSVs");
  report->add_option("--in", report_in, "Report CSV files")->required();
  report->add_option("--format", report_format, "markdown | csv");
  report->add_option("--out", report_out, "Output file (default stdout)");

  std::string count_head = "all";
  std::size_t count_dim = 1024, count_hidden = 512, count_attn = 128;
  auto* paramcount = app.add_subcommand("paramcount", "Trainable parameters of a head");
  paramcount->add_option("--head", count_head, "Head name, comma list, or all");
  paramcount->add_option("--dim", count_dim)->check(CLI::PositiveNumber);
  paramcount->add_option("--hidden", count_hidden)->check(CLI::PositiveNumber);
  paramcount->add_option("--attn", count_attn)->check(CLI::PositiveNumber);

  std::uint64_t check_seed = 0;
  SuiteTolerances tolerances;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and head");
  gradcheck->add_option("--seed", check_seed);
  gradcheck->add_option("--tol-primitive", tolerances.primitive);
  gradcheck->add_option("--tol-head", tolerances.head);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), 1);
    return 1;
  }

  try {
    if (common.threads > 0) kernels::set_threads(common.threads);
    if (*ingest) return run_ingest(ingest_paths, ingest_out, common);
    if (*synth) {
      synth_config.extractors = split_list(synth_extractors);
      return run_synth(synth_config, synth_seed, synth_out, common);
    }
    if (*concat) return run_concat(concat_parts, concat_in, concat_out, concat_manifest, common);
    if (*split) return run_split(split_paths, split_folds, split_seed, split_out, common);
    if (*train) return run_train(train_paths, tf, common);
    if (*eval) return run_eval(eval_paths, eval_checkpoint, eval_split, eval_fold, eval_out, common);
    if (*report) return run_report(report_in, report_format, report_out);
    if (*paramcount) return run_paramcount(count_head, count_dim, count_hidden, count_attn);
    if (*gradcheck) return run_gradcheck(check_seed, tolerances);
  } catch (const Error& e) {
    const int code = is_validation_error(e.kind()) ? 1 : 2;
    print_error(to_string(e.kind()), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    print_error("runtime", e.what(), 2);
    return 2;
  }
  return 0;
}
