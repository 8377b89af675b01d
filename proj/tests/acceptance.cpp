// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "milsurv/checks.hpp"
#include "milsurv/error.hpp"
#include "milsurv/features.hpp"
#include "milsurv/heads.hpp"
#include "milsurv/ops.hpp"
#include "milsurv/survival.hpp"
#include "milsurv/trainer.hpp"

using namespace milsurv;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  const auto start = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  if (!o.pass) ++failures;
  std::printf("%s  %-26s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// max |a − b| / max |b|
double relative_gap(std::span<const double> a, std::span<const double> b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale > 0 ? diff / scale : diff;
}

template <class T>
Tensor<T> random_bag(std::size_t m, std::size_t d, Rng& rng) {
  Tensor<T> bag({m, d});
  for (auto& v : bag.values()) v = static_cast<T>(rng.normal());
  return bag;
}

HeadConfig reduced_head(HeadKind kind, std::size_t d) {
  HeadConfig c;
  c.kind = kind;
  c.input_dim = d;
  c.hidden_dim = 16;
  c.attn_dim = 8;
  c.transmil.heads = 2;
  c.transmil.head_dim = 8;
  c.transmil.landmarks = 8;
  c.transmil.residual_kernel = 5;
  return c;
}

Outcome parameter_counts() {
  const auto start = Clock::now();
  const std::pair<HeadKind, std::size_t> expected[] = {
      {HeadKind::mean, 526852}, {HeadKind::max, 526852}, {HeadKind::abmil, 592645}, {HeadKind::transmil, 2673172}};
  std::string detail;
  bool ok = true;
  for (const auto& [kind, count] : expected) {
    HeadConfig c;
    c.kind = kind;
    c.input_dim = 1024;
    const auto got = parameter_count(c);
    Rng rng(0);
    const auto built = build_head<float>(c, rng)->parameter_size();
    ok = ok && got == count && built == count;
    detail += to_string(kind) + "=" + std::to_string(built) + " ";
  }
  const double secs = seconds_since(start);
  return {ok && secs < 1.0, detail + "limit 1s"};
}

Outcome ensemble_dims() {
  Rng rng(1);
  auto part = [&](const std::string& id) {
    FeatureMatrix f;
    f.extractor_id = id;
    f.patches = 3;
    f.dim = *default_registry().dim(id);
    f.coords = {{0, 0}, {256, 0}, {512, 0}};
    f.values.resize(f.patches * f.dim);
    for (auto& v : f.values) v = static_cast<float>(rng.normal());
    return f;
  };
  const auto r50 = part("resnet50"), uni = part("uni"), hib = part("hibou-base");
  const std::size_t dims[] = {concat_ensemble(std::vector{r50, uni}).dim, concat_ensemble(std::vector{hib, r50}).dim,
                              concat_ensemble(std::vector{uni, hib}).dim,
                              concat_ensemble(std::vector{r50, uni, hib}).dim};
  const bool ok = dims[0] == 2048 && dims[1] == 1792 && dims[2] == 1792 && dims[3] == 2816;
  return {ok, std::to_string(dims[0]) + "/" + std::to_string(dims[1]) + "/" + std::to_string(dims[2]) + "/" +
                  std::to_string(dims[3])};
}

Outcome gradient_fidelity() {
  const auto start = Clock::now();
  SuiteTolerances tol;
  tol.primitive = 1e-6;
  tol.head = 1e-4;
  const auto suite = gradcheck_suite(0, tol);
  double worst_primitive = 0, worst_head = 0;
  int heads = 0;
  bool ok = true;
  std::string failed;
  for (const auto& e : suite) {
    ok = ok && e.report.passed();
    if (!e.report.passed()) failed += " " + e.name;
    if (e.scope == CheckScope::primitive) worst_primitive = std::max(worst_primitive, e.report.max_error());
    if (e.scope != CheckScope::primitive) worst_head = std::max(worst_head, e.report.max_error());
    heads += e.scope == CheckScope::head;
  }
  const double secs = seconds_since(start);
  ok = ok && heads == 4 && secs < 120;
  return {ok, std::to_string(suite.size()) + " checks, primitive max " + fmt("%.2e", worst_primitive) +
                  " (<1e-6), block/head max " + fmt("%.2e", worst_head) + " (<1e-4)" + failed};
}

Outcome concordance_oracle() {
  const auto start = Clock::now();
  Rng rng(2);
  int exact = 0, undefined_ok = 0, instances = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 50));
    std::vector<double> r(n), t(n);
    std::vector<bool> c(n);
    const bool ties = trial % 4 == 0;
    const bool all_censored = trial % 25 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = ties ? static_cast<double>(rng.uniform_int(0, 4)) : rng.normal();
      t[i] = ties ? static_cast<double>(rng.uniform_int(1, 6)) : rng.uniform(0, 100);
      c[i] = all_censored || rng.bernoulli(0.45);
    }
    double credit = 0;
    long pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (!c[i] && t[i] < t[j]) {
          ++pairs;
          credit += r[i] > r[j] ? 1.0 : r[i] == r[j] ? 0.5 : 0.0;
        }
    ++instances;
    if (pairs == 0) {
      try {
        concordance_index(r, t, c);
      } catch (const Error& e) {
        undefined_ok += e.kind() == ErrorKind::undefined_metric;
      }
      continue;
    }
    exact += concordance_index(r, t, c) == credit / static_cast<double>(pairs);
  }
  const double secs = seconds_since(start);
  const bool ok = exact + undefined_ok == instances && undefined_ok >= 8 && secs < 10;
  return {ok, std::to_string(exact) + " exact, " + std::to_string(undefined_ok) + " undefined-metric, of " +
                  std::to_string(instances)};
}

Outcome nll_examples() {
  auto nll = [](std::vector<double> z, int bin, bool censored) {
    Tape<double> tape(false);
    const std::size_t bins = z.size();
    return nll_loss(tape, Tensor<double>({1, bins}, std::move(z)), bin, censored).item();
  };
  const double e1 = std::abs(nll({0, 0, 0, 0}, 0, false) - std::log(2.0));
  const double e2 = std::abs(nll({-800, -800, -800, -800}, 3, true) + std::log(1 - 1e-7));
  const std::vector<double> z{0.2, -0.1, 0.4, 0.0};
  double h[4], s[4], run = 1;
  for (int k = 0; k < 4; ++k) {
    h[k] = 1 / (1 + std::exp(-z[k]));
    run *= 1 - h[k];
    s[k] = run;
  }
  const double e3 = std::abs(nll(z, 2, false) + std::log(s[1]) + std::log(h[2]));
  const double worst = std::max({e1, e2, e3});
  return {worst <= 1e-10, "max abs error " + fmt("%.1e", worst) + " (<=1e-10)"};
}

Outcome accumulation_equivalence() {
  Rng data_rng(3);
  std::vector<Tensor<double>> bags;
  std::vector<int> bins;
  std::vector<bool> censored;
  for (int i = 0; i < 32; ++i) {
    bags.push_back(random_bag<double>(static_cast<std::size_t>(data_rng.uniform_int(3, 20)), 16, data_rng));
    bins.push_back(static_cast<int>(data_rng.uniform_int(0, 3)));
    censored.push_back(data_rng.bernoulli(0.45));
  }
  TrainConfig cfg;
  cfg.grad_accum_steps = 32;
  double worst = 0;
  for (auto kind : {HeadKind::mean, HeadKind::max, HeadKind::abmil, HeadKind::transmil}) {
    Rng init(4);
    auto head = build_head<double>(reduced_head(kind, 16), init);
    Rng unused(0);
    for (int i = 0; i < 32; ++i) backprop_slide(*head, bags[i], bins[i], censored[i], cfg, unused, false);
    std::vector<double> accumulated, mean;
    for (auto& p : head->parameters()) accumulated.insert(accumulated.end(), p.value.grad().begin(), p.value.grad().end());

    head->zero_grad();
    Tape<double> tape;
    Tensor<double> total;
    for (int i = 0; i < 32; ++i) {
      const auto logits = head->forward(tape, bags[i], false, unused);
      const auto loss = ops::add(tape, nll_loss(tape, logits, bins[i], censored[i]), l1_penalty(tape, *head, cfg.l1_coeff));
      total = total.defined() ? ops::add(tape, total, loss) : loss;
    }
    tape.backward(ops::affine(tape, total, 1.0 / 32, 0.0));
    for (auto& p : head->parameters()) mean.insert(mean.end(), p.value.grad().begin(), p.value.grad().end());
    worst = std::max(worst, relative_gap(accumulated, mean));
  }
  return {worst < 1e-6, "4 heads, max relative gap " + fmt("%.2e", worst) + " (<1e-6)"};
}

Outcome permutation_invariance() {
  Rng rng(5);
  double worst = 0;
  for (auto kind : {HeadKind::mean, HeadKind::max, HeadKind::abmil}) {
    auto head = build_head<double>(reduced_head(kind, 16), rng);
    const std::size_t m = 25;
    const auto bag = random_bag<double>(m, 16, rng);
    Tape<double> tape(false);
    const auto base = head->forward(tape, bag, false, rng);
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    for (int k = 0; k < 100; ++k) {
      rng.shuffle(std::span<std::size_t>(perm));
      const auto shuffled = ops::gather_rows(tape, bag, perm);
      const auto out = head->forward(tape, shuffled, false, rng);
      worst = std::max(worst, relative_gap(out.values(), base.values()));
    }
  }
  return {worst <= 1e-5, "mean/max/abmil x100 permutations, max relative gap " + fmt("%.2e", worst) + " (<=1e-5)"};
}

// The pseudo-inverse iteration has not converged on near-singular softmax
// kernels after the default 6 steps, so the comparison runs it to convergence.
constexpr std::size_t kConvergedIterations = 30;

Outcome nystrom_consistency() {
  Rng rng(6);
  TransMilConfig tc;
  tc.heads = 4;
  tc.head_dim = 8;
  tc.residual_kernel = 7;
  const std::size_t hidden = 32, inner = tc.inner_dim();
  auto uniform = [&](Shape shape, double bound) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
  };
  double worst = 0, worst_default = 0;
  int cases = 0;
  for (std::size_t n : {1u, 2u, 5u, 16u, 33u, 64u}) {
    for (std::size_t extra : {0u, 3u}) {
      tc.landmarks = n + extra;
      const double b = 1.0 / std::sqrt(static_cast<double>(hidden));
      const AttentionWeights<double> w{uniform({hidden, 3 * inner}, b), uniform({inner, hidden}, b),
                                       uniform({hidden}, 0.1), uniform({tc.heads, tc.residual_kernel}, 0.3)};
      const auto x = random_bag<double>(n, hidden, rng);
      Tape<double> tape(false);
      const auto exact = exact_attention(tape, x, w, tc);
      tc.pinv_iterations = kConvergedIterations;
      worst = std::max(worst, relative_gap(nystrom_attention(tape, x, w, tc).values(), exact.values()));
      tc.pinv_iterations = TransMilConfig{}.pinv_iterations;
      worst_default = std::max(worst_default, relative_gap(nystrom_attention(tape, x, w, tc).values(), exact.values()));
      ++cases;
    }
  }
  return {worst <= 1e-4, std::to_string(cases) + " cases, pinv " + std::to_string(kConvergedIterations) +
                             " iterations: max relative gap " + fmt("%.2e", worst) + " (<=1e-4); default " +
                             std::to_string(TransMilConfig{}.pinv_iterations) + " iterations: " +
                             fmt("%.2e", worst_default)};
}

struct CvRun {
  ReportTable table;
  double seconds = 0;
};

CvRun run_synthetic_cv(const fs::path& dir, double signal, const fs::path& out_dir) {
  SynthConfig s;
  s.patients = 400;
  s.dim = 32;
  s.censor_fraction = 0.45;
  s.signal_strength = signal;
  const auto start = Clock::now();
  if (!fs::exists(dir / "manifest.csv")) synth_cohort(s, Rng(0), dir);
  const auto load = load_manifest(dir / "manifest.csv", dir / "features");
  CvRequest r;
  r.dataset = "synthetic";
  r.manifest = &load.manifest;
  r.extractor_sets = {{"synth"}};
  r.heads = {HeadKind::mean};
  r.train = TrainConfig::preset("blca");
  r.train.epochs = 60;
  r.folds = 5;
  r.jobs = 1;
  r.out_dir = out_dir;
  CvRun run{run_cv(r), 0};
  run.seconds = seconds_since(start);
  return run;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work_dir = (fs::temp_directory_path() / "milsurv_acceptance").string();
  app.add_option("--work-dir", work_dir, "Scratch directory for synthetic cohorts and runs");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(work_dir);
  fs::remove_all(work);
  fs::create_directories(work);

  report("parameter-counts", parameter_counts);
  report("ensemble-dimensions", ensemble_dims);
  report("gradient-fidelity", gradient_fidelity);
  report("concordance-oracle", concordance_oracle);
  report("nll-worked-examples", nll_examples);
  report("accumulation-equivalence", accumulation_equivalence);
  report("permutation-invariance", permutation_invariance);
  report("nystrom-consistency", nystrom_consistency);

  CvRun signal_run;
  report("learnability", [&] {
    signal_run = run_synthetic_cv(work / "signal", 1.0, work / "run_a");
    const auto null_run = run_synthetic_cv(work / "null", 0.0, {});
    const auto& folds = signal_run.table.rows.at(0).cells.at(0).fold_values;
    const int good = static_cast<int>(std::count_if(folds.begin(), folds.end(), [](double c) { return c >= 0.85; }));
    const auto& null_cell = null_run.table.rows.at(0).cells.at(0);
    const double null_mean = null_cell.mean();
    const double total = signal_run.seconds + null_run.seconds;
    std::string detail = "folds";
    for (double c : folds) detail += fmt(" %.3f", c);
    detail += " (" + std::to_string(good) + "/5 >= 0.85), null mean " + fmt("%.3f", null_mean) + " in [0.45,0.55], " +
              fmt("%.0fs", total) + " (<600s)";
    const bool ok = !signal_run.table.rows[0].cells[0].failed && good >= 4 && !null_cell.failed &&
                    null_mean >= 0.45 && null_mean <= 0.55 && total < 600;
    return Outcome{ok, detail};
  });

  report("determinism", [&] {
    run_synthetic_cv(work / "signal", 1.0, work / "run_b");
    const auto a = slurp(work / "run_a" / "report.csv"), b = slurp(work / "run_b" / "report.csv");
    return Outcome{!a.empty() && a == b, std::to_string(a.size()) + "-byte report CSVs " + (a == b ? "identical" : "differ")};
  });

  report("early-stopping", [] {
    bool ok = true;
    std::string detail;
    for (int patience : {5, 10}) {
      EarlyStopping stop(40, patience);
      int stopped = 0;
      for (int epoch = 1; epoch <= 200 && !stopped; ++epoch)
        if (stop.update(epoch, epoch <= 41 ? 0.5 + 0.001 * epoch : 0.5)) stopped = epoch;
      ok = ok && stopped == 41 + patience;
      detail += "patience " + std::to_string(patience) + " stops at " + std::to_string(stopped) + "; ";
      EarlyStopping flat(40, patience);
      int first = 0;
      for (int epoch = 1; epoch <= 200 && !first; ++epoch)
        if (flat.update(epoch, 0.5)) first = epoch;
      ok = ok && first == 40;
      detail += "flat trace stops at " + std::to_string(first) + "; ";
    }
    return Outcome{ok, detail};
  });

  std::printf("%s: %d failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
