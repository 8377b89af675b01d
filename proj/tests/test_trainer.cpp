#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "milsurv/checkpoint.hpp"
#include "milsurv/error.hpp"
#include "milsurv/ops.hpp"
#include "milsurv/optim.hpp"
#include "milsurv/survival.hpp"
#include "milsurv/trainer.hpp"
#include "test_util.hpp"

using namespace milsurv;

namespace {

Dataset make_dataset(std::size_t n, std::size_t d, Rng rng) {
  Dataset data;
  data.name = "toy";
  data.extractors = {"toy"};
  std::vector<double> direction(d);
  for (auto& v : direction) v = rng.normal() / std::sqrt(static_cast<double>(d));
  Cohort cohort;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rng.normal();
    Sample s;
    s.case_id = "C" + std::to_string(i);
    const auto m = static_cast<std::size_t>(rng.uniform_int(3, 12));
    s.bag = Tensor<float>({m, d});
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t j = 0; j < d; ++j)
        s.bag.values()[p * d + j] = static_cast<float>(rng.normal() + 2 * r * direction[j]);
    s.survival_months = 30 * std::exp(-r) * rng.uniform(0.5, 1.5);
    s.censored = rng.bernoulli(0.3);
    cohort.push_back({s.case_id, s.survival_months, s.censored, -1});
    data.samples.push_back(std::move(s));
  }
  data.edges = discretize(cohort, 4);
  for (std::size_t i = 0; i < n; ++i) data.samples[i].bin = cohort[i].bin;
  return data;
}

HeadConfig tiny_head(HeadKind kind, std::size_t d) {
  HeadConfig c;
  c.kind = kind;
  c.input_dim = d;
  c.hidden_dim = 8;
  c.attn_dim = 4;
  c.transmil.heads = 2;
  c.transmil.head_dim = 4;
  c.transmil.landmarks = 4;
  c.transmil.residual_kernel = 3;
  return c;
}

std::vector<std::vector<double>> grads(MilHead<double>& head) {
  std::vector<std::vector<double>> out;
  for (auto& p : head.parameters()) {
    const auto g = p.value.grad_buffer();
    out.emplace_back(g.begin(), g.end());
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(EarlyStopping, StopsPatienceEpochsAfterLastImprovement) {
  for (int patience : {5, 10}) {
    EarlyStopping stop(40, patience);
    int stopped = 0;
    for (int epoch = 1; epoch <= 200 && !stopped; ++epoch) {
      const double metric = epoch <= 41 ? 0.5 + 0.001 * epoch : 0.5;
      if (stop.update(epoch, metric)) stopped = epoch;
    }
    EXPECT_EQ(stopped, 41 + patience);
    EXPECT_EQ(stop.best_epoch(), 41);
  }
}

TEST(EarlyStopping, NeverStopsBeforeEarliestEpoch) {
  EarlyStopping stop(40, 3);
  for (int epoch = 1; epoch < 40; ++epoch) EXPECT_FALSE(stop.update(epoch, 0.6)) << epoch;
  EXPECT_TRUE(stop.update(40, 0.6));
  EXPECT_EQ(stop.best_epoch(), 1);
}

TEST(EarlyStopping, EqualMetricIsNotImprovement) {
  EarlyStopping stop(0, 2);
  EXPECT_FALSE(stop.update(1, 0.7));
  EXPECT_TRUE(stop.improved());
  EXPECT_FALSE(stop.update(2, 0.7));
  EXPECT_FALSE(stop.improved());
  EXPECT_TRUE(stop.update(3, 0.7));
}

TEST(Adam, ZeroGradientWithoutDecayLeavesParameters) {
  Rng rng(1);
  auto head = build_head<double>(tiny_head(HeadKind::abmil, 6), rng);
  std::vector<std::vector<double>> before;
  for (auto& p : head->parameters()) before.emplace_back(p.value.values().begin(), p.value.values().end());
  Adam<double> adam(head->parameters(), AdamConfig{});
  for (int i = 0; i < 5; ++i) adam.step();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto v = head->parameters()[i].value.values();
    EXPECT_EQ(before[i], std::vector<double>(v.begin(), v.end()));
  }
  EXPECT_EQ(adam.steps(), 5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Parameter<double>> params{{"w", Tensor<double>({3}, std::vector<double>{1, 2, 3}), true}};
  params[0].value.set_requires_grad();
  params[0].value.grad_buffer() = {0.5, -2, 0};
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Adam<double> adam(params, cfg);
  adam.step();
  const auto v = params[0].value.values();
  EXPECT_NEAR(v[0], 0.9, 1e-6);
  EXPECT_NEAR(v[1], 2.1, 1e-6);
  EXPECT_EQ(v[2], 3.0);
}

TEST(L1Penalty, EqualsDirectEnumeration) {
  Rng rng(2);
  for (auto kind : {HeadKind::mean, HeadKind::abmil, HeadKind::transmil}) {
    auto head = build_head<double>(tiny_head(kind, 6), rng);
    double direct = 0;
    for (const auto& p : head->parameters())
      if (p.regularized)
        for (double v : p.value.values()) direct += std::abs(v);
    Tape<double> tape(false);
    EXPECT_NEAR(l1_penalty(tape, *head, 1e-3).item(), 1e-3 * direct, 1e-15);
  }
}

TEST(L1Penalty, ExcludesBiasesNormsAndClassToken) {
  Rng rng(3);
  auto head = build_head<double>(tiny_head(HeadKind::transmil, 6), rng);
  for (const auto& p : head->parameters()) {
    const bool excluded = p.name.find("bias") != std::string::npos || p.name.find("norm") != std::string::npos ||
                          p.name == "cls_token";
    EXPECT_EQ(p.regularized, !excluded) << p.name;
  }
}

TEST(Accumulation, MatchesGradientOfMeanLoss) {
  auto data = make_dataset(32, 6, Rng(4));
  TrainConfig cfg;
  cfg.l1_coeff = 1e-3;
  for (auto kind : {HeadKind::mean, HeadKind::abmil, HeadKind::transmil}) {
    Rng init(5);
    auto head = build_head<double>(tiny_head(kind, 6), init);
    Rng rng(0);
    for (const auto& s : data.samples) backprop_slide(*head, s.bag.cast<double>(), s.bin, s.censored, cfg, rng, false);
    const auto accumulated = grads(*head);

    head->zero_grad();
    Tape<double> tape;
    Tensor<double> total;
    for (const auto& s : data.samples) {
      const auto logits = head->forward(tape, s.bag.cast<double>(), false, rng);
      const auto loss = ops::add(tape, nll_loss(tape, logits, s.bin, s.censored), l1_penalty(tape, *head, cfg.l1_coeff));
      total = total.defined() ? ops::add(tape, total, loss) : loss;
    }
    tape.backward(ops::affine(tape, total, 1.0 / 32, 0.0));
    const auto mean = grads(*head);
    for (std::size_t i = 0; i < mean.size(); ++i)
      for (std::size_t j = 0; j < mean[i].size(); ++j)
        EXPECT_LE(std::abs(accumulated[i][j] - mean[i][j]), 1e-6 * std::max(1.0, std::abs(mean[i][j])));
  }
}

TEST(TrainFold, WritesLogAndBestCheckpoint) {
  milsurv::testing::TempDir dir("fold");
  const auto data = make_dataset(40, 6, Rng(6));
  auto cfg = TrainConfig::preset("blca");
  cfg.epochs = 6;
  cfg.earliest_stop_epoch = 2;
  cfg.patience = 2;
  cfg.grad_accum_steps = 8;
  cfg.learning_rate = 5e-3;
  const auto split = split_kfold(data.cohort(), 4, Rng(1));
  const auto result = train_fold(data, tiny_head(HeadKind::mean, 6), cfg, split, 0, {dir.path(), "h"});
  ASSERT_FALSE(result.failed) << result.error;
  EXPECT_TRUE(std::filesystem::exists(dir / "log.csv"));
  ASSERT_TRUE(std::filesystem::exists(result.checkpoint));
  double best = -1;
  for (const auto& e : result.history) best = std::max(best, e.val_cindex);
  EXPECT_EQ(result.best_val_cindex, best);
  EXPECT_EQ(static_cast<int>(result.history.size()), result.epochs_run);

  const auto loaded = load_checkpoint(result.checkpoint);
  EXPECT_EQ(loaded.meta.epoch, result.best_epoch);
  EXPECT_EQ(evaluate_cindex(*loaded.head, data, split.members(0)), result.best_val_cindex);
}

TEST(TrainFold, AccumulationOfOneIsPlainStepping) {
  const auto data = make_dataset(12, 4, Rng(7));
  auto cfg = TrainConfig::preset("blca");
  cfg.epochs = 2;
  cfg.earliest_stop_epoch = 0;
  cfg.grad_accum_steps = 1;
  const auto split = split_kfold(data.cohort(), 3, Rng(2));
  const auto a = train_fold(data, tiny_head(HeadKind::max, 4), cfg, split, 1);
  const auto b = train_fold(data, tiny_head(HeadKind::max, 4), cfg, split, 1);
  ASSERT_FALSE(a.failed);
  EXPECT_EQ(a.final_train_loss, b.final_train_loss);
  EXPECT_EQ(a.best_val_cindex, b.best_val_cindex);
}

TEST(TrainConfig, Presets) {
  const auto blca = TrainConfig::preset("blca"), luad = TrainConfig::preset("luad"), brca = TrainConfig::preset("brca");
  EXPECT_EQ(blca.learning_rate, 2e-4);
  EXPECT_EQ(blca.weight_decay, 1e-3);
  EXPECT_EQ(blca.patience, 10);
  EXPECT_EQ(luad.learning_rate, 1e-4);
  EXPECT_EQ(luad.weight_decay, 5e-4);
  EXPECT_EQ(luad.patience, 5);
  EXPECT_EQ(brca.learning_rate, 5e-5);
  EXPECT_EQ(brca.patience, 10);
  for (const auto& c : {blca, luad, brca}) {
    EXPECT_EQ(c.l1_coeff, 1e-4);
    EXPECT_EQ(c.grad_accum_steps, 32);
    EXPECT_EQ(c.earliest_stop_epoch, 40);
    EXPECT_EQ(c.bag_weight, 0.7);
  }
  EXPECT_THROW(TrainConfig::preset("kirc"), Error);
}

TEST(TrainConfig, ValidationErrors) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    try {
      c.validate();
    } catch (const Error& e) {
      return e.kind() == ErrorKind::configuration;
    }
    return false;
  };
  EXPECT_TRUE(bad([](TrainConfig& c) { c.learning_rate = 0; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.epochs = 0; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.epochs = 10; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.dropout = 1.0; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.grad_accum_steps = 0; }));
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(TrainConfig, JsonRoundTrip) {
  auto c = TrainConfig::preset("luad");
  c.seed = 99;
  nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(back.learning_rate, c.learning_rate);
  EXPECT_EQ(back.seed, 99u);
}

class CvTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthConfig s;
    s.patients = 30;
    s.dim = 6;
    s.min_patches = 3;
    s.max_patches = 8;
    s.extractors = {"a", "b", "c"};
    synth_cohort(s, Rng(3), dir_.path());
    load_ = load_manifest(dir_ / "manifest.csv", dir_ / "features");
  }

  CvRequest request(int jobs) const {
    CvRequest r;
    r.manifest = &load_.manifest;
    r.extractor_sets = {{"a"}, {"b"}, {"a", "c"}};
    r.heads = {HeadKind::mean, HeadKind::abmil};
    r.head_template = tiny_head(HeadKind::mean, 6);
    r.train = TrainConfig::preset("blca");
    r.train.epochs = 2;
    r.train.earliest_stop_epoch = 1;
    r.folds = 3;
    r.jobs = jobs;
    return r;
  }

  milsurv::testing::TempDir dir_{"cv"};
  ManifestLoad load_;
};

TEST_F(CvTest, OneRowPerHeadAndExtractorSet) {
  const auto table = run_cv(request(1));
  ASSERT_EQ(table.rows.size(), 6u);
  for (const auto& row : table.rows) {
    ASSERT_EQ(row.cells.size(), 1u);
    EXPECT_EQ(row.cells[0].fold_values.size(), 3u);
  }
}

TEST_F(CvTest, DeterministicAcrossRunsAndJobCounts) {
  const auto a = render_csv(run_cv(request(1)));
  const auto b = render_csv(run_cv(request(1)));
  const auto c = render_csv(run_cv(request(3)));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST_F(CvTest, WritesFoldArtifacts) {
  milsurv::testing::TempDir out("cvout");
  auto r = request(1);
  r.heads = {HeadKind::mean};
  r.extractor_sets = {{"a"}};
  r.out_dir = out.path();
  std::vector<std::string> lines;
  r.progress = [&](const std::string& line) { lines.push_back(line); };
  const auto table = run_cv(r);
  EXPECT_EQ(lines.size(), 3u);
  EXPECT_EQ(slurp(out / "report.csv"), render_csv(table));
  EXPECT_TRUE(std::filesystem::exists(out / "config.json"));
  std::size_t checkpoints = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(out.path()))
    checkpoints += e.path().extension() == ".milc";
  EXPECT_EQ(checkpoints, 3u);
}
