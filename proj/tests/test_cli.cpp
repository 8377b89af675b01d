#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Run run(const std::string& args) {
  static milsurv::testing::TempDir scratch("cli_io");
  const auto out = scratch / "out.txt", err = scratch / "err.txt";
  const std::string cmd = std::string("'") + MILSURV_CLI_PATH + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

nlohmann::json last_json_line(const std::string& text) {
  std::istringstream in(text);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return nlohmann::json::parse(last);
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return files;
}

}  // namespace

TEST(Cli, ParamcountTransMil) {
  const auto r = run("paramcount --head transmil --dim 1024");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("2673172"), std::string::npos) << r.out;
}

TEST(Cli, ParamcountAllHeads) {
  const auto r = run("paramcount");
  EXPECT_EQ(r.code, 0);
  for (const char* n : {"526852", "592645", "2673172"}) EXPECT_NE(r.out.find(n), std::string::npos) << n;
}

TEST(Cli, SynthIsDeterministic) {
  milsurv::testing::TempDir a("cli_a"), b("cli_b");
  for (const auto* d : {&a, &b}) {
    const auto r = run("synth --n 20 --dim 4 --max-patches 24 --seed 5 --out '" + d->path().string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto ta = tree(a.path()), tb = tree(b.path());
  EXPECT_FALSE(ta.empty());
  EXPECT_EQ(ta, tb);
}

TEST(Cli, ConcatBuildsEnsembleFiles) {
  milsurv::testing::TempDir dir("cli_concat");
  ASSERT_EQ(run("synth --n 20 --max-patches 24 --extractors uni,hibou-base --out '" + dir.path().string() + "'").code, 0);
  const auto r = run("concat --parts uni,hibou-base --in '" + (dir / "features").string() + "' --out '" +
                     (dir / "ens").string() + "' --manifest '" + (dir / "manifest.csv").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out).at("dim"), 1792);
  const auto ingest = run("ingest --manifest '" + (dir / "ens/manifest.csv").string() + "' --features '" +
                          (dir / "features").string() + "' --extractors uni+hibou-base");
  EXPECT_EQ(ingest.code, 0) << ingest.err;
}

TEST(Cli, TrainAndReport) {
  milsurv::testing::TempDir dir("cli_train");
  ASSERT_EQ(run("synth --n 24 --dim 6 --min-patches 3 --max-patches 6 --out '" + dir.path().string() + "'").code, 0);
  const auto r = run("train --manifest '" + (dir / "manifest.csv").string() +
                     "' --extractors synth --head mean --epochs 2 --folds 3 --hidden 8 --format csv --out '" +
                     (dir / "cv").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mean,synth,"), std::string::npos) << r.out;
  const auto rep = run("report --in '" + (dir / "cv/report.csv").string() + "' --format markdown");
  EXPECT_EQ(rep.code, 0) << rep.err;
  EXPECT_NE(rep.out.find("| synth | mean |"), std::string::npos) << rep.out;
}

TEST(Cli, ValidationErrorExitsOneWithJson) {
  milsurv::testing::TempDir dir("cli_err");
  std::ofstream(dir / "m.csv") << "case_id,slide_id,survival_months,censored,uni\nA,A1,-3,0,uni/A.milf\n";
  const auto r = run("ingest --manifest '" + (dir / "m.csv").string() + "'");
  EXPECT_EQ(r.code, 1);
  const auto j = last_json_line(r.err);
  EXPECT_EQ(j.at("error").at("kind"), "ingestion");
  EXPECT_EQ(j.at("error").at("exit_code"), 1);
}

TEST(Cli, RuntimeErrorExitsTwo) {
  milsurv::testing::TempDir dir("cli_rt");
  std::ofstream(dir / "bad.milc") << "not a checkpoint at all";
  std::ofstream(dir / "m.csv") << "case_id,slide_id,survival_months,censored\n";
  const auto r = run("eval --manifest '" + (dir / "m.csv").string() + "' --checkpoint '" + (dir / "bad.milc").string() + "'");
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NO_THROW(last_json_line(r.err).at("error"));
}

TEST(Cli, UnknownFlagIsRejected) {
  const auto r = run("paramcount --bogus 3");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_json_line(r.err).at("error").at("kind"), "usage");
}

TEST(Cli, UnknownHeadIsConfigurationError) {
  const auto r = run("paramcount --head resnet");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_json_line(r.err).at("error").at("kind"), "configuration");
}

TEST(Cli, GradcheckPasses) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
