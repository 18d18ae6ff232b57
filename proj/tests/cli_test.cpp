#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "promptblend/cli.hpp"
#include "test_util.hpp"

namespace pb = promptblend;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = pb::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Small, fast fixture flags shared by the end-to-end tests.
std::vector<std::string> small(std::vector<std::string> args) {
  for (const char* a : {"--fixture-size", "40", "--pretrain-epochs", "1"}) {
    args.emplace_back(a);
  }
  return args;
}

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  const auto r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownFlagOrSubcommand) {
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  const auto r = run({"train", "--no-such-flag"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, BatchSizeZeroNamesFlag) {
  const auto dir = pb::testing::temp_dir("cli_bs0");
  const auto r = run({"train", "--batch-size", "0", "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--batch-size"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, TopLargerThanBasisLeavesNoOutput) {
  const auto dir = pb::testing::temp_dir("cli_top");
  const auto r = run(small({"train", "--epochs", "1", "--top", "9", "--out", (dir / "out").string()}));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--top"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, MissingDatasetIsValidationError) {
  const auto dir = pb::testing::temp_dir("cli_missing");
  const auto r = run({"train", "--data", (dir / "nope.jsonl").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(dir / "o"));
}

TEST(Cli, TrainWritesArtifactsAndIsDeterministic) {
  const auto dir = pb::testing::temp_dir("cli_train");
  auto args = [&](const std::string& out) {
    return small({"train", "--data", "fixture", "--basis", "default", "--epochs", "2",
                  "--batch-size", "10", "--seed", "1", "--out", (dir / out).string()});
  };
  ASSERT_EQ(run(args("a")).code, 0);
  ASSERT_EQ(run(args("b")).code, 0);
  for (const char* f : {"curve.csv", "report.txt", "report.json", "checkpoint.pbld", "record.json", "lm.pbld"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  }
  for (const char* f : {"curve.csv", "report.txt", "report.json", "checkpoint.pbld", "lm.pbld"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir / "a.staging"));

  // eval and report consume the train outputs.
  const auto ev = run({"eval", "--fixture-size", "40", "--lm", (dir / "a" / "lm.pbld").string(),
                       "--predictor", (dir / "a" / "checkpoint.pbld").string()});
  EXPECT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("prompted mean loss"), std::string::npos);
  const auto rep = run({"report", "--run", (dir / "a").string(), "--out", (dir / "rep").string()});
  EXPECT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(slurp(dir / "rep" / "report.txt"), slurp(dir / "a" / "report.txt"));
}

TEST(Cli, SeedFallsBackToEnvironment) {
  const auto dir = pb::testing::temp_dir("cli_env");
  ::setenv("PROMPTBLEND_SEED", "5", 1);
  ASSERT_EQ(run(small({"train", "--epochs", "1", "--out", (dir / "env").string()})).code, 0);
  ::unsetenv("PROMPTBLEND_SEED");
  ASSERT_EQ(run(small({"train", "--epochs", "1", "--seed", "5", "--out", (dir / "flag").string()})).code, 0);
  EXPECT_EQ(slurp(dir / "env" / "curve.csv"), slurp(dir / "flag" / "curve.csv"));
  ::setenv("PROMPTBLEND_SEED", "abc", 1);
  EXPECT_EQ(run(small({"train", "--epochs", "1", "--out", (dir / "bad").string()})).code, 1);
  ::unsetenv("PROMPTBLEND_SEED");
}

TEST(Cli, PretrainEmbedOrtho) {
  const auto dir = pb::testing::temp_dir("cli_stages");
  const auto pre = run(small({"pretrain", "--out", (dir / "lm").string()}));
  ASSERT_EQ(pre.code, 0) << pre.err;
  EXPECT_TRUE(fs::exists(dir / "lm" / "checkpoint.pbld"));
  const std::string lm = (dir / "lm" / "checkpoint.pbld").string();
  const auto emb = run({"embed", "--lm", lm, "--out", (dir / "emb").string()});
  ASSERT_EQ(emb.code, 0) << emb.err;
  EXPECT_TRUE(fs::exists(dir / "emb" / "basis.pbld"));
  const auto orth = run({"ortho", "--lm", lm});
  ASSERT_EQ(orth.code, 0) << orth.err;
  EXPECT_NE(orth.out.find("orthogonality score"), std::string::npos);

  std::ofstream(dir / "basis.txt") << "# custom\nWrite pseudocode for it\nWrite pseudocode for it\n";
  const auto dup = run({"ortho", "--lm", lm, "--basis", (dir / "basis.txt").string()});
  ASSERT_EQ(dup.code, 0) << dup.err;
  EXPECT_NE(dup.out.find("orthogonality score: 0.0000"), std::string::npos);
  EXPECT_NE(dup.out.find("similarity 1.0000"), std::string::npos);

  const auto trained = run(small({"train", "--lm", lm, "--epochs", "1", "--out", (dir / "t").string()}));
  ASSERT_EQ(trained.code, 0) << trained.err;
  EXPECT_FALSE(fs::exists(dir / "t" / "lm.pbld"));
}

TEST(Cli, CorruptCheckpointIsValidationError) {
  const auto dir = pb::testing::temp_dir("cli_corrupt");
  std::ofstream(dir / "bad.pbld") << "not a checkpoint";
  EXPECT_EQ(run({"ortho", "--lm", (dir / "bad.pbld").string()}).code, 1);
}

TEST(Cli, ReportComparesRuns) {
  const auto dir = pb::testing::temp_dir("cli_compare");
  ASSERT_EQ(run(small({"train", "--epochs", "3", "--batch-size", "2", "--out", (dir / "b2").string()})).code, 0);
  ASSERT_EQ(run(small({"train", "--epochs", "3", "--batch-size", "10", "--out", (dir / "b10").string()})).code, 0);
  const auto r = run({"report", "--run", (dir / "b2").string(), "--run", (dir / "b10").string(),
                      "--out", (dir / "cmp").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "cmp" / "curve_1.csv"));
  EXPECT_TRUE(fs::exists(dir / "cmp" / "curves_summary.txt"));
  EXPECT_NE(r.out.find("stability="), std::string::npos);
}
