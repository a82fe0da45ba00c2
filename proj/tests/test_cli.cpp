#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string output;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("xtrend_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli_output.txt";
  const std::string cmd = std::string(XTREND_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sample(const std::string& name) { return std::string(XTREND_SOURCE_DIR) + "/samples/" + name; }

TEST(Cli, HelpListsEverySubcommandAndExitsZero) {
  const auto dir = scratch("help");
  const auto r = run_cli("--help", dir);
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"ingest", "features", "cpd", "train", "backtest", "report", "synth", "gp-harness", "--config",
                        "--seed", "--out"}) {
    EXPECT_NE(r.output.find(s), std::string::npos) << s;
  }
  const auto sub = run_cli("synth --help", dir);
  EXPECT_EQ(sub.code, 0);
  EXPECT_NE(sub.output.find("--kind"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto dir = scratch("usage");
  EXPECT_EQ(run_cli("", dir).code, 2);
  EXPECT_EQ(run_cli("no-such-command", dir).code, 2);
  EXPECT_EQ(run_cli("synth --no-such-flag", dir).code, 2);
  EXPECT_EQ(run_cli("synth --kind sawtooth", dir).code, 2);
  EXPECT_EQ(run_cli("backtest", dir).code, 2);
  EXPECT_EQ(run_cli("--config " + (dir / "missing.json").string() + " backtest", dir).code, 2);
}

TEST(Cli, InvalidConfigExitsTwo) {
  const auto dir = scratch("badcfg");
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"seed": 1, "strategies": [{"kind": "long", "colour": "blue"}]})";
  }
  const auto r = run_cli("--config " + (dir / "bad.json").string() + " backtest", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("colour"), std::string::npos);
}

TEST(Cli, RuntimeFailureExitsOne) {
  const auto dir = scratch("runtime");
  EXPECT_EQ(run_cli("report --run " + (dir / "nowhere").string() + " --out " + dir.string(), dir).code, 2);
  {
    std::ofstream f(dir / "prices.csv");
    f << "date,ticker,close\n2000-01-03,A,100\n2000-01-04,A,-5\n";
  }
  EXPECT_NE(run_cli("ingest --prices " + (dir / "prices.csv").string() + " --out " + dir.string(), dir).code, 0);
  EXPECT_EQ(run_cli("synth --n 50 --out /proc/xtrend_unwritable", dir).code, 1);
}

TEST(Cli, SynthIsDeterministicPerSeed) {
  const auto a = scratch("synth_a"), b = scratch("synth_b"), c = scratch("synth_c");
  ASSERT_EQ(run_cli("--seed 9 --out " + a.string() + " synth --kind mixed --n 400 --assets 3", a).code, 0);
  ASSERT_EQ(run_cli("synth --kind mixed --n 400 --assets 3 --seed 9 --out " + b.string(), b).code, 0);
  ASSERT_EQ(run_cli("synth --kind mixed --n 400 --assets 3 --seed 10 --out " + c.string(), c).code, 0);
  EXPECT_EQ(slurp(a / "synthetic.csv"), slurp(b / "synthetic.csv"));
  EXPECT_EQ(slurp(a / "assets.json"), slurp(b / "assets.json"));
  EXPECT_NE(slurp(a / "synthetic.csv"), slurp(c / "synthetic.csv"));
}

TEST(Cli, DataCommandsRoundTrip) {
  const auto dir = scratch("data");
  ASSERT_EQ(run_cli("synth --kind trend --n 700 --seed 3 --out " + dir.string(), dir).code, 0);
  const auto prices = (dir / "synthetic.csv").string();
  ASSERT_EQ(run_cli("ingest --prices " + prices + " --out " + (dir / "ingest").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "ingest" / "prices.csv"), slurp(prices));
  ASSERT_EQ(run_cli("features --prices " + prices + " --out " + (dir / "f").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "f" / "features.csv").rfind("ticker,date,", 0), 0u);
  ASSERT_EQ(run_cli("cpd segment --prices " + prices + " --l-max 63 --nu 0.95 --out " + (dir / "c").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "c" / "regimes.csv").rfind("ticker,t0,t1,", 0), 0u);
  EXPECT_EQ(run_cli("cpd segment --prices " + prices + " --nu 0.2 --out " + (dir / "c").string(), dir).code, 2);
}

TEST(Cli, BacktestOutputsAreIdenticalAcrossRuns) {
  const auto a = scratch("bt_a"), b = scratch("bt_b");
  const std::string cfg = "--config " + sample("smoke_backtest.json");
  ASSERT_EQ(run_cli(cfg + " --out " + a.string() + " backtest", a).code, 0);
  ASSERT_EQ(run_cli(cfg + " --out " + b.string() + " backtest", b).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "cli_output.txt") continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GE(files, 10u);
  const auto rep = run_cli("report --run " + a.string() + " --out " + (a / "summary").string(), a);
  EXPECT_EQ(rep.code, 0);
  EXPECT_NE(rep.output.find("causality audit: passed"), std::string::npos);
}

TEST(Cli, TrainWritesModelAndLog) {
  const auto dir = scratch("train");
  ASSERT_EQ(run_cli("--config " + sample("smoke_backtest.json") + " --out " + dir.string() + " train --until 2003-01-01",
                    dir)
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir / "model_xtrend_m0.json"));
  EXPECT_TRUE(fs::exists(dir / "train_xtrend_m0.csv"));
  EXPECT_EQ(run_cli("--config " + sample("smoke_backtest.json") + " train --strategy nope", dir).code, 2);
}

}  // namespace
