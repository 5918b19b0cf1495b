#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string(GPABC_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return o;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) o.output += buf;
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("gpabc_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Cli, ListModels) {
  const auto o = run_cli("list-models");
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.output.find("lotka-volterra"), std::string::npos);
  EXPECT_NE(o.output.find("hes1"), std::string::npos);
  EXPECT_NE(o.output.find("signal-transduction"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli("gen-data --seed 1 --out /tmp").code, 2);
  const auto unknown = run_cli("gen-data --model nothing --seed 1 --out /tmp");
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.output.find("hes1"), std::string::npos);
  EXPECT_EQ(run_cli("reproduce --experiment nothing").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
}

TEST(Cli, GenerateFitInfer) {
  const auto dir = scratch("pipeline");
  const auto gen = run_cli("gen-data --model lotka-volterra --seed 1 --out " + dir.string());
  ASSERT_EQ(gen.code, 0) << gen.output;
  const auto csv = dir / "lotka-volterra_seed1.csv";
  ASSERT_TRUE(fs::exists(csv));
  ASSERT_TRUE(fs::exists(dir / "lotka-volterra_seed1.json"));
  std::ifstream in(csv);
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 12);

  const auto fit = run_cli("fit-gp --data " + csv.string() + " --restarts 2 --seed 3 --out " + (dir / "gp").string());
  ASSERT_EQ(fit.code, 0) << fit.output;
  const auto gp = nlohmann::json::parse(std::ifstream(dir / "gp" / "gp.json"));
  EXPECT_FALSE(gp.empty());
  EXPECT_TRUE(fs::exists(dir / "gp" / "smoothed.csv"));

  const auto bad = run_cli("infer --data " + csv.string() + " --model lotka-volterra --method gp-abc-olcm --particles 1");
  EXPECT_EQ(bad.code, 2);

  const auto inf = run_cli("infer --data " + csv.string() +
                           " --model lotka-volterra --method gp-abc-olcm --particles 30 --generations 2 --restarts 2"
                           " --seed 4 --out " + (dir / "run").string());
  ASSERT_EQ(inf.code, 0) << inf.output;
  EXPECT_TRUE(fs::exists(dir / "run" / "populations.csv"));
  const auto rep = nlohmann::json::parse(std::ifstream(dir / "run" / "report.json"));
  EXPECT_FALSE(rep.empty());
  fs::remove_all(dir);
}

TEST(Cli, MissingSeedIsReported) {
  const auto dir = scratch("seed");
  const auto o = run_cli("gen-data --model hes1 --out " + dir.string());
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.output.find("seed: "), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, ReproduceFromPlanFile) {
  const auto dir = scratch("plan");
  std::ofstream(dir / "plan.json") << R"({"model": "lotka-volterra", "dataset_seeds": [1],
    "algorithms": ["gp-abc-smc"], "n_particles": 20, "generations_gp": 1, "restarts": 2, "seed": 9})";
  const auto o = run_cli("reproduce --plan " + (dir / "plan.json").string() + " --out " + (dir / "out").string());
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));
  std::ofstream(dir / "typo.json") << R"({"modell": "hes1"})";
  EXPECT_EQ(run_cli("reproduce --plan " + (dir / "typo.json").string()).code, 2);
  fs::remove_all(dir);
}
