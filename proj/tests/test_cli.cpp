#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "condistfl/experiment.hpp"

using namespace condistfl;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "condistfl_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(CONDISTFL_CLI) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string last_output() {
  std::ifstream in(kRoot / "last.log");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small images and a small model keep each CLI run to a few seconds.
const char* kSmallConfig = R"([data]
image_size = 32
train_per_client = 8
val_per_client = 2
test_per_client = 2
external_test = 6
radius_min = 4.5,3,2.5,3
radius_max = 6,4.5,4,4.5

[model]
depth = 2
base_channels = 4

[federation]
rounds = 1
local_steps = 1
batch_size = 2
lr_start = 0.1

[eval]
datasets = external,test

[ablation]
local_steps = 10,50,200
total_steps = 200
replicates = 1
)";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    std::ofstream(kRoot / "small.ini") << kSmallConfig;
    ASSERT_EQ(run("gen-data --config " + cfg() + " --out " + dir("data")), 0) << last_output();
  }
  static std::string cfg() { return (kRoot / "small.ini").string(); }
  static std::string dir(const std::string& name) { return (kRoot / name).string(); }
};

}  // namespace

TEST_F(Cli, GenDataIsReproducible) {
  ASSERT_EQ(run("gen-data --config " + cfg() + " --out " + dir("data2")), 0) << last_output();
  for (const auto& entry : fs::recursive_directory_iterator(kRoot / "data")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), kRoot / "data");
    EXPECT_EQ(slurp(entry.path()), slurp(kRoot / "data2" / rel)) << rel;
  }
}

TEST_F(Cli, RefusesNonEmptyOutputWithoutForce) {
  EXPECT_EQ(run("gen-data --config " + cfg() + " --out " + dir("data")), 1);
  EXPECT_NE(last_output().find("--force"), std::string::npos);
  ASSERT_EQ(run("gen-data --config " + cfg() + " --out " + dir("data3")), 0);
  EXPECT_EQ(run("gen-data --config " + cfg() + " --out " + dir("data3") + " --force"), 0) << last_output();
}

TEST_F(Cli, UsageAndConfigErrorsExitWithOne) {
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("train --data " + dir("data")), 1);
  std::ofstream(kRoot / "bad.ini") << "[federation]\nrounds = zero\nbogus = 1\n";
  EXPECT_EQ(run("gen-data --config " + dir("bad.ini") + " --out " + dir("never")), 1);
  EXPECT_NE(last_output().find("bogus"), std::string::npos);
  EXPECT_NE(last_output().find("federation.rounds"), std::string::npos);
  EXPECT_EQ(run("train --config " + cfg() + " --data " + dir("missing") + " --out " + dir("never")), 1);
  EXPECT_EQ(run("defaults"), 0);
  EXPECT_EQ(parse_config(last_output()), ExperimentConfig{});
}

TEST_F(Cli, TrainSmokeThenEvaluate) {
  const auto t0 = std::chrono::steady_clock::now();
  ASSERT_EQ(run("train --config " + cfg() + " --data " + dir("data") + " --out " + dir("run")), 0) << last_output();
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 60.0);
  for (auto f : {"final.ckpt", "best.ckpt", "metrics.jsonl", "config.ini"}) EXPECT_TRUE(fs::exists(kRoot / "run" / f));
  EXPECT_EQ(load_config(kRoot / "run" / "config.ini"), load_config(cfg()));

  ASSERT_EQ(run("eval --config " + cfg() + " --data " + dir("data") + " --checkpoint " + dir("run/final.ckpt") +
                " --out " + dir("eval")),
            0)
      << last_output();
  const auto csv = slurp(kRoot / "eval" / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);  // header + external + 4 client test sets
  auto json = nlohmann::json::parse(slurp(kRoot / "eval" / "report.json"));
  EXPECT_EQ(json.size(), 5u);
  EXPECT_EQ(json[0]["round"], 1);

  ASSERT_EQ(run("eval --union --config " + cfg() + " --data " + dir("data") + " --checkpoint " +
                dir("run/final.ckpt") + " --out " + dir("eval_union")),
            0);
  auto merged = nlohmann::json::parse(slurp(kRoot / "eval_union" / "report.json"));
  EXPECT_EQ(merged[0]["per_class"].size(), 4u);
}

TEST_F(Cli, UntrainedCheckpointScoresLow) {
  const auto cfgv = load_config(cfg());
  save_checkpoint(SegNet<float>(cfgv.model, 999).to_checkpoint(), kRoot / "random.ckpt");
  ASSERT_EQ(run("eval --config " + cfg() + " --data " + dir("data") + " --checkpoint " + dir("random.ckpt") +
                " --out " + dir("eval_random")),
            0)
      << last_output();
  auto json = nlohmann::json::parse(slurp(kRoot / "eval_random" / "report.json"));
  EXPECT_LT(json[0]["average"].get<double>(), 0.2);
}

TEST_F(Cli, AblationWritesOneRowPerMethodAndSetting) {
  ASSERT_EQ(run("ablation --tsv --config " + cfg() + " --data " + dir("data") + " --out " + dir("ablation")), 0)
      << last_output();
  const auto tsv = slurp(kRoot / "ablation" / "ablation.tsv");
  std::istringstream in(tsv);
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::set<std::string>> settings;
  while (std::getline(in, line)) {
    std::istringstream cols(line);
    std::string method, steps, rounds;
    std::getline(cols, method, '\t');
    std::getline(cols, steps, '\t');
    std::getline(cols, rounds, '\t');
    EXPECT_EQ(std::stoul(steps) * std::stoul(rounds), 200u);
    settings[method].insert(steps);
  }
  const std::set<std::string> want{"10", "50", "200"};
  EXPECT_EQ(settings["fedavg"], want);
  EXPECT_EQ(settings["condistfl"], want);
  EXPECT_TRUE(fs::exists(kRoot / "ablation" / "ablation.csv"));
}
