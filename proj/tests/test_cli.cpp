// SPDX-License-Identifier: Apache-2.0
//
// Drives the eqcollide binary end to end on the smoke config.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(EQCOLLIDE_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), p) != nullptr) r.output += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config() { return std::string(EQCOLLIDE_SOURCE_DIR) + "/configs/smoke.json"; }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("eqcollide_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& rel) const { return (root_ / rel).string(); }

  /// datagen, both training stages and eval into `dir`; returns the eval output.
  Result pipeline(const std::string& dir) {
    const std::string c = " --config " + config();
    const std::string d = path(dir);
    for (const std::string& a :
         {"datagen" + c + " --out " + d + "/data",
          "train" + c + " --data " + d + "/data --stage 1 --out " + d + "/s1",
          "train" + c + " --data " + d + "/data --stage 2 --init " + d + "/s1 --out " + d + "/s2"}) {
      const auto r = run(a);
      if (r.code != 0) return r;
    }
    return run("eval --checkpoint " + d + "/s2 --data " + d + "/data --schedule 1,3,5,7 --out " + d + "/report.csv");
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, DatagenDoesNotDependOnWorkerCount) {
  ASSERT_EQ(run("datagen --config " + config() + " --out " + path("a") + " --workers 1").code, 0);
  ASSERT_EQ(run("datagen --config " + config() + " --out " + path("b") + " --workers 3").code, 0);
  for (const char* split : {"train", "val", "test"}) {
    EXPECT_EQ(slurp(path("a") + "/" + split + "/manifest.json"), slurp(path("b") + "/" + split + "/manifest.json"));
    EXPECT_EQ(slurp(path("a") + "/" + split + "/00000/positions.f32"),
              slurp(path("b") + "/" + split + "/00000/positions.f32"));
  }
  EXPECT_FALSE(fs::exists(path("a") + "/train/.staging-train"));
}

TEST_F(Cli, PipelineIsReproducible) {
  const auto first = pipeline("one");
  ASSERT_EQ(first.code, 0) << first.output;
  const auto second = pipeline("two");
  ASSERT_EQ(second.code, 0) << second.output;
  const std::string a = slurp(path("one/report.csv")), b = slurp(path("two/report.csv"));
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(path("one/report.summary.csv")), slurp(path("two/report.summary.csv")));
  EXPECT_EQ(a.substr(0, a.find('\n')), "split,sample_id,step,mse");
  const auto m1 = nlohmann::json::parse(slurp(path("one/s2/manifest.json")));
  const auto m2 = nlohmann::json::parse(slurp(path("two/s2/manifest.json")));
  EXPECT_EQ(m1.at("parameters_hash"), m2.at("parameters_hash"));
  EXPECT_EQ(m1.at("stage"), 2);

  // evaluating the same checkpoint again with more workers is byte identical
  ASSERT_EQ(run("eval --checkpoint " + path("one/s2") + " --data " + path("one/data") +
                " --schedule 1,3,5,7 --workers 2 --out " + path("again.csv"))
                .code,
            0);
  EXPECT_EQ(slurp(path("again.csv")), a);

  const auto plotted = run("plot --report " + path("one/report.csv") + " --out " + path("figs"));
  ASSERT_EQ(plotted.code, 0) << plotted.output;
  EXPECT_GT(fs::file_size(path("figs/mse_test.png")), 100u);

  const auto rolled = run("rollout --checkpoint " + path("one/s2") + " --data " + path("one/data") +
                          " --sample 00001 --steps 6 --out " + path("roll") + " --png " + path("roll.png"));
  ASSERT_EQ(rolled.code, 0) << rolled.output;
  EXPECT_TRUE(fs::exists(path("roll/meta.json")));
  EXPECT_TRUE(fs::exists(path("roll.png")));

  const auto eq = run("verify-equivariance --checkpoint " + path("one/s2") + " --data " + path("one/data") +
                      " --group rotation:0.7 --random 2 --steps 3 --out " + path("eq.csv"));
  ASSERT_EQ(eq.code, 0) << eq.output;
  std::stringstream rows(slurp(path("eq.csv")));
  std::string line;
  std::getline(rows, line);
  EXPECT_EQ(line, "sample_id,group,max_relative_deviation");
  int n = 0;
  while (std::getline(rows, line)) {
    ++n;
    EXPECT_LE(std::stod(line.substr(line.rfind(',') + 1)), 1e-4) << line;
  }
  EXPECT_EQ(n, 6);  // 2 test samples x 3 elements

  const auto ft = run("finetune --config " + config() + " --data " + path("one/data") + " --init " + path("one/s2") +
                      " --out " + path("ft") + " --fraction 0.5 --epochs 1");
  ASSERT_EQ(ft.code, 0) << ft.output;
  const auto mf = nlohmann::json::parse(slurp(path("ft/manifest.json")));
  EXPECT_DOUBLE_EQ(mf.at("train").at("finetune_fraction").get<double>(), 0.5);
  EXPECT_EQ(mf.at("train").at("epochs"), 1);
}

TEST_F(Cli, RejectsUnknownConfigKey) {
  const auto r = run("datagen --config " + config() + " --set data.point_count=3 --out " + path("d"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("data.point_count"), std::string::npos) << r.output;
}

TEST_F(Cli, StageTwoNeedsInit) {
  ASSERT_EQ(run("datagen --config " + config() + " --split train --out " + path("d")).code, 0);
  const auto r = run("train --config " + config() + " --data " + path("d") + " --stage 2 --out " + path("s2"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--init"), std::string::npos) << r.output;
}

TEST_F(Cli, TamperedCheckpointIsRefused) {
  ASSERT_EQ(run("datagen --config " + config() + " --out " + path("d")).code, 0);
  ASSERT_EQ(run("train --config " + config() + " --data " + path("d") + " --stage 1 --out " + path("s1")).code, 0);
  const fs::path file = path("s1/params/processor.readout.weight.f32");
  std::string bytes = slurp(file);
  ASSERT_GE(bytes.size(), 4u);
  bytes[bytes.size() - 1] ^= 0x40;
  std::ofstream(file, std::ios::binary | std::ios::trunc) << bytes;
  const auto r = run("eval --checkpoint " + path("s1") + " --data " + path("d") + " --schedule 1 --out " + path("r.csv"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("hash"), std::string::npos) << r.output;
}

TEST_F(Cli, ResumeNeedsSameTrainingConfig) {
  ASSERT_EQ(run("datagen --config " + config() + " --split train --out " + path("d")).code, 0);
  ASSERT_EQ(run("train --config " + config() + " --data " + path("d") + " --stage 1 --out " + path("s1")).code, 0);
  const auto same = run("train --config " + config() + " --data " + path("d") + " --stage 1 --out " + path("s1") +
                        " --resume");
  EXPECT_EQ(same.code, 0) << same.output;
  const auto changed = run("train --config " + config() + " --set train_stage1.learning_rate=0.01 --data " +
                           path("d") + " --stage 1 --out " + path("s1") + " --resume");
  EXPECT_EQ(changed.code, 2);
}

TEST_F(Cli, DivergentTrainingExitsWithNumericalCode) {
  ASSERT_EQ(run("datagen --config " + config() + " --split train --out " + path("d")).code, 0);
  const auto r = run("train --config " + config() + " --set train_stage1.learning_rate=1e30 --set " +
                     "train_stage1.clip_norm=0 --set train_stage1.epochs=6 --data " + path("d") +
                     " --stage 1 --out " + path("s1"));
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST_F(Cli, MissingInputsFail) {
  EXPECT_EQ(run("plot --report " + path("nope.csv") + " --out " + path("f")).code, 2);
  EXPECT_EQ(run("plot --trajectory " + path("nope") + " --out " + path("f.png")).code, 2);
  EXPECT_EQ(run("eval --checkpoint " + path("nope") + " --data " + path("nope") + " --out " + path("r.csv")).code, 2);
  EXPECT_NE(run("bogus-verb").code, 0);
}
