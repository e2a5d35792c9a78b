// Copyright 2026 The AsyncSpade Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "asyncspade/cli.hpp"

namespace {

namespace fs = std::filesystem;
using asyncspade::cli::run_cli;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("asyncspade_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    if (std::find(args.begin(), args.end(), "--manifest") == args.end()) {
      args.insert(args.begin(), {"--manifest", path("manifest.json")});
    }
    return run_cli(args, out_, err_);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST(SiParsing, Suffixes) {
  using asyncspade::cli::parse_si;
  using asyncspade::cli::parse_si_count;
  EXPECT_EQ(parse_si("2k"), 2000.0);
  EXPECT_EQ(parse_si("1.5M"), 1.5e6);
  EXPECT_EQ(parse_si("3G"), 3e9);
  EXPECT_EQ(parse_si("1e18"), 1e18);
  EXPECT_EQ(parse_si_count("32k"), 32000u);
  EXPECT_THROW(parse_si("k"), asyncspade::ValidationError);
  EXPECT_THROW(parse_si("12x"), asyncspade::ValidationError);
  EXPECT_THROW(parse_si_count("1.5"), asyncspade::ValidationError);
  EXPECT_THROW(parse_si_count("-3"), asyncspade::ValidationError);
}

TEST_F(Cli, GenTraceSizesAndDeterminism) {
  ASSERT_EQ(run({"gen-trace", "--steps", "8", "--dims", "1,2,.,16", "--seed", "4", "--out", path("a")}), 0) << err_.str();
  ASSERT_EQ(run({"gen-trace", "--steps", "8", "--dims", "1,2,.,16", "--seed", "4", "--out", path("b")}), 0);
  for (const char* field : {"query", "key", "value"}) {
    const std::string a = slurp(path("a.") + field + ".bin");
    const std::string b = slurp(path("b.") + field + ".bin");
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.size(), a.find('\n') + 1 + 4u * 1 * 2 * 8 * 16);
  }
  auto man = nlohmann::json::parse(slurp(path("manifest.json")));
  EXPECT_EQ(man["command"], "gen-trace");
  EXPECT_EQ(man["seed"], 4);
  EXPECT_EQ(man["outputs"].size(), 3u);
}

TEST_F(Cli, SeedFallsBackToEnvironment) {
  setenv("ASYNCSPADE_SEED", "77", 1);
  ASSERT_EQ(run({"gen-trace", "--out", path("e")}), 0);
  unsetenv("ASYNCSPADE_SEED");
  EXPECT_EQ(nlohmann::json::parse(slurp(path("manifest.json")))["seed"], 77);
}

TEST_F(Cli, PredictEvalFromTraceFiles) {
  ASSERT_EQ(run({"gen-trace", "--steps", "300", "--dims", "1,2,.,32", "--seed", "1", "--out", path("t")}), 0);
  ASSERT_EQ(run({"predict-eval", "--trace", path("t"), "--select", "24", "--first-step", "191", "--selectors",
                 "oracle,random:5,assembled,unshifted", "--distances", "1,2", "--out", path("r.csv")}),
            0)
      << err_.str();
  const std::string csv = slurp(path("r.csv"));
  EXPECT_EQ(csv.rfind("# asyncspade.overlap.v1\nstep,selector,distance,overlap\n", 0), 0u);
  EXPECT_NE(csv.find("mean,oracle,0,1.000000"), std::string::npos);
  EXPECT_NE(csv.find("mean,unshifted,0,"), std::string::npos);
  EXPECT_NE(csv.find("mean,locality,2,"), std::string::npos);
  // random: C / N_t is 24/192 = 0.125 at the first step
  const auto pos = csv.find("mean,random:5,0,");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_NEAR(std::stod(csv.substr(pos + 16)), 0.11, 0.03);
}

TEST_F(Cli, PredictEvalMalformedTraceReportsOffset) {
  std::ofstream(path("bad.query.bin")) << "{\"version\": 1,,}\n";
  std::ofstream(path("bad.key.bin")) << "";
  std::ofstream(path("bad.value.bin")) << "";
  EXPECT_EQ(run({"predict-eval", "--trace", path("bad")}), 4);
  EXPECT_NE(err_.str().find("parse error at byte"), std::string::npos);
}

TEST_F(Cli, SimulatePresetIsFullyOverlapped) {
  ASSERT_EQ(run({"simulate", "--preset", "qwen3-8b-b8-32k-a100-p6", "--out", path("tl.json")}), 0) << err_.str();
  EXPECT_NE(out_.str().find("TPOT 42.780000 ms"), std::string::npos);
  EXPECT_NE(out_.str().find("stall total 0.000000 ms"), std::string::npos);
  auto tl = nlohmann::json::parse(slurp(path("tl.json")));
  EXPECT_EQ(tl["schema"], "asyncspade.timeline.v1");
  EXPECT_TRUE(fs::exists(path("manifest.json")));
}

TEST_F(Cli, SimulateInstantLinkAndSlowCache) {
  ASSERT_EQ(run({"simulate", "--bandwidth", "1e18", "--cache-latency", "0", "--launch", "0"}), 0) << err_.str();
  EXPECT_NE(out_.str().find("TPOT 42.780000 ms"), std::string::npos);
  ASSERT_EQ(run({"simulate", "--cache-latency", "2x"}), 0) << err_.str();
  EXPECT_EQ(out_.str().find("stall total 0.000000 ms"), std::string::npos);
  EXPECT_NE(out_.str().find("cache-compute"), std::string::npos);
}

TEST_F(Cli, SimulateLiveMode) {
  ASSERT_EQ(run({"simulate", "--model", "qwen3-1.7b", "--pack", "28", "--steps", "4", "--live", "--bandwidth", "1G"}),
            0)
      << err_.str();
  EXPECT_NE(out_.str().find("TPOT"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run({"simulate", "--launch", "4e-3"}), 3);
  EXPECT_NE(err_.str().find("infeasible"), std::string::npos);
  EXPECT_EQ(run({"flops", "--model", "nope"}), 2);
  EXPECT_NE(err_.str().find("qwen3-8b"), std::string::npos);
  EXPECT_EQ(run({"flops", "--bogus-flag"}), 2);
  EXPECT_EQ(run({"gen-trace", "--out", "/nonexistent/dir/x"}), 4);
  EXPECT_EQ(run({"simulate", "--stall-policy", "drop"}), 2);
}

TEST_F(Cli, FlopsReport) {
  ASSERT_EQ(run({"flops", "--model", "qwen3-8b", "--strategy", "asyncspade", "-T", "32768", "-C", "2048", "--out",
                 path("f.json")}),
            0);
  auto j = nlohmann::json::parse(slurp(path("f.json")));
  EXPECT_EQ(j["rows"][0]["attn"], 1207959552u);
  EXPECT_EQ(j["rows"][0]["param"], 13891534848u);
  ASSERT_EQ(run({"flops", "--strategy", "full", "-T", "0", "-C", "0", "--out", path("z.json")}), 0);
  j = nlohmann::json::parse(slurp(path("z.json")));
  EXPECT_EQ(j["rows"][0]["attn"], 0u);
  EXPECT_EQ(j["rows"][0]["total"], j["rows"][0]["param"]);
  ASSERT_EQ(run({"flops", "--all-strategies", "-T", "32k", "--out", path("all.json")}), 0);
  j = nlohmann::json::parse(slurp(path("all.json")));
  ASSERT_EQ(j["rows"].size(), 4u);
  const char* order[] = {"asyncspade", "quest", "tova", "full"};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(j["rows"][i]["strategy"], order[i]);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_LT(j["rows"][i - 1]["attn"], j["rows"][i]["attn"]);
}

TEST_F(Cli, BandwidthReport) {
  ASSERT_EQ(run({"bandwidth", "--preset", "qwen3-8b-b8-32k-a100-p6", "--out", path("b.json")}), 0) << err_.str();
  EXPECT_NE(out_.str().find("107.71"), std::string::npos);
  auto j = nlohmann::json::parse(slurp(path("b.json")));
  EXPECT_EQ(j["pack_bytes_to_cache"], 1179648u);
  EXPECT_EQ(j["pack_bytes_to_inference"], 808452096u);
  EXPECT_NEAR(j["relative_delta"].get<double>(), 0.054, 0.001);
  EXPECT_EQ(run({"bandwidth", "--inference-latency", "1e-3", "--launch", "5e-4"}), 3);
}

}  // namespace
