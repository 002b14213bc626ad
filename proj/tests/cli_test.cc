// Copyright (c) 2026 The GMM-ResNext Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "gmmresnext/config.h"
#include "gmmresnext/gmm.h"
#include "gmmresnext/pipeline.h"
#include "test_util.h"

using namespace gmmresnext;
using gmmresnext::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// A run small enough for a few seconds of wall time.
RunConfig MicroConfig() {
  RunConfig c = RunConfig::Profile("tiny");
  c.data.n_speakers = 4;
  c.data.train_utts_per_speaker = 3;
  c.data.eval_utts_per_speaker = 2;
  c.data.min_seconds = 1.0;
  c.data.max_seconds = 1.3;
  c.gmm.n_components = 4;
  c.gmm.n_iters = 4;
  c.model.stage_channels = {4, 4, 4, 4};
  c.model.asp_bottleneck = 8;
  c.model.embedding_dim = 8;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  c.train.crop_frames = 50;
  c.Finalize();
  return c;
}

int RunCli(const std::string& args) {
  const std::string cmd =
      std::string(GMMRESNEXT_CLI) + " -q " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string Slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config round trips and rejects unknown keys") {
  for (const char* name : {"tiny", "paper"}) {
    RunConfig c = RunConfig::Profile(name);
    c.Finalize();
    RunConfig back = RunConfig::FromJson(nlohmann::json::parse(c.Canonical()));
    back.Finalize();
    CHECK(back.Canonical() == c.Canonical());
    CHECK(back.StageHash(RunConfig::Stage::kEval) ==
          c.StageHash(RunConfig::Stage::kEval));
  }
  RunConfig paper = RunConfig::Profile("paper");
  paper.Finalize();
  CHECK(paper.model.n_gaussians == 512);
  CHECK(paper.model.stage_blocks == std::array<int, 4>{3, 3, 9, 3});
  CHECK_THROWS_AS(RunConfig::Profile("huge"), ConfigError);
  auto j = nlohmann::json::parse(MicroConfig().Canonical());
  j["gmm"]["n_component"] = 3;
  CHECK_THROWS_AS(RunConfig::FromJson(j), ConfigError);
  auto k = nlohmann::json::parse(MicroConfig().Canonical());
  k["train"]["margin"] = -1.0;
  CHECK_THROWS_AS(RunConfig::FromJson(k), ConfigError);
}

TEST_CASE("stage hashes follow their sections") {
  using S = RunConfig::Stage;
  RunConfig a = MicroConfig();
  RunConfig b = a;
  b.dcf.p_target = 0.05;
  b.Finalize();
  CHECK(a.StageHash(S::kModel) == b.StageHash(S::kModel));
  CHECK(a.StageHash(S::kEval) != b.StageHash(S::kEval));
  RunConfig c = a;
  c.gmm.n_components = 8;
  c.Finalize();
  CHECK(c.model.n_gaussians == 8);
  CHECK(a.StageHash(S::kMfcc) == c.StageHash(S::kMfcc));
  CHECK(a.StageHash(S::kGmm) != c.StageHash(S::kGmm));
  CHECK(a.StageHash(S::kModel) != c.StageHash(S::kModel));
  RunConfig d = a;
  d.seed = 8;
  d.Finalize();
  CHECK(a.StageHash(S::kData) != d.StageHash(S::kData));
}

TEST_CASE("seed override from the environment") {
  RunConfig c = MicroConfig();
  ::setenv("GMMRESNEXT_SEED", "99", 1);
  ApplySeedOverride(&c);
  CHECK(c.seed == 99);
  ::setenv("GMMRESNEXT_SEED", "12x", 1);
  CHECK_THROWS_AS(ApplySeedOverride(&c), ConfigError);
  ::unsetenv("GMMRESNEXT_SEED");
  ApplySeedOverride(&c);
  CHECK(c.seed == 99);
}

TEST_CASE("ablation variants") {
  RunConfig base = MicroConfig();
  RunConfig g = ApplyVariant(base, "no_gmm");
  CHECK(g.architecture == Architecture::kSingle);
  CHECK(g.model.ablate_gmm);
  CHECK(g.model.InputChannels() == 80);
  CHECK(ApplyVariant(base, "no_mfa").model.AspInputChannels() == 4);
  CHECK(ApplyVariant(base, "no_2s").train.no_two_step);
  CHECK(ApplyVariant(base, "base").Canonical() == base.Canonical());
  CHECK_THROWS_AS(ApplyVariant(base, "no_bn"), ConfigError);
  std::vector<AblationRow> rows = {{"base", {0.05, 0.4, 0, 0, 10, 20}},
                                   {"no_mfa", {0.1, 0.5, 0, 0, 10, 20}}};
  const std::string table = FormatAblationTable(rows);
  CHECK(table.find("base") != std::string::npos);
  CHECK(table.find("no_mfa") != std::string::npos);
  CHECK(table.find("5.00") != std::string::npos);
}

TEST_CASE("stage-by-stage CLI run equals the one-shot pipeline") {
  TempDir one("cli_one"), staged("cli_staged");
  const RunConfig cfg = MicroConfig();
  SaveRunConfig(one.path() / "config.json", cfg);
  SaveRunConfig(staged.path() / "config.json", cfg);
  const std::string w1 = " -w " + one.path().string();
  const std::string w2 = " -w " + staged.path().string();
  REQUIRE(RunCli(w1 + " run") == 0);
  for (const char* stage : {"synth-data", "extract-mfcc", "train-gmm",
                            "extract-lgp", "train-dual", "embed", "score",
                            "eval"}) {
    REQUIRE_MESSAGE(RunCli(w2 + " " + stage) == 0, stage);
  }
  const std::string report = Slurp(one.path() / "report.json");
  CHECK(!report.empty());
  CHECK(report == Slurp(staged.path() / "report.json"));
  auto j = nlohmann::json::parse(report);
  CHECK(j.contains("eer"));
  CHECK(j.contains("min_dcf"));
  CHECK(j["config"]["seed"] == 7);
  CHECK(j["n_target"].get<int>() == 4);
  CHECK(j["n_nontarget"].get<int>() == 24);
  CHECK(fs::exists(staged.path() / "model" / "path_m.ckpt"));
  CHECK(Slurp(one.path() / "scores.txt") == Slurp(staged.path() / "scores.txt"));

  // A changed upstream section makes downstream artifacts stale.
  RunConfig changed = cfg;
  changed.data.n_speakers = 6;
  changed.Finalize();
  SaveRunConfig(staged.path() / "config.json", changed);
  CHECK(RunCli(w2 + " extract-mfcc") == 2);
  CHECK(RunCli(w2 + " score") == 2);

  // Mixture size override reaches the LGP width.
  REQUIRE(RunCli(w1 + " train-gmm --components 6") == 0);
  REQUIRE(RunCli(w1 + " extract-lgp") == 0);
  int checked = 0;
  for (const auto& e : fs::directory_iterator(one.path() / "feats" / "lgp")) {
    if (e.path().extension() != ".feat") continue;
    CHECK(ReadFeatures(e.path()).dim == 6);
    ++checked;
  }
  CHECK(checked == 20);
  CHECK(RunConfig::FromJson(nlohmann::json::parse(
                                Slurp(one.path() / "config.json")))
            .gmm.n_components == 6);
}

TEST_CASE("ablate writes one row per variant") {
  TempDir dir("cli_ablate");
  SaveRunConfig(dir.path() / "config.json", MicroConfig());
  REQUIRE(RunCli("-w " + dir.path().string() +
                 " ablate --variants no_gmm,no_mfa,no_2s") == 0);
  auto j = nlohmann::json::parse(Slurp(dir.path() / "ablate" / "ablation.json"));
  REQUIRE(j.is_array());
  REQUIRE(j.size() == 4);
  CHECK(j[0]["variant"] == "base");
  CHECK(j[3]["variant"] == "no_2s");
  CHECK(fs::exists(dir.path() / "ablate" / "ablation.txt"));
  CHECK(fs::exists(dir.path() / "ablate" / "no_gmm" / "report.json"));
}

TEST_CASE("exit codes") {
  TempDir dir("cli_codes");
  const std::string w = "-w " + dir.path().string();
  CHECK(RunCli("") == 1);
  CHECK(RunCli(w + " frobnicate") == 1);
  CHECK(RunCli(w + " train-gmm --components -3") == 1);
  {
    std::ofstream os(dir.path() / "bad.json");
    os << R"({"profile": "tiny", "gmm": {"bogus": 1}})";
  }
  CHECK(RunCli(w + " -c " + (dir.path() / "bad.json").string() + " synth-data") ==
        1);
  // An unreadable config file is a usage error.
  CHECK(RunCli(w + " -c /nonexistent/config.json eval") == 1);
  // Data stages need their inputs.
  TempDir empty("cli_empty");
  SaveRunConfig(empty.path() / "config.json", MicroConfig());
  CHECK(RunCli("-w " + empty.path().string() + " extract-mfcc") == 2);

  // Stages do not build missing upstream artifacts on their own.
  CHECK(RunCli("-w " + empty.path().string() + " train-dual") == 2);

  // A diverging optimizer is a numeric failure.
  TempDir nan_dir("cli_nan");
  RunConfig c = MicroConfig();
  c.train.lr0 = 1e300;
  SaveRunConfig(nan_dir.path() / "config.json", c);
  CHECK(RunCli("-w " + nan_dir.path().string() + " run") == 3);
}
