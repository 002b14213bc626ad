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

// Command-line front end. Every subcommand works on a work directory whose
// config.json holds the effective RunConfig; overrides given on the command
// line are written back so later stages see them.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spdlog/spdlog.h"

#include "gmmresnext/config.h"
#include "gmmresnext/pipeline.h"

namespace fs = std::filesystem;
using namespace gmmresnext;

namespace {

struct GlobalOptions {
  std::string workdir = ".";
  std::string config;
  std::string profile = "tiny";
  int components = 0;
  std::string out;
  std::vector<std::string> variants;
  bool no_two_step = false;
  bool quiet = false;
};

RunConfig ResolveConfig(const GlobalOptions& g, const std::string& command) {
  const fs::path root(g.workdir);
  RunConfig cfg;
  if (!g.config.empty()) {
    cfg = LoadRunConfig(g.config);
  } else if (fs::exists(root / "config.json")) {
    cfg = LoadRunConfig(root / "config.json");
  } else {
    cfg = RunConfig::Profile(g.profile);
  }
  if (g.components > 0) cfg.gmm.n_components = g.components;
  if (command == "train") cfg.architecture = Architecture::kSingle;
  if (command == "train-dual") cfg.architecture = Architecture::kDual;
  if (g.no_two_step) cfg.train.no_two_step = true;
  cfg.Finalize();
  ApplySeedOverride(&cfg);
  fs::create_directories(root);
  SaveRunConfig(root / "config.json", cfg);
  return cfg;
}

void PrintReport(const EvalReport& r) {
  std::printf("EER %.4f%%  minDCF %.4f  (%lld target / %lld nontarget)\n",
              100.0 * r.eer, r.min_dcf, static_cast<long long>(r.n_target),
              static_cast<long long>(r.n_nontarget));
}

int Dispatch(const std::string& cmd, const GlobalOptions& g) {
  const RunConfig cfg = ResolveConfig(g, cmd);
  const fs::path root(g.workdir);
  const fs::path out = g.out.empty() ? root : fs::path(g.out);
  if (cmd == "synth-data") {
    SynthDataStage(cfg, root);
  } else if (cmd == "extract-mfcc") {
    ExtractMfccStage(cfg, root);
  } else if (cmd == "train-gmm") {
    TrainGmmStage(cfg, root);
  } else if (cmd == "extract-lgp") {
    ExtractLgpStage(cfg, root);
  } else if (cmd == "train") {
    TrainStage(cfg, root, out);
  } else if (cmd == "train-dual") {
    TrainDualStage(cfg, root, out);
  } else if (cmd == "embed") {
    EmbedStage(cfg, root, out);
  } else if (cmd == "score") {
    ScoreStage(cfg, root, out);
  } else if (cmd == "eval") {
    PrintReport(EvalStage(cfg, root, out));
  } else if (cmd == "run") {
    PrintReport(RunPipeline(cfg, root));
  } else if (cmd == "ablate") {
    std::fputs(FormatAblationTable(AblateStage(cfg, root, g.variants)).c_str(),
               stdout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GMM-ResNext speaker verification pipeline"};
  app.require_subcommand(1, 1);
  GlobalOptions g;
  app.add_option("-w,--workdir", g.workdir, "Work directory")
      ->capture_default_str();
  app.add_option("-c,--config", g.config, "RunConfig JSON file");
  app.add_option("-p,--profile", g.profile,
                 "Defaults when no config exists (tiny|paper)")
      ->capture_default_str();
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");

  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd cmds[] = {
      {"synth-data", "Synthesize the toy corpus, manifests and trial list"},
      {"extract-mfcc", "Compute mean-normalized MFCC features"},
      {"train-gmm", "Train the global and per-gender GMMs"},
      {"extract-lgp", "Compute normalized LGP features"},
      {"train", "Train a single-path model"},
      {"train-dual", "Train the dual-path model"},
      {"embed", "Extract embeddings for the evaluation utterances"},
      {"score", "Cosine-score the trial list"},
      {"eval", "Compute EER and minDCF and write report.json"},
      {"ablate", "Train and evaluate the base model and ablation variants"},
      {"run", "Run synth-data through eval"},
  };
  for (const Cmd& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    const std::string name = c.name;
    if (name == "train-gmm") {
      sub->add_option("--components", g.components, "Mixture size")
          ->check(CLI::PositiveNumber);
    }
    if (name == "train" || name == "train-dual" || name == "embed" ||
        name == "score" || name == "eval") {
      sub->add_option("-o,--out", g.out,
                      "Directory for model and evaluation outputs "
                      "(default: workdir)");
    }
    if (name == "train-dual") {
      sub->add_flag("--no-two-step", g.no_two_step,
                    "Train paths and fusion jointly from scratch");
    }
    if (name == "ablate") {
      g.variants = {"no_gmm", "no_mfa", "no_2s"};
      sub->add_option("--variants", g.variants,
                      "Comma-separated variants (no_gmm,no_mfa,no_2s)")
          ->delimiter(',')
          ->capture_default_str();
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  spdlog::set_level(g.quiet ? spdlog::level::warn : spdlog::level::info);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return Dispatch(cmd, g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
