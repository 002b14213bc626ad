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

#ifndef GMMRESNEXT_CONFIG_H_
#define GMMRESNEXT_CONFIG_H_

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "gmmresnext/eval.h"
#include "gmmresnext/features.h"
#include "gmmresnext/model.h"
#include "gmmresnext/train.h"

namespace gmmresnext {

struct DataConfig {
  int n_speakers = 16;
  int train_utts_per_speaker = 10;
  int eval_utts_per_speaker = 4;
  double min_seconds = 2.2;
  double max_seconds = 3.8;
};

struct GmmConfig {
  int n_components = 64;
  int n_iters = 30;
  double variance_floor_factor = 1e-3;
  int kmeans_max_frames = 20000;
};

enum class Architecture { kSingle, kDual };

// Everything a run depends on. Sections serialize in a fixed key order;
// model.n_gaussians and model.mfcc_dim follow gmm.n_components and
// mfcc.n_ceps and are not stored separately.
struct RunConfig {
  std::string profile = "tiny";
  uint64_t seed = 7;
  Architecture architecture = Architecture::kDual;
  DataConfig data;
  MfccConfig mfcc;
  GmmConfig gmm;
  ModelConfig model;
  TrainConfig train;
  DcfParams dcf;

  // Desk-scale and full-scale defaults. Throws ConfigError otherwise.
  static RunConfig Profile(const std::string& name);

  nlohmann::ordered_json ToJson() const;
  // Starts from the named profile; missing keys keep its values and
  // unknown keys are ConfigErrors.
  static RunConfig FromJson(const nlohmann::json& j);
  std::string Canonical() const { return ToJson().dump(); }

  // Re-derives linked fields and checks every section.
  void Finalize();
  void Validate() const;

  // Model-input features follow the data, mfcc and seed sections; each
  // later stage adds its own sections.
  enum class Stage { kData, kMfcc, kGmm, kModel, kEval };
  uint64_t StageHash(Stage stage) const;
};

std::string ArchitectureToString(Architecture a);
Architecture ParseArchitecture(const std::string& s);

RunConfig LoadRunConfig(const std::filesystem::path& path);
void SaveRunConfig(const std::filesystem::path& path, const RunConfig& cfg);

// Applies GMMRESNEXT_SEED when set; ConfigError for a malformed value.
void ApplySeedOverride(RunConfig* cfg);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_CONFIG_H_
