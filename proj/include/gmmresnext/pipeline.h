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

// File-based pipeline stages. Every stage reads its inputs from and writes
// its outputs to a work directory, so running the stages one by one gives
// the same bytes as RunPipeline.
//
//   data/{train,eval}.csv, data/trials.txt, wav/      synth-data
//   feats/mfcc/<utt>.feat                              extract-mfcc
//   gmm/{gmm,gmm_male,gmm_female}.bin                  train-gmm
//   feats/{lgp,lgp_male,lgp_female}/<utt>.feat         extract-lgp
//   <out>/model/*.ckpt, <out>/logs/train.jsonl         train / train-dual
//   <out>/embeddings.txt, <out>/scores.txt             embed / score
//   <out>/report.json                                  eval
//
// Each producing directory carries a stamp.json with the stage hash; a
// mismatch against the current config is a DataError.

#ifndef GMMRESNEXT_PIPELINE_H_
#define GMMRESNEXT_PIPELINE_H_

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gmmresnext/config.h"
#include "gmmresnext/eval.h"

namespace gmmresnext {

namespace fs = std::filesystem;

void SynthDataStage(const RunConfig& cfg, const fs::path& root);
void ExtractMfccStage(const RunConfig& cfg, const fs::path& root);
// Global, male-only and female-only GMMs with LGP normalization stats.
void TrainGmmStage(const RunConfig& cfg, const fs::path& root);
void ExtractLgpStage(const RunConfig& cfg, const fs::path& root);

// Single-path model from cfg (LGP features, or MFCC when ablate_gmm).
// Writes <out>/model/final.ckpt.
void TrainStage(const RunConfig& cfg, const fs::path& root, const fs::path& out);
// Dual-path model. Two-step mode also writes the step-1 path checkpoints
// <out>/model/path_m.ckpt and path_f.ckpt.
void TrainDualStage(const RunConfig& cfg, const fs::path& root,
                    const fs::path& out);
// Trains whichever architecture cfg selects.
void TrainModelStage(const RunConfig& cfg, const fs::path& root,
                     const fs::path& out);

void EmbedStage(const RunConfig& cfg, const fs::path& root, const fs::path& out);
void ScoreStage(const RunConfig& cfg, const fs::path& root, const fs::path& out);
EvalReport EvalStage(const RunConfig& cfg, const fs::path& root,
                     const fs::path& out);

// synth-data through eval with outputs in root.
EvalReport RunPipeline(const RunConfig& cfg, const fs::path& root);

// Runs the data, feature and GMM stages whose stamps are missing.
void EnsureUpstream(const RunConfig& cfg, const fs::path& root);

// base, no_gmm, no_mfa, no_2s.
RunConfig ApplyVariant(const RunConfig& base, const std::string& variant);

struct AblationRow {
  std::string variant;
  EvalReport report;
};

// Trains and evaluates the base config and every variant under
// <root>/ablate/<variant>/, then writes ablation.json and ablation.txt there.
std::vector<AblationRow> AblateStage(const RunConfig& cfg, const fs::path& root,
                                     const std::vector<std::string>& variants);

std::string FormatAblationTable(const std::vector<AblationRow>& rows);

// Embeddings text file: "# config_hash <hex>" then "utt v1 ... vE".
std::map<std::string, std::vector<double>> ReadEmbeddings(
    const fs::path& path, uint64_t expected_hash);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_PIPELINE_H_
