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

#ifndef GMMRESNEXT_EVAL_H_
#define GMMRESNEXT_EVAL_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gmmresnext/dataio.h"
#include "gmmresnext/features.h"
#include "gmmresnext/model.h"

namespace gmmresnext {

struct DcfParams {
  double p_target = 0.01;
  double c_miss = 0.01;
  double c_fa = 0.01;

  // Throws ConfigError.
  void Validate() const;
};

struct TrialScore {
  TrialRecord trial;
  double score = 0.0;
};

// a.b / (|a| |b|); DataError for a zero vector or a length mismatch.
double Cosine(std::span<const double> a, std::span<const double> b);

// Operating point of a threshold sweep. threshold is +inf when the optimum
// lies beyond the largest observed score.
struct OperatingPoint {
  double value = 0.0;
  double threshold = 0.0;
};

// Thresholds sweep the sorted distinct scores plus +inf, with
// P_miss(t) = #{target < t} / n_target and P_fa(t) = #{nontarget >= t} /
// n_nontarget. The EER is read where the rates cross, interpolating linearly
// between the two adjacent sweep points. DataError when a class is empty.
OperatingPoint ComputeEer(std::span<const double> target_scores,
                          std::span<const double> nontarget_scores);

// Normalized minimum of c_miss p P_miss + c_fa (1 - p) P_fa over the same
// sweep, divided by min(c_miss p, c_fa (1 - p)).
OperatingPoint ComputeMinDcf(std::span<const double> target_scores,
                             std::span<const double> nontarget_scores,
                             const DcfParams& params);

void SplitScores(const std::vector<TrialScore>& scores,
                 std::vector<double>* targets, std::vector<double>* nontargets);

struct EvalReport {
  double eer = 0.0;
  double min_dcf = 0.0;
  double threshold_eer = 0.0;
  double threshold_dcf = 0.0;
  int64_t n_target = 0;
  int64_t n_nontarget = 0;
};

EvalReport Evaluate(const std::vector<TrialScore>& scores,
                    const DcfParams& params);

// Returns the embedding of one utterance; throws DataError for unknown ids.
using EmbeddingLookup =
    std::function<std::vector<double>(const std::string& utt_id)>;

// Scores trials by cosine similarity. With use_cache each distinct utterance
// is embedded once; otherwise both sides are embedded per trial.
std::vector<TrialScore> ScoreTrials(const std::vector<TrialRecord>& trials,
                                    const EmbeddingLookup& embed,
                                    bool use_cache = true);

// Full-length, eval-mode embedding of one utterance. Single-path checkpoints
// use `primary`; dual-path checkpoints take the male-GMM LGP in `primary`
// and the female-GMM LGP in `secondary`.
std::vector<double> EmbedUtterance(const Checkpoint& ckpt,
                                   const FeatureMatrix& primary,
                                   const FeatureMatrix* secondary = nullptr);

// "enroll test score" lines, score printed with 17 significant digits.
void WriteScores(const std::filesystem::path& path,
                 const std::vector<TrialScore>& scores);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_EVAL_H_
