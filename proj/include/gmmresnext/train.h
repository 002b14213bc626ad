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

#ifndef GMMRESNEXT_TRAIN_H_
#define GMMRESNEXT_TRAIN_H_

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gmmresnext/features.h"
#include "gmmresnext/model.h"
#include "gmmresnext/nncore.h"

namespace gmmresnext {

struct TrainConfig {
  double lr0 = 0.001;
  double lr_decay_per_epoch = 0.03;
  double weight_decay = 2e-5;
  double margin = 0.2;
  double scale = 30.0;
  int batch_size = 32;
  int epochs = 20;
  int crop_frames = 200;
  uint64_t seed = 1;
  // Fusion step of two-step dual-path training; <= 0 reuses epochs / lr0.
  int step2_epochs = 0;
  double step2_lr0 = 0.0;
  // Trains the dual-path model jointly from scratch.
  bool no_two_step = false;

  // Throws ConfigError.
  void Validate() const;
};

// lr0 * (1 - lr_decay_per_epoch)^epoch.
double LrSchedule(const TrainConfig& cfg, int epoch);
double LrSchedule(double lr0, double decay, int epoch);

// Additive angular margin softmax cross entropy, averaged over the batch.
// embeddings: (B, E); head: (n_classes, E). Rows of both are L2-normalized;
// the target cosine becomes cos(theta + m) when theta + m <= pi, otherwise
// cos(theta) - m sin(m). If accuracy is set it receives the fraction of rows
// whose largest plain cosine is the label.
nn::Var AamSoftmaxLoss(nn::Var embeddings, nn::Var head,
                       const std::vector<int>& labels, double margin,
                       double scale, double* accuracy = nullptr);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  OptimizerSnapshot Snapshot() const;
  static AdamState FromSnapshot(const OptimizerSnapshot& s);
};

// One Adam update of every trainable, non-statistic leaf from its grad.
// Weight decay is decoupled, p <- p - lr * wd * p, and applies to kWeight
// leaves only. Frozen leaves are not touched.
void AdamStep(nn::ParamTree* params, AdamState* state, double lr,
              double weight_decay, const AdamOptions& opts = {});

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

struct SinglePathResult {
  nn::ParamTree params;  // model leaves under the prefix plus the head
  AdamState optimizer;
  std::vector<EpochStats> log;
};

// Trains one GMM-ResNext with its own classifier on per-utterance features.
// Each epoch visits a fresh permutation of utterances with one random crop
// of crop_frames each. head_name names the classifier leaf.
SinglePathResult TrainSinglePath(const std::vector<const FeatureMatrix*>& feats,
                                 const std::vector<int>& labels,
                                 const ModelConfig& model_cfg,
                                 const TrainConfig& cfg,
                                 const std::string& prefix = "",
                                 const std::string& head_name = "head.weight",
                                 const EpochCallback& on_epoch = {});

struct DualPathResult {
  nn::ParamTree params;  // path_m.*, path_f.*, fusion.*, head.weight
  // Step-1 path leaves (two-step mode only); head leaves excluded.
  nn::ParamTree step1_male;
  nn::ParamTree step1_female;
  std::vector<EpochStats> log_male;
  std::vector<EpochStats> log_female;
  // Fusion step, or the joint run when no_two_step.
  std::vector<EpochStats> log_fusion;
};

// Two-step dual-path training over the male-GMM and female-GMM LGP variants
// of each utterance. Step 1 trains both paths independently, step 2 freezes
// them (eval-mode batchnorm) and trains the fusion layer and a new classifier.
DualPathResult TrainDualPath(const std::vector<const FeatureMatrix*>& lgp_male,
                             const std::vector<const FeatureMatrix*>& lgp_female,
                             const std::vector<int>& labels,
                             const ModelConfig& model_cfg,
                             const TrainConfig& cfg,
                             const std::function<void(const std::string& phase,
                                                      const EpochStats&)>&
                                 on_epoch = {});

// Number of distinct labels; throws DataError when fewer than two or when a
// label is negative.
int CountClasses(const std::vector<int>& labels);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_TRAIN_H_
