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

#ifndef GMMRESNEXT_MODEL_H_
#define GMMRESNEXT_MODEL_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmmresnext/common.h"
#include "gmmresnext/features.h"
#include "gmmresnext/nncore.h"

namespace gmmresnext {

struct ModelConfig {
  int n_gaussians = 512;  // LGP input channels
  int mfcc_dim = 80;      // input channels when ablate_gmm
  std::array<int, 4> stage_blocks{3, 3, 9, 3};
  std::array<int, 4> stage_channels{256, 256, 256, 256};
  int se_reduction = 4;
  int asp_bottleneck = 128;
  int embedding_dim = 256;
  bool ablate_mfa = false;
  bool ablate_gmm = false;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  int InputChannels() const { return ablate_gmm ? mfcc_dim : n_gaussians; }
  // Channels entering attentive statistics pooling.
  int AspInputChannels() const;
  // Throws ConfigError.
  void Validate() const;

  // Canonical JSON text (fixed key order); Parse(Serialize()) is lossless.
  std::string Serialize() const;
  static ModelConfig Parse(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

// Forward-pass state shared by every layer helper.
struct LayerContext {
  nn::Graph* graph = nullptr;
  nn::ParamTree* params = nullptr;
  bool training = false;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // Replaces the SE gate with identity.
  bool bypass_se = false;

  nn::Var P(const std::string& name) const;
};

// Parameter registration. Weights use U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
// batchnorm starts at gamma = 1, beta = 0, mean 0, var 1.
void AddConv(nn::ParamTree* params, const std::string& name, int out_ch,
             int in_per_group, int kernel, bool bias, Rng& rng);
void AddLinear(nn::ParamTree* params, const std::string& name, int out,
               int in, bool bias, Rng& rng);
void AddBatchNorm(nn::ParamTree* params, const std::string& name, int ch);
void AddSeBlock(nn::ParamTree* params, const std::string& prefix, int ch,
                int reduction, Rng& rng);
void AddDwResBlock(nn::ParamTree* params, const std::string& prefix, int ch,
                   int se_reduction, Rng& rng);

nn::Var BatchNormLayer(const LayerContext& ctx, const std::string& name,
                       nn::Var x);

// s = sigmoid(W2 ReLU(W1 mean_t(x) + b1) + b2); returns x * s.
nn::Var SeBlock(const LayerContext& ctx, const std::string& prefix, nn::Var x);

// ReLU(x + SE(BN(pw2(dw3(ReLU(BN(pw1(x)))))))) with "same" padding.
nn::Var DwResBlock(const LayerContext& ctx, const std::string& prefix,
                   nn::Var x);

// BN(concat(stage outputs)) or, with ablate, BN(last stage output).
nn::Var MultiLayerAggregation(const LayerContext& ctx,
                              const std::string& prefix,
                              const std::vector<nn::Var>& stage_outputs,
                              bool ablate);

struct AspOutput {
  nn::Var pooled;  // (B, 2C)
  nn::Var alpha;   // (B, 1, T)
};

// Frame attention e_t = v' tanh(W h_t + b) + k, alpha = softmax_t(e), then
// weighted mean and standard deviation.
AspOutput AttentiveStatsPooling(const LayerContext& ctx,
                                const std::string& prefix, nn::Var h);

// Single-path embedding extractor; parameters live in an external ParamTree
// under a name prefix.
class GmmResNext {
 public:
  GmmResNext(ModelConfig cfg, std::string prefix = "")
      : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {}

  void Register(nn::ParamTree* params, uint64_t seed) const;

  struct Trace {
    std::vector<nn::Var> stage_outputs;
    nn::Var aggregated;
    AspOutput pooling;
    nn::Var embedding;  // (B, embedding_dim)
  };
  // input: (B, InputChannels(), T).
  Trace ForwardTrace(const LayerContext& ctx, nn::Var input) const;
  nn::Var Forward(const LayerContext& ctx, nn::Var input) const {
    return ForwardTrace(ctx, input).embedding;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string Name(const std::string& s) const { return prefix_ + s; }
  ModelConfig cfg_;
  std::string prefix_;
};

// Two GMM-ResNext paths over male-GMM and female-GMM LGP features whose
// embeddings are concatenated and projected by a fusion layer.
class DualGmmResNext {
 public:
  static constexpr const char* kMalePrefix = "path_m.";
  static constexpr const char* kFemalePrefix = "path_f.";
  static constexpr const char* kFusionPrefix = "fusion.";

  explicit DualGmmResNext(ModelConfig cfg)
      : cfg_(cfg), male_(cfg, kMalePrefix), female_(cfg, kFemalePrefix) {}

  void Register(nn::ParamTree* params, uint64_t seed) const;
  // Registers only the fusion layer (paths already present).
  void RegisterFusion(nn::ParamTree* params, uint64_t seed) const;

  // Path BN uses paths_training; the fusion layer has no batch statistics.
  nn::Var Forward(const LayerContext& ctx, nn::Var lgp_male, nn::Var lgp_female,
                  bool paths_training) const;

  const GmmResNext& male() const { return male_; }
  const GmmResNext& female() const { return female_; }

 private:
  ModelConfig cfg_;
  GmmResNext male_;
  GmmResNext female_;
};

// Stacks equal-length feature matrices into a (B, D, T) tensor.
nn::Tensor ToBatch(const std::vector<const FeatureMatrix*>& feats);

struct OptimizerSnapshot {
  int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

enum class ModelVariant { kSingle, kDual };

struct Checkpoint {
  ModelConfig config;
  ModelVariant variant = ModelVariant::kSingle;
  nn::ParamTree params;
  std::optional<OptimizerSnapshot> optimizer;
};

// CKPTv1: magic, config hash, variant, canonical ModelConfig, then leaves in
// sorted-name order (name, kind, shape, f32 values), then an optional
// optimizer section with f64 moments.
void WriteCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt,
                     uint64_t config_hash);
Checkpoint ReadCheckpoint(const std::filesystem::path& path,
                          uint64_t* config_hash = nullptr);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_MODEL_H_
