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

#include "gmmresnext/model.h"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace gmmresnext {

using nn::ParamKind;
using nn::ParamTree;
using nn::Tensor;
using nn::Var;

// ---------------------------------------------------------------------------
// ModelConfig

int ModelConfig::AspInputChannels() const {
  if (ablate_mfa) return stage_channels.back();
  int c = 0;
  for (int s : stage_channels) c += s;
  return c;
}

void ModelConfig::Validate() const {
  if (InputChannels() < 1) throw ConfigError("model: input channels must be >= 1");
  for (int i = 0; i < 4; ++i) {
    if (stage_blocks[i] < 1) throw ConfigError("model: stage_blocks must be >= 1");
    if (stage_channels[i] < 1 || stage_channels[i] % se_reduction != 0) {
      throw ConfigError("model: stage channels must be positive multiples of "
                        "se_reduction");
    }
  }
  if (se_reduction < 1) throw ConfigError("model: se_reduction must be >= 1");
  if (asp_bottleneck < 1 || embedding_dim < 1) {
    throw ConfigError("model: asp_bottleneck and embedding_dim must be >= 1");
  }
  if (!(bn_eps > 0.0) || bn_momentum < 0.0 || bn_momentum > 1.0) {
    throw ConfigError("model: invalid batchnorm settings");
  }
}

std::string ModelConfig::Serialize() const {
  nlohmann::ordered_json j;
  j["n_gaussians"] = n_gaussians;
  j["mfcc_dim"] = mfcc_dim;
  j["stage_blocks"] = stage_blocks;
  j["stage_channels"] = stage_channels;
  j["se_reduction"] = se_reduction;
  j["asp_bottleneck"] = asp_bottleneck;
  j["embedding_dim"] = embedding_dim;
  j["ablate_mfa"] = ablate_mfa;
  j["ablate_gmm"] = ablate_gmm;
  j["bn_momentum"] = bn_momentum;
  j["bn_eps"] = bn_eps;
  return j.dump();
}

ModelConfig ModelConfig::Parse(const std::string& text) {
  ModelConfig c;
  try {
    auto j = nlohmann::json::parse(text);
    c.n_gaussians = j.value("n_gaussians", c.n_gaussians);
    c.mfcc_dim = j.value("mfcc_dim", c.mfcc_dim);
    c.stage_blocks = j.value("stage_blocks", c.stage_blocks);
    c.stage_channels = j.value("stage_channels", c.stage_channels);
    c.se_reduction = j.value("se_reduction", c.se_reduction);
    c.asp_bottleneck = j.value("asp_bottleneck", c.asp_bottleneck);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.ablate_mfa = j.value("ablate_mfa", c.ablate_mfa);
    c.ablate_gmm = j.value("ablate_gmm", c.ablate_gmm);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.bn_eps = j.value("bn_eps", c.bn_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Registration

namespace {

Tensor UniformTensor(std::vector<int> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = static_cast<float>(rng.Uniform(-bound, bound));
  return t;
}

}  // namespace

void AddConv(ParamTree* params, const std::string& name, int out_ch,
             int in_per_group, int kernel, bool bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_per_group * kernel));
  params->Add(name + ".weight",
              UniformTensor({out_ch, in_per_group, kernel}, bound, rng),
              ParamKind::kWeight);
  if (bias) {
    params->Add(name + ".bias", UniformTensor({out_ch}, bound, rng),
                ParamKind::kBias);
  }
}

void AddLinear(ParamTree* params, const std::string& name, int out, int in,
               bool bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  params->Add(name + ".weight", UniformTensor({out, in}, bound, rng),
              ParamKind::kWeight);
  if (bias) {
    params->Add(name + ".bias", UniformTensor({out}, bound, rng),
                ParamKind::kBias);
  }
}

void AddBatchNorm(ParamTree* params, const std::string& name, int ch) {
  params->Add(name + ".gamma", Tensor({ch}, 1.0), ParamKind::kNormAffine);
  params->Add(name + ".beta", Tensor({ch}, 0.0), ParamKind::kNormAffine);
  params->Add(name + ".running_mean", Tensor({ch}, 0.0), ParamKind::kNormStat);
  params->Add(name + ".running_var", Tensor({ch}, 1.0), ParamKind::kNormStat);
}

void AddSeBlock(ParamTree* params, const std::string& prefix, int ch,
                int reduction, Rng& rng) {
  const int bottleneck = ch / reduction;
  AddLinear(params, prefix + ".fc1", bottleneck, ch, true, rng);
  AddLinear(params, prefix + ".fc2", ch, bottleneck, true, rng);
}

void AddDwResBlock(ParamTree* params, const std::string& prefix, int ch,
                   int se_reduction, Rng& rng) {
  AddConv(params, prefix + ".conv1", ch, ch, 1, false, rng);
  AddBatchNorm(params, prefix + ".bn1", ch);
  AddConv(params, prefix + ".dwconv", ch, 1, 3, false, rng);
  AddConv(params, prefix + ".conv2", ch, ch, 1, false, rng);
  AddBatchNorm(params, prefix + ".bn2", ch);
  AddSeBlock(params, prefix + ".se", ch, se_reduction, rng);
}

// ---------------------------------------------------------------------------
// Layers

Var LayerContext::P(const std::string& name) const {
  return graph->Param(params->at(name));
}

Var BatchNormLayer(const LayerContext& ctx, const std::string& name, Var x) {
  nn::BatchNormOptions opts;
  opts.training = ctx.training;
  opts.momentum = ctx.bn_momentum;
  opts.eps = ctx.bn_eps;
  return nn::BatchNorm(x, ctx.P(name + ".gamma"), ctx.P(name + ".beta"),
                       &ctx.params->at(name + ".running_mean").value,
                       &ctx.params->at(name + ".running_var").value, opts);
}

Var SeBlock(const LayerContext& ctx, const std::string& prefix, Var x) {
  if (ctx.bypass_se) return x;
  Var squeeze = nn::MeanTime(x);
  Var hidden = nn::Relu(nn::Linear(squeeze, ctx.P(prefix + ".fc1.weight"),
                                   ctx.P(prefix + ".fc1.bias")));
  Var gate = nn::Sigmoid(nn::Linear(hidden, ctx.P(prefix + ".fc2.weight"),
                                    ctx.P(prefix + ".fc2.bias")));
  return nn::MulChannels(x, gate);
}

Var DwResBlock(const LayerContext& ctx, const std::string& prefix, Var x) {
  const int ch = x.value().dim(1);
  Var h = nn::Conv1d(x, ctx.P(prefix + ".conv1.weight"), std::nullopt);
  h = nn::Relu(BatchNormLayer(ctx, prefix + ".bn1", h));
  h = nn::Conv1d(h, ctx.P(prefix + ".dwconv.weight"), std::nullopt, 1, 1, ch);
  h = nn::Conv1d(h, ctx.P(prefix + ".conv2.weight"), std::nullopt);
  h = BatchNormLayer(ctx, prefix + ".bn2", h);
  h = SeBlock(ctx, prefix + ".se", h);
  return nn::Relu(nn::Add(x, h));
}

Var MultiLayerAggregation(const LayerContext& ctx, const std::string& prefix,
                          const std::vector<Var>& stage_outputs, bool ablate) {
  if (stage_outputs.empty()) throw std::invalid_argument("mfa: no inputs");
  Var h = ablate ? stage_outputs.back() : nn::Concat(stage_outputs);
  return BatchNormLayer(ctx, prefix + ".bn", h);
}

AspOutput AttentiveStatsPooling(const LayerContext& ctx,
                                const std::string& prefix, Var h) {
  if (h.value().dim(2) < 2) {
    throw DataError("attentive pooling needs at least 2 frames");
  }
  Var e = nn::Tanh(nn::Conv1d(h, ctx.P(prefix + ".attn1.weight"),
                              ctx.P(prefix + ".attn1.bias")));
  e = nn::Conv1d(e, ctx.P(prefix + ".attn2.weight"),
                 ctx.P(prefix + ".attn2.bias"));
  AspOutput out;
  out.alpha = nn::Softmax(e);
  out.pooled = nn::AttentiveStats(h, out.alpha);
  return out;
}

// ---------------------------------------------------------------------------
// GmmResNext

void GmmResNext::Register(ParamTree* params, uint64_t seed) const {
  cfg_.Validate();
  Rng rng(seed);
  const int c0 = cfg_.stage_channels[0];
  AddConv(params, Name("stem.conv"), c0, cfg_.InputChannels(), 3, false, rng);
  AddBatchNorm(params, Name("stem.bn"), c0);
  int ch = c0;
  for (int s = 0; s < 4; ++s) {
    const std::string stage = Name("stage" + std::to_string(s + 1));
    const int cs = cfg_.stage_channels[s];
    if (cs != ch) {
      AddConv(params, stage + ".proj.conv", cs, ch, 1, false, rng);
      AddBatchNorm(params, stage + ".proj.bn", cs);
      ch = cs;
    }
    for (int b = 0; b < cfg_.stage_blocks[s]; ++b) {
      AddDwResBlock(params, stage + ".block" + std::to_string(b + 1), cs,
                    cfg_.se_reduction, rng);
    }
  }
  const int agg = cfg_.AspInputChannels();
  AddBatchNorm(params, Name("mfa.bn"), agg);
  AddConv(params, Name("asp.attn1"), cfg_.asp_bottleneck, agg, 1, true, rng);
  AddConv(params, Name("asp.attn2"), 1, cfg_.asp_bottleneck, 1, true, rng);
  AddLinear(params, Name("embed"), cfg_.embedding_dim, 2 * agg, true, rng);
}

GmmResNext::Trace GmmResNext::ForwardTrace(const LayerContext& ctx,
                                           Var input) const {
  const Tensor& in = input.value();
  if (in.rank() != 3 || in.dim(1) != cfg_.InputChannels()) {
    throw DataError("model: expected input with " +
                    std::to_string(cfg_.InputChannels()) +
                    " channels, got " + in.ShapeString());
  }
  Trace tr;
  Var h = nn::Conv1d(input, ctx.P(Name("stem.conv.weight")), std::nullopt, 1, 1);
  h = nn::Relu(BatchNormLayer(ctx, Name("stem.bn"), h));
  int ch = cfg_.stage_channels[0];
  for (int s = 0; s < 4; ++s) {
    const std::string stage = Name("stage" + std::to_string(s + 1));
    if (cfg_.stage_channels[s] != ch) {
      h = nn::Conv1d(h, ctx.P(stage + ".proj.conv.weight"), std::nullopt);
      h = nn::Relu(BatchNormLayer(ctx, stage + ".proj.bn", h));
      ch = cfg_.stage_channels[s];
    }
    for (int b = 0; b < cfg_.stage_blocks[s]; ++b) {
      h = DwResBlock(ctx, stage + ".block" + std::to_string(b + 1), h);
    }
    tr.stage_outputs.push_back(h);
  }
  tr.aggregated = MultiLayerAggregation(ctx, Name("mfa"), tr.stage_outputs,
                                        cfg_.ablate_mfa);
  tr.pooling = AttentiveStatsPooling(ctx, Name("asp"), tr.aggregated);
  tr.embedding = nn::Linear(tr.pooling.pooled, ctx.P(Name("embed.weight")),
                            ctx.P(Name("embed.bias")));
  return tr;
}

// ---------------------------------------------------------------------------
// DualGmmResNext

void DualGmmResNext::Register(ParamTree* params, uint64_t seed) const {
  male_.Register(params, DeriveSeed(seed, 1));
  female_.Register(params, DeriveSeed(seed, 2));
  RegisterFusion(params, DeriveSeed(seed, 3));
}

void DualGmmResNext::RegisterFusion(ParamTree* params, uint64_t seed) const {
  Rng rng(seed);
  AddLinear(params, std::string(kFusionPrefix) + "fc", cfg_.embedding_dim,
            2 * cfg_.embedding_dim, true, rng);
}

Var DualGmmResNext::Forward(const LayerContext& ctx, Var lgp_male,
                            Var lgp_female, bool paths_training) const {
  LayerContext path_ctx = ctx;
  path_ctx.training = paths_training;
  Var em = male_.Forward(path_ctx, lgp_male);
  Var ef = female_.Forward(path_ctx, lgp_female);
  const std::string fc = std::string(kFusionPrefix) + "fc";
  return nn::Linear(nn::Concat({em, ef}), ctx.P(fc + ".weight"),
                    ctx.P(fc + ".bias"));
}

Tensor ToBatch(const std::vector<const FeatureMatrix*>& feats) {
  if (feats.empty()) throw std::invalid_argument("ToBatch: empty batch");
  const int T = feats[0]->frames, D = feats[0]->dim;
  Tensor x({static_cast<int>(feats.size()), D, T});
  for (size_t b = 0; b < feats.size(); ++b) {
    const FeatureMatrix& f = *feats[b];
    if (f.frames != T || f.dim != D) {
      throw std::invalid_argument("ToBatch: ragged batch");
    }
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < D; ++d) x.at(static_cast<int>(b), d, t) = f.at(t, d);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCkptMagic[] = "CKPTv1\0\0";
}  // namespace

void WriteCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt,
                     uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  binio::WriteMagic(os, std::string_view(kCkptMagic, 8));
  binio::WriteU64(os, config_hash);
  binio::WriteU32(os, ckpt.variant == ModelVariant::kDual ? 1 : 0);
  binio::WriteString(os, ckpt.config.Serialize());
  const auto& leaves = ckpt.params.leaves();
  binio::WriteU32(os, static_cast<uint32_t>(leaves.size()));
  for (const auto& [name, p] : leaves) {
    binio::WriteString(os, name);
    binio::WriteU32(os, static_cast<uint32_t>(p.kind));
    binio::WriteU32(os, static_cast<uint32_t>(p.value.rank()));
    for (int d : p.value.shape()) binio::WriteU32(os, static_cast<uint32_t>(d));
    for (double v : p.value.values()) binio::WriteF32(os, static_cast<float>(v));
  }
  binio::WriteU32(os, ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const OptimizerSnapshot& o = *ckpt.optimizer;
    binio::WriteU64(os, static_cast<uint64_t>(o.step));
    binio::WriteU32(os, static_cast<uint32_t>(o.m.size()));
    for (const auto& [name, m] : o.m) {
      const std::vector<double>& v = o.v.at(name);
      binio::WriteString(os, name);
      binio::WriteU32(os, static_cast<uint32_t>(m.size()));
      for (double x : m) binio::WriteF64(os, x);
      for (double x : v) binio::WriteF64(os, x);
    }
  }
  if (!os) throw DataError("write failed: " + path.string());
}

Checkpoint ReadCheckpoint(const std::filesystem::path& path,
                          uint64_t* config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  binio::ExpectMagic(is, std::string_view(kCkptMagic, 8), path.string());
  Checkpoint ckpt;
  uint64_t hash = binio::ReadU64(is);
  if (config_hash) *config_hash = hash;
  ckpt.variant = binio::ReadU32(is) ? ModelVariant::kDual : ModelVariant::kSingle;
  ckpt.config = ModelConfig::Parse(binio::ReadString(is));
  const uint32_t n = binio::ReadU32(is);
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = binio::ReadString(is);
    uint32_t kind = binio::ReadU32(is);
    if (kind > static_cast<uint32_t>(ParamKind::kNormStat)) {
      throw DataError(path.string() + ": bad parameter kind for " + name);
    }
    uint32_t rank = binio::ReadU32(is);
    if (rank > 4) throw DataError(path.string() + ": bad rank for " + name);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(binio::ReadU32(is));
    Tensor t(shape);
    for (double& v : t.values()) v = binio::ReadF32(is);
    ckpt.params.Add(name, std::move(t), static_cast<ParamKind>(kind));
  }
  if (binio::ReadU32(is)) {
    OptimizerSnapshot o;
    o.step = static_cast<int64_t>(binio::ReadU64(is));
    const uint32_t k = binio::ReadU32(is);
    for (uint32_t i = 0; i < k; ++i) {
      std::string name = binio::ReadString(is);
      uint32_t len = binio::ReadU32(is);
      std::vector<double> m(len), v(len);
      for (double& x : m) x = binio::ReadF64(is);
      for (double& x : v) x = binio::ReadF64(is);
      o.m.emplace(name, std::move(m));
      o.v.emplace(name, std::move(v));
    }
    ckpt.optimizer = std::move(o);
  }
  return ckpt;
}

}  // namespace gmmresnext
