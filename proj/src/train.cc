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

#include "gmmresnext/train.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "spdlog/spdlog.h"

namespace gmmresnext {

using nn::Graph;
using nn::ParamTree;
using nn::Tensor;
using nn::Var;

void TrainConfig::Validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("train: lr0 must be > 0");
  if (lr_decay_per_epoch < 0.0 || lr_decay_per_epoch >= 1.0) {
    throw ConfigError("train: lr_decay_per_epoch must be in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (margin < 0.0 || margin >= M_PI / 2) {
    throw ConfigError("train: margin must be in [0, pi/2)");
  }
  if (!(scale > 0.0)) throw ConfigError("train: scale must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (crop_frames < 2) throw ConfigError("train: crop_frames must be >= 2");
  if (step2_epochs < 0) throw ConfigError("train: step2_epochs must be >= 0");
  if (step2_lr0 < 0.0) throw ConfigError("train: step2_lr0 must be >= 0");
}

double LrSchedule(double lr0, double decay, int epoch) {
  if (epoch < 0) throw ConfigError("lr schedule: negative epoch");
  // lr0 * (1 - decay)^epoch, written as lr0 minus the decayed fraction so
  // that one decay step reproduces lr0 - lr0 * decay exactly.
  const double lost = -std::expm1(epoch * std::log1p(-decay));
  return lr0 - lr0 * lost;
}

double LrSchedule(const TrainConfig& cfg, int epoch) {
  return LrSchedule(cfg.lr0, cfg.lr_decay_per_epoch, epoch);
}

// ---------------------------------------------------------------------------
// AAM-softmax

namespace {

// Cross entropy over s * [phi(cos_y), cos_j...] from a cosine matrix.
Var ArcMarginCrossEntropy(Var cosines, const std::vector<int>& labels,
                          double margin, double scale, double* accuracy) {
  const Tensor& c = cosines.value();
  const int B = c.dim(0), K = c.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw std::invalid_argument("aam softmax: label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= K) throw std::invalid_argument("aam softmax: bad label");
  }
  const double cos_m = std::cos(margin), sin_m = std::sin(margin);
  const double th = std::cos(M_PI - margin);
  const double mm = std::sin(M_PI - margin) * margin;

  Tensor probs({B, K});
  std::vector<double> dphi(B);
  double loss = 0.0;
  int correct = 0;
  for (int b = 0; b < B; ++b) {
    const int y = labels[b];
    const double cy = c.at(b, y);
    double phi, d;
    if (cy > th) {
      const double cl = std::clamp(cy, -1.0, 1.0);
      const double sine = std::sqrt(std::max(1.0 - cl * cl, 0.0));
      phi = cy * cos_m - sine * sin_m;
      d = cos_m + cl * sin_m / std::max(sine, 1e-12);
    } else {
      phi = cy - mm;
      d = 1.0;
    }
    dphi[b] = d;
    double zmax = -HUGE_VAL;
    int best = 0;
    for (int k = 0; k < K; ++k) {
      const double z = scale * (k == y ? phi : c.at(b, k));
      probs.at(b, k) = z;
      zmax = std::max(zmax, z);
      if (c.at(b, k) > c.at(b, best)) best = k;
    }
    if (best == y) ++correct;
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(probs.at(b, k) - zmax);
    const double lse = zmax + std::log(sum);
    loss += lse - scale * phi;
    for (int k = 0; k < K; ++k) probs.at(b, k) = std::exp(probs.at(b, k) - lse);
  }
  if (accuracy) *accuracy = static_cast<double>(correct) / B;
  return cosines.graph()->Record(
      Tensor::Scalar(loss / B), {cosines},
      [cosines, labels, probs, dphi, scale, B, K](Graph& g, const Tensor& go) {
        Tensor& gc = g.GradRef(cosines);
        const double f = go[0] * scale / B;
        for (int b = 0; b < B; ++b) {
          for (int k = 0; k < K; ++k) {
            double dz = probs.at(b, k) - (k == labels[b] ? 1.0 : 0.0);
            gc.at(b, k) += f * dz * (k == labels[b] ? dphi[b] : 1.0);
          }
        }
      });
}

}  // namespace

Var AamSoftmaxLoss(Var embeddings, Var head, const std::vector<int>& labels,
                   double margin, double scale, double* accuracy) {
  Var cosines = nn::Linear(nn::L2NormalizeRows(embeddings),
                           nn::L2NormalizeRows(head), std::nullopt);
  return ArcMarginCrossEntropy(cosines, labels, margin, scale, accuracy);
}

// ---------------------------------------------------------------------------
// Adam

OptimizerSnapshot AdamState::Snapshot() const {
  OptimizerSnapshot s;
  s.step = step;
  s.m = m;
  s.v = v;
  return s;
}

AdamState AdamState::FromSnapshot(const OptimizerSnapshot& s) {
  AdamState a;
  a.step = s.step;
  a.m = s.m;
  a.v = s.v;
  return a;
}

void AdamStep(ParamTree* params, AdamState* state, double lr,
              double weight_decay, const AdamOptions& opts) {
  ++state->step;
  const double t = static_cast<double>(state->step);
  const double corr1 = 1.0 - std::pow(opts.beta1, t);
  const double corr2 = 1.0 - std::pow(opts.beta2, t);
  for (auto& [name, p] : params->leaves()) {
    if (!p.trainable || p.kind == nn::ParamKind::kNormStat) continue;
    const size_t n = p.value.size();
    std::vector<double>& m = state->m[name];
    std::vector<double>& v = state->v[name];
    if (m.size() != n) m.assign(n, 0.0);
    if (v.size() != n) v.assign(n, 0.0);
    const bool decay = p.kind == nn::ParamKind::kWeight && weight_decay > 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double g = p.grad[i];
      if (decay) p.value[i] -= lr * weight_decay * p.value[i];
      m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g;
      v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g * g;
      const double mhat = m[i] / corr1;
      const double vhat = v[i] / corr2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + opts.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loops

int CountClasses(const std::vector<int>& labels) {
  std::set<int> distinct;
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw DataError("negative speaker label");
    distinct.insert(y);
    max_label = std::max(max_label, y);
  }
  if (distinct.size() < 2) {
    throw DataError("training needs at least 2 speakers, got " +
                    std::to_string(distinct.size()));
  }
  return max_label + 1;
}

namespace {

// Builds embeddings for a batch of utterance indices with per-item crop
// offsets.
using EmbedFn = std::function<Var(const LayerContext& ctx,
                                  const std::vector<const FeatureMatrix*>& src,
                                  const std::vector<int>& items,
                                  const std::vector<int>& offsets)>;

Tensor CropBatch(const std::vector<const FeatureMatrix*>& src,
                 const std::vector<int>& items, const std::vector<int>& offsets,
                 int crop) {
  std::vector<FeatureMatrix> crops;
  crops.reserve(items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    crops.push_back(CropOrPadAt(*src[items[i]], crop, offsets[i]));
  }
  std::vector<const FeatureMatrix*> ptrs;
  for (const auto& c : crops) ptrs.push_back(&c);
  return ToBatch(ptrs);
}

void AddHead(ParamTree* params, const std::string& name, int n_classes,
             int dim, uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  Tensor w({n_classes, dim});
  for (double& v : w.values()) v = static_cast<float>(rng.Uniform(-bound, bound));
  params->Add(name, std::move(w), nn::ParamKind::kWeight);
}

struct LoopSpec {
  const std::vector<const FeatureMatrix*>* frames_source;  // for lengths
  const std::vector<int>* labels;
  int epochs;
  double lr0;
  std::string head_name;
  uint64_t seed;
  bool bn_training;
};

std::vector<EpochStats> RunEpochs(ParamTree* params, AdamState* state,
                                  const LoopSpec& spec, const TrainConfig& cfg,
                                  const ModelConfig& mcfg, const EmbedFn& embed,
                                  const EpochCallback& on_epoch) {
  const auto& src = *spec.frames_source;
  const auto& labels = *spec.labels;
  const int n = static_cast<int>(src.size());
  std::vector<EpochStats> log;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    Rng rng(DeriveSeed(spec.seed, static_cast<uint64_t>(epoch)));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.Shuffle(&order);
    const double lr = LrSchedule(spec.lr0, cfg.lr_decay_per_epoch, epoch);
    double loss_sum = 0.0, acc_sum = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      std::vector<int> items(order.begin() + start, order.begin() + end);
      std::vector<int> offsets, batch_labels;
      for (int i : items) {
        const int frames = src[i]->frames;
        offsets.push_back(frames > cfg.crop_frames
                              ? static_cast<int>(
                                    rng.Index(frames - cfg.crop_frames + 1))
                              : 0);
        batch_labels.push_back(labels[i]);
      }
      params->ZeroGrad();
      Graph g;
      LayerContext ctx;
      ctx.graph = &g;
      ctx.params = params;
      ctx.training = spec.bn_training;
      ctx.bn_momentum = mcfg.bn_momentum;
      ctx.bn_eps = mcfg.bn_eps;
      Var emb = embed(ctx, src, items, offsets);
      double acc = 0.0;
      Var loss = AamSoftmaxLoss(emb, ctx.P(spec.head_name), batch_labels,
                                cfg.margin, cfg.scale, &acc);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite training loss at epoch " +
                           std::to_string(epoch));
      }
      g.Backward(loss);
      AdamStep(params, state, lr, cfg.weight_decay);
      params->RoundToFloat();
      const int bsz = end - start;
      loss_sum += lv * bsz;
      acc_sum += acc * bsz;
    }
    EpochStats st{epoch, lr, loss_sum / n, acc_sum / n};
    spdlog::info("epoch {} lr {:.6g} loss {:.6f} acc {:.4f}", epoch, lr,
                 st.mean_loss, st.accuracy);
    log.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return log;
}

void CheckInputs(const std::vector<const FeatureMatrix*>& feats,
                 const std::vector<int>& labels, int expected_dim) {
  if (feats.size() != labels.size()) {
    throw DataError("training: feature and label counts differ");
  }
  for (const FeatureMatrix* f : feats) {
    if (f == nullptr || f->frames < 2) {
      throw DataError("training: utterance with fewer than 2 frames");
    }
    if (f->dim != expected_dim) {
      throw DataError("training: feature dim " + std::to_string(f->dim) +
                      " does not match model input " +
                      std::to_string(expected_dim));
    }
  }
}

}  // namespace

SinglePathResult TrainSinglePath(const std::vector<const FeatureMatrix*>& feats,
                                 const std::vector<int>& labels,
                                 const ModelConfig& model_cfg,
                                 const TrainConfig& cfg,
                                 const std::string& prefix,
                                 const std::string& head_name,
                                 const EpochCallback& on_epoch) {
  cfg.Validate();
  model_cfg.Validate();
  const int n_classes = CountClasses(labels);
  CheckInputs(feats, labels, model_cfg.InputChannels());

  SinglePathResult res;
  GmmResNext model(model_cfg, prefix);
  model.Register(&res.params, DeriveSeed(cfg.seed, 101));
  AddHead(&res.params, head_name, n_classes, model_cfg.embedding_dim,
          DeriveSeed(cfg.seed, 102));

  LoopSpec spec{&feats, &labels, cfg.epochs, cfg.lr0, head_name,
                DeriveSeed(cfg.seed, 103), true};
  EmbedFn embed = [&](const LayerContext& ctx,
                      const std::vector<const FeatureMatrix*>& src,
                      const std::vector<int>& items,
                      const std::vector<int>& offsets) {
    Var x = ctx.graph->Input(CropBatch(src, items, offsets, cfg.crop_frames));
    return model.Forward(ctx, x);
  };
  res.log = RunEpochs(&res.params, &res.optimizer, spec, cfg, model_cfg, embed,
                      on_epoch);
  return res;
}

namespace {

ParamTree ExtractPrefix(const ParamTree& src, const std::string& prefix) {
  ParamTree out;
  for (const auto& [name, p] : src.leaves()) {
    if (name.compare(0, prefix.size(), prefix) == 0) {
      out.Add(name, p.value, p.kind);
    }
  }
  return out;
}

void Merge(ParamTree* dst, const ParamTree& src) {
  for (const auto& [name, p] : src.leaves()) dst->Add(name, p.value, p.kind);
}

}  // namespace

DualPathResult TrainDualPath(
    const std::vector<const FeatureMatrix*>& lgp_male,
    const std::vector<const FeatureMatrix*>& lgp_female,
    const std::vector<int>& labels, const ModelConfig& model_cfg,
    const TrainConfig& cfg,
    const std::function<void(const std::string&, const EpochStats&)>& on_epoch) {
  cfg.Validate();
  model_cfg.Validate();
  if (model_cfg.ablate_gmm) {
    throw ConfigError("dual-path model requires LGP features (ablate_gmm set)");
  }
  const int n_classes = CountClasses(labels);
  CheckInputs(lgp_male, labels, model_cfg.InputChannels());
  CheckInputs(lgp_female, labels, model_cfg.InputChannels());
  for (size_t i = 0; i < lgp_male.size(); ++i) {
    if (lgp_male[i]->frames != lgp_female[i]->frames) {
      throw DataError("dual-path: LGP variants differ in length");
    }
  }

  DualPathResult res;
  DualGmmResNext dual(model_cfg);
  auto phase_cb = [&](const std::string& phase) -> EpochCallback {
    if (!on_epoch) return {};
    return [&on_epoch, phase](const EpochStats& s) { on_epoch(phase, s); };
  };

  EmbedFn embed = [&](const LayerContext& ctx,
                      const std::vector<const FeatureMatrix*>&,
                      const std::vector<int>& items,
                      const std::vector<int>& offsets) {
    Var xm = ctx.graph->Input(CropBatch(lgp_male, items, offsets,
                                        cfg.crop_frames));
    Var xf = ctx.graph->Input(CropBatch(lgp_female, items, offsets,
                                        cfg.crop_frames));
    return dual.Forward(ctx, xm, xf, ctx.training);
  };

  AdamState state;
  if (cfg.no_two_step) {
    dual.Register(&res.params, DeriveSeed(cfg.seed, 201));
    AddHead(&res.params, "head.weight", n_classes, model_cfg.embedding_dim,
            DeriveSeed(cfg.seed, 202));
    LoopSpec spec{&lgp_male, &labels, cfg.epochs, cfg.lr0, "head.weight",
                  DeriveSeed(cfg.seed, 203), true};
    res.log_fusion = RunEpochs(&res.params, &state, spec, cfg, model_cfg,
                               embed, phase_cb("joint"));
    return res;
  }

  TrainConfig path_cfg = cfg;
  path_cfg.seed = DeriveSeed(cfg.seed, 211);
  SinglePathResult male =
      TrainSinglePath(lgp_male, labels, model_cfg, path_cfg,
                      DualGmmResNext::kMalePrefix, "head_m.weight",
                      phase_cb("step1_male"));
  path_cfg.seed = DeriveSeed(cfg.seed, 212);
  SinglePathResult female =
      TrainSinglePath(lgp_female, labels, model_cfg, path_cfg,
                      DualGmmResNext::kFemalePrefix, "head_f.weight",
                      phase_cb("step1_female"));
  res.step1_male = ExtractPrefix(male.params, DualGmmResNext::kMalePrefix);
  res.step1_female = ExtractPrefix(female.params, DualGmmResNext::kFemalePrefix);
  res.log_male = std::move(male.log);
  res.log_female = std::move(female.log);

  // Step 2: frozen paths, fresh fusion layer and classifier.
  Merge(&res.params, res.step1_male);
  Merge(&res.params, res.step1_female);
  dual.RegisterFusion(&res.params, DeriveSeed(cfg.seed, 213));
  AddHead(&res.params, "head.weight", n_classes, model_cfg.embedding_dim,
          DeriveSeed(cfg.seed, 214));
  res.params.SetTrainable(DualGmmResNext::kMalePrefix, false);
  res.params.SetTrainable(DualGmmResNext::kFemalePrefix, false);
  LoopSpec spec{&lgp_male,
                &labels,
                cfg.step2_epochs > 0 ? cfg.step2_epochs : cfg.epochs,
                cfg.step2_lr0 > 0.0 ? cfg.step2_lr0 : cfg.lr0,
                "head.weight",
                DeriveSeed(cfg.seed, 215),
                false};
  res.log_fusion = RunEpochs(&res.params, &state, spec, cfg, model_cfg, embed,
                             phase_cb("step2_fusion"));
  return res;
}

}  // namespace gmmresnext
