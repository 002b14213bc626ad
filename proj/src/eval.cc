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

#include "gmmresnext/eval.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

namespace gmmresnext {

void DcfParams::Validate() const {
  if (!(p_target > 0.0 && p_target < 1.0)) {
    throw ConfigError("dcf: p_target must be in (0, 1)");
  }
  if (!(c_miss > 0.0) || !(c_fa > 0.0)) {
    throw ConfigError("dcf: costs must be > 0");
  }
}

double Cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DataError("cosine: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

struct SweepPoint {
  double threshold;
  double p_miss;
  double p_fa;
};

// Rates at every distinct observed score and at +inf, in increasing order.
std::vector<SweepPoint> Sweep(std::span<const double> targets,
                              std::span<const double> nontargets) {
  if (targets.empty() || nontargets.empty()) {
    throw DataError("metrics need at least one target and one nontarget");
  }
  std::vector<std::pair<double, int>> all;
  all.reserve(targets.size() + nontargets.size());
  for (double s : targets) all.emplace_back(s, 1);
  for (double s : nontargets) all.emplace_back(s, 0);
  for (const auto& [s, l] : all) {
    if (!std::isfinite(s)) throw DataError("metrics: non-finite score");
  }
  std::sort(all.begin(), all.end());
  const double nt = static_cast<double>(targets.size());
  const double nn = static_cast<double>(nontargets.size());
  std::vector<SweepPoint> pts;
  size_t below_t = 0, below_n = 0;  // counts with score < current threshold
  size_t i = 0;
  while (i < all.size()) {
    const double t = all[i].first;
    pts.push_back({t, below_t / nt, (nn - below_n) / nn});
    while (i < all.size() && all[i].first == t) {
      (all[i].second ? below_t : below_n) += 1;
      ++i;
    }
  }
  pts.push_back({std::numeric_limits<double>::infinity(), 1.0, 0.0});
  return pts;
}

}  // namespace

OperatingPoint ComputeEer(std::span<const double> target_scores,
                          std::span<const double> nontarget_scores) {
  std::vector<SweepPoint> pts = Sweep(target_scores, nontarget_scores);
  size_t k = 0;
  while (pts[k].p_miss < pts[k].p_fa) ++k;  // terminates at +inf
  OperatingPoint op;
  if (k == 0) {
    op.value = pts[0].p_miss;
    op.threshold = pts[0].threshold;
    return op;
  }
  const SweepPoint& a = pts[k - 1];
  const SweepPoint& b = pts[k];
  const double da = a.p_miss - a.p_fa;  // < 0
  const double db = b.p_miss - b.p_fa;  // >= 0
  const double w = da / (da - db);
  op.value = a.p_miss + w * (b.p_miss - a.p_miss);
  if (w == 0.0) {
    op.threshold = a.threshold;
  } else if (w == 1.0 || !std::isfinite(b.threshold)) {
    op.threshold = b.threshold;
  } else {
    op.threshold = a.threshold + w * (b.threshold - a.threshold);
  }
  return op;
}

OperatingPoint ComputeMinDcf(std::span<const double> target_scores,
                             std::span<const double> nontarget_scores,
                             const DcfParams& params) {
  params.Validate();
  std::vector<SweepPoint> pts = Sweep(target_scores, nontarget_scores);
  const double w_miss = params.c_miss * params.p_target;
  const double w_fa = params.c_fa * (1.0 - params.p_target);
  const double norm = std::min(w_miss, w_fa);
  OperatingPoint best{std::numeric_limits<double>::infinity(), 0.0};
  for (const SweepPoint& p : pts) {
    const double dcf = (w_miss * p.p_miss + w_fa * p.p_fa) / norm;
    if (dcf < best.value) best = {dcf, p.threshold};
  }
  return best;
}

void SplitScores(const std::vector<TrialScore>& scores,
                 std::vector<double>* targets,
                 std::vector<double>* nontargets) {
  targets->clear();
  nontargets->clear();
  for (const TrialScore& s : scores) {
    (s.trial.label == TrialLabel::kTarget ? targets : nontargets)
        ->push_back(s.score);
  }
}

EvalReport Evaluate(const std::vector<TrialScore>& scores,
                    const DcfParams& params) {
  std::vector<double> tgt, non;
  SplitScores(scores, &tgt, &non);
  EvalReport r;
  OperatingPoint eer = ComputeEer(tgt, non);
  OperatingPoint dcf = ComputeMinDcf(tgt, non, params);
  r.eer = eer.value;
  r.threshold_eer = eer.threshold;
  r.min_dcf = dcf.value;
  r.threshold_dcf = dcf.threshold;
  r.n_target = static_cast<int64_t>(tgt.size());
  r.n_nontarget = static_cast<int64_t>(non.size());
  return r;
}

std::vector<TrialScore> ScoreTrials(const std::vector<TrialRecord>& trials,
                                    const EmbeddingLookup& embed,
                                    bool use_cache) {
  std::map<std::string, std::vector<double>> cache;
  auto get = [&](const std::string& id) -> std::vector<double> {
    if (!use_cache) return embed(id);
    auto it = cache.find(id);
    if (it == cache.end()) it = cache.emplace(id, embed(id)).first;
    return it->second;
  };
  std::vector<TrialScore> out;
  out.reserve(trials.size());
  for (const TrialRecord& t : trials) {
    std::vector<double> a = get(t.enroll_utt);
    std::vector<double> b = get(t.test_utt);
    out.push_back({t, Cosine(a, b)});
  }
  return out;
}

std::vector<double> EmbedUtterance(const Checkpoint& ckpt,
                                   const FeatureMatrix& primary,
                                   const FeatureMatrix* secondary) {
  // Forward passes write batchnorm statistics only in training mode, so a
  // const_cast for the graph's parameter handles is safe here.
  auto* params = const_cast<nn::ParamTree*>(&ckpt.params);
  nn::Graph g;
  LayerContext ctx;
  ctx.graph = &g;
  ctx.params = params;
  ctx.training = false;
  ctx.bn_momentum = ckpt.config.bn_momentum;
  ctx.bn_eps = ckpt.config.bn_eps;
  nn::Var emb;
  if (ckpt.variant == ModelVariant::kDual) {
    if (secondary == nullptr) {
      throw DataError("dual-path embedding needs both LGP variants");
    }
    DualGmmResNext dual(ckpt.config);
    emb = dual.Forward(ctx, g.Input(ToBatch({&primary})),
                       g.Input(ToBatch({secondary})), false);
  } else {
    GmmResNext model(ckpt.config);
    emb = model.Forward(ctx, g.Input(ToBatch({&primary})));
  }
  std::vector<double> out = emb.value().values();
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericError("non-finite embedding");
  }
  return out;
}

void WriteScores(const std::filesystem::path& path,
                 const std::vector<TrialScore>& scores) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  char buf[64];
  for (const TrialScore& s : scores) {
    std::snprintf(buf, sizeof(buf), "%.17g", s.score);
    os << s.trial.enroll_utt << ' ' << s.trial.test_utt << ' ' << buf << '\n';
  }
  if (!os) throw DataError("write failed: " + path.string());
}

}  // namespace gmmresnext
