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

#ifndef GMMRESNEXT_GMM_H_
#define GMMRESNEXT_GMM_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gmmresnext/features.h"

namespace gmmresnext {

// Per-component mean and standard deviation of LGP features over the
// training pool.
struct LgpNormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Diagonal-covariance Gaussian mixture. means and variances are row-major
// N x D.
struct DiagGmm {
  int n_components = 0;
  int dim = 0;
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> variances;
  double variance_floor_factor = 1e-3;
  bool has_norm_stats = false;
  LgpNormStats norm;

  double mean(int i, int d) const {
    return means[static_cast<size_t>(i) * dim + d];
  }
  double variance(int i, int d) const {
    return variances[static_cast<size_t>(i) * dim + d];
  }
};

struct EmOptions {
  int n_components = 64;
  int n_iters = 30;
  uint64_t seed = 0;
  // Variance floor = factor * per-dimension variance of the training pool.
  double variance_floor_factor = 1e-3;
  // k-means++ seeding runs on at most this many randomly chosen frames.
  int kmeans_max_frames = 20000;
  // E-step shard size; accumulators reduce in shard order.
  int shard_frames = 4096;
  int num_threads = 1;
};

struct EmResult {
  DiagGmm gmm;
  // Average per-frame log-likelihood of the initial model followed by the
  // model after each iteration (n_iters + 1 values).
  std::vector<double> log_likelihood;
  int reinitialized_components = 0;
};

// Seeded k-means++ on a frame subsample, one hard-assignment M-step, then
// n_iters EM iterations with variance flooring.
EmResult EmTrain(const FeatureMatrix& frames, const EmOptions& opts);

// Average per-frame log-likelihood under the full mixture density.
double AverageLogLikelihood(const DiagGmm& gmm, const FeatureMatrix& frames);

// Log Gaussian probability of x under every component with the
// x-independent term dropped:
//   y_i = -1/2 sum_d x_d^2 / var_id + sum_d x_d mu_id / var_id.
std::vector<double> LgpFrame(const DiagGmm& gmm, std::span<const double> x);

// The constant that LgpFrame drops from component i's log-density.
double LgpDroppedConstant(const DiagGmm& gmm, int i);

// Row-wise LgpFrame; T x D MFCC in, T x N LGP out.
FeatureMatrix LgpExtract(const DiagGmm& gmm, const FeatureMatrix& feat);

// Single-pass (Welford) per-column mean/std over a stream of LGP matrices.
class NormStatsAccumulator {
 public:
  explicit NormStatsAccumulator(int width);
  void Add(const FeatureMatrix& lgp);
  int64_t count() const { return count_; }
  // Population std floored at std_floor. Throws DataError when empty.
  LgpNormStats Finalize(double std_floor = 1e-6) const;

 private:
  int width_;
  int64_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

// Stats of LgpExtract(gmm, f) pooled over all frames of all inputs.
LgpNormStats FitNormStats(const DiagGmm& gmm,
                          std::span<const FeatureMatrix> mfcc_feats);

// y' = (y - mean) / std per column.
FeatureMatrix LgpNormalize(FeatureMatrix feat, const LgpNormStats& stats);

// GMMv1: magic, N, D, variance floor factor, config hash, norm-stats flag,
// then f64 weights, means, variances, norm mean, norm std.
void WriteGmm(const std::filesystem::path& path, const DiagGmm& gmm,
              uint64_t config_hash);
DiagGmm ReadGmm(const std::filesystem::path& path,
                uint64_t* config_hash = nullptr);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_GMM_H_
