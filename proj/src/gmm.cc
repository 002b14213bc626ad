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

#include "gmmresnext/gmm.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <thread>

#include "spdlog/spdlog.h"

namespace gmmresnext {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)
constexpr double kMinOccupancy = 1e-10;

// Per-component quantities shared by LGP extraction and the E-step.
struct LgpKernel {
  int n = 0;
  int d = 0;
  std::vector<double> inv_var;  // N x D
  std::vector<double> mu_inv;   // N x D, mu / var

  explicit LgpKernel(const DiagGmm& gmm)
      : n(gmm.n_components),
        d(gmm.dim),
        inv_var(gmm.variances.size()),
        mu_inv(gmm.means.size()) {
    for (size_t k = 0; k < inv_var.size(); ++k) {
      inv_var[k] = 1.0 / gmm.variances[k];
      mu_inv[k] = gmm.means[k] * inv_var[k];
    }
  }

  double Eval(int i, const double* x) const {
    const double* iv = inv_var.data() + static_cast<size_t>(i) * d;
    const double* mi = mu_inv.data() + static_cast<size_t>(i) * d;
    double acc = 0.0;
    for (int k = 0; k < d; ++k) acc += x[k] * (mi[k] - 0.5 * x[k] * iv[k]);
    return acc;
  }
};

struct ShardAccum {
  double log_likelihood = 0.0;
  std::vector<double> occupancy;  // N
  std::vector<double> first;      // N x D
  std::vector<double> second;     // N x D

  ShardAccum(int n, int d, bool with_stats)
      : occupancy(with_stats ? n : 0, 0.0),
        first(with_stats ? static_cast<size_t>(n) * d : 0, 0.0),
        second(with_stats ? static_cast<size_t>(n) * d : 0, 0.0) {}
};

// log w_i plus the constant LGP drops.
std::vector<double> ComponentOffsets(const DiagGmm& gmm) {
  std::vector<double> off(gmm.n_components);
  for (int i = 0; i < gmm.n_components; ++i) {
    off[i] = std::log(gmm.weights[i]) + LgpDroppedConstant(gmm, i);
  }
  return off;
}

void EStepShard(const DiagGmm& gmm, const LgpKernel& kernel,
                const std::vector<double>& offsets, const FeatureMatrix& x,
                int begin, int end, ShardAccum* acc) {
  const int n = gmm.n_components, d = gmm.dim;
  const bool stats = !acc->occupancy.empty();
  std::vector<double> lj(n);
  for (int t = begin; t < end; ++t) {
    const double* row = x.data.data() + static_cast<size_t>(t) * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      lj[i] = offsets[i] + kernel.Eval(i, row);
      mx = std::max(mx, lj[i]);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      lj[i] = std::exp(lj[i] - mx);
      sum += lj[i];
    }
    acc->log_likelihood += mx + std::log(sum);
    if (!stats) continue;
    for (int i = 0; i < n; ++i) {
      double g = lj[i] / sum;
      if (g == 0.0) continue;
      acc->occupancy[i] += g;
      double* f = acc->first.data() + static_cast<size_t>(i) * d;
      double* s = acc->second.data() + static_cast<size_t>(i) * d;
      for (int k = 0; k < d; ++k) {
        f[k] += g * row[k];
        s[k] += g * row[k] * row[k];
      }
    }
  }
}

// Runs the E-step over fixed shards and reduces their accumulators in shard
// order, so the result does not depend on num_threads.
ShardAccum EStep(const DiagGmm& gmm, const FeatureMatrix& x, int shard_frames,
                 int num_threads, bool with_stats) {
  LgpKernel kernel(gmm);
  std::vector<double> offsets = ComponentOffsets(gmm);
  const int shard = std::max(1, shard_frames);
  const int n_shards = (x.frames + shard - 1) / shard;
  const int threads = std::max(1, num_threads);
  ShardAccum total(gmm.n_components, gmm.dim, with_stats);
  auto reduce = [&total](const ShardAccum& a) {
    total.log_likelihood += a.log_likelihood;
    for (size_t k = 0; k < a.occupancy.size(); ++k)
      total.occupancy[k] += a.occupancy[k];
    for (size_t k = 0; k < a.first.size(); ++k) {
      total.first[k] += a.first[k];
      total.second[k] += a.second[k];
    }
  };
  for (int wave = 0; wave < n_shards; wave += threads) {
    const int count = std::min(threads, n_shards - wave);
    std::vector<ShardAccum> parts(
        count, ShardAccum(gmm.n_components, gmm.dim, with_stats));
    auto work = [&](int j) {
      int s = wave + j;
      EStepShard(gmm, kernel, offsets, x, s * shard,
                 std::min(x.frames, (s + 1) * shard), &parts[j]);
    };
    if (count == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (int j = 0; j < count; ++j) pool.emplace_back(work, j);
      for (auto& th : pool) th.join();
    }
    for (const auto& p : parts) reduce(p);
  }
  return total;
}

struct GlobalStats {
  std::vector<double> mean;
  std::vector<double> var;
};

GlobalStats ComputeGlobalStats(const FeatureMatrix& x) {
  GlobalStats g{std::vector<double>(x.dim, 0.0),
                std::vector<double>(x.dim, 0.0)};
  for (int t = 0; t < x.frames; ++t)
    for (int k = 0; k < x.dim; ++k) g.mean[k] += x.at(t, k);
  for (double& m : g.mean) m /= x.frames;
  for (int t = 0; t < x.frames; ++t)
    for (int k = 0; k < x.dim; ++k) {
      double c = x.at(t, k) - g.mean[k];
      g.var[k] += c * c;
    }
  for (double& v : g.var) v /= x.frames;
  return g;
}

// Picks replacement data for components that lost all their mass: frames in
// decreasing order of normalized squared deviation from the global mean.
class OutlierPicker {
 public:
  OutlierPicker(const FeatureMatrix& x, const GlobalStats& g) : x_(x) {
    std::vector<double> score(x.frames, 0.0);
    for (int t = 0; t < x.frames; ++t) {
      for (int k = 0; k < x.dim; ++k) {
        double c = x.at(t, k) - g.mean[k];
        score[t] += g.var[k] > 0.0 ? c * c / g.var[k] : 0.0;
      }
    }
    order_.resize(x.frames);
    std::iota(order_.begin(), order_.end(), 0);
    std::stable_sort(order_.begin(), order_.end(),
                     [&](int a, int b) { return score[a] > score[b]; });
  }

  std::span<const double> Next() {
    int t = order_[next_ % order_.size()];
    ++next_;
    return x_.row(t);
  }

 private:
  const FeatureMatrix& x_;
  std::vector<int> order_;
  size_t next_ = 0;
};

// M-step from sufficient statistics. Returns the number of components that
// had to be reinitialized.
int MStep(const ShardAccum& acc, int total_frames,
          const std::vector<double>& floor, const GlobalStats& global,
          const FeatureMatrix& x, DiagGmm* gmm) {
  const int n = gmm->n_components, d = gmm->dim;
  int reinit = 0;
  std::unique_ptr<OutlierPicker> picker;
  for (int i = 0; i < n; ++i) {
    double occ = acc.occupancy[i];
    double* mu = gmm->means.data() + static_cast<size_t>(i) * d;
    double* var = gmm->variances.data() + static_cast<size_t>(i) * d;
    if (occ < kMinOccupancy) {
      if (!picker) picker = std::make_unique<OutlierPicker>(x, global);
      auto row = picker->Next();
      std::copy(row.begin(), row.end(), mu);
      for (int k = 0; k < d; ++k) var[k] = std::max(global.var[k], floor[k]);
      gmm->weights[i] = 1.0 / n;
      ++reinit;
      spdlog::warn("gmm: component {} has no responsibility mass; "
                   "reinitialized from an outlying frame", i);
      continue;
    }
    gmm->weights[i] = occ / total_frames;
    const double* f = acc.first.data() + static_cast<size_t>(i) * d;
    const double* s = acc.second.data() + static_cast<size_t>(i) * d;
    for (int k = 0; k < d; ++k) {
      mu[k] = f[k] / occ;
      var[k] = std::max(s[k] / occ - mu[k] * mu[k], floor[k]);
    }
  }
  double wsum = 0.0;
  for (double w : gmm->weights) wsum += w;
  for (double& w : gmm->weights) w /= wsum;
  return reinit;
}

double SquaredDistance(std::span<const double> a, const double* b) {
  double s = 0.0;
  for (size_t k = 0; k < a.size(); ++k) {
    double c = a[k] - b[k];
    s += c * c;
  }
  return s;
}

// k-means++ seeding on a random subsample of at most max_frames rows.
std::vector<double> KMeansPlusPlusCenters(const FeatureMatrix& x, int n,
                                          int max_frames, Rng& rng) {
  std::vector<int> idx(x.frames);
  std::iota(idx.begin(), idx.end(), 0);
  const int m = std::min(x.frames, std::max(max_frames, n));
  for (int j = 0; j < m; ++j) {
    int k = j + static_cast<int>(rng.Index(x.frames - j));
    std::swap(idx[j], idx[k]);
  }
  idx.resize(m);

  const int d = x.dim;
  std::vector<double> centers(static_cast<size_t>(n) * d);
  std::vector<double> dist(m, std::numeric_limits<double>::infinity());
  int chosen = idx[rng.Index(m)];
  for (int c = 0; c < n; ++c) {
    auto src = x.row(chosen);
    std::copy(src.begin(), src.end(), centers.begin() + static_cast<size_t>(c) * d);
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
      dist[j] = std::min(dist[j], SquaredDistance(x.row(idx[j]),
                                                  centers.data() + static_cast<size_t>(c) * d));
      total += dist[j];
    }
    if (c + 1 == n) break;
    if (total <= 0.0) {
      chosen = idx[rng.Index(m)];
      continue;
    }
    double r = rng.Uniform() * total;
    int pick = m - 1;
    for (int j = 0; j < m; ++j) {
      r -= dist[j];
      if (r < 0.0) {
        pick = j;
        break;
      }
    }
    chosen = idx[pick];
  }
  return centers;
}

}  // namespace

double LgpDroppedConstant(const DiagGmm& gmm, int i) {
  double logdet = 0.0, quad = 0.0;
  for (int k = 0; k < gmm.dim; ++k) {
    double v = gmm.variance(i, k);
    double m = gmm.mean(i, k);
    logdet += std::log(v);
    quad += m * m / v;
  }
  return -0.5 * (gmm.dim * kLog2Pi + logdet + quad);
}

EmResult EmTrain(const FeatureMatrix& frames, const EmOptions& opts) {
  const int n = opts.n_components, d = frames.dim;
  if (n < 1) throw ConfigError("em: n_components must be >= 1");
  if (opts.n_iters < 1) throw ConfigError("em: n_iters must be >= 1");
  if (frames.frames < 10 * n) {
    throw DataError("em: need at least " + std::to_string(10 * n) +
                    " frames for " + std::to_string(n) + " components, got " +
                    std::to_string(frames.frames));
  }
  for (double v : frames.data) {
    if (!std::isfinite(v)) throw NumericError("em: non-finite input frame");
  }

  GlobalStats global = ComputeGlobalStats(frames);
  std::vector<double> floor(d);
  for (int k = 0; k < d; ++k) {
    floor[k] = std::max(opts.variance_floor_factor * global.var[k], 1e-12);
  }

  EmResult result;
  DiagGmm& gmm = result.gmm;
  gmm.n_components = n;
  gmm.dim = d;
  gmm.variance_floor_factor = opts.variance_floor_factor;
  gmm.weights.assign(n, 1.0 / n);
  gmm.means.assign(static_cast<size_t>(n) * d, 0.0);
  gmm.variances.assign(static_cast<size_t>(n) * d, 1.0);

  // Initialization: k-means++ centers, then one hard-assignment M-step.
  Rng rng(opts.seed);
  std::vector<double> centers =
      KMeansPlusPlusCenters(frames, n, opts.kmeans_max_frames, rng);
  ShardAccum hard(n, d, true);
  for (int t = 0; t < frames.frames; ++t) {
    auto row = frames.row(t);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      double dist = SquaredDistance(row, centers.data() + static_cast<size_t>(i) * d);
      if (dist < best_d) {
        best_d = dist;
        best = i;
      }
    }
    hard.occupancy[best] += 1.0;
    for (int k = 0; k < d; ++k) {
      hard.first[static_cast<size_t>(best) * d + k] += row[k];
      hard.second[static_cast<size_t>(best) * d + k] += row[k] * row[k];
    }
  }
  result.reinitialized_components +=
      MStep(hard, frames.frames, floor, global, frames, &gmm);

  for (int it = 0; it < opts.n_iters; ++it) {
    ShardAccum acc =
        EStep(gmm, frames, opts.shard_frames, opts.num_threads, true);
    double ll = acc.log_likelihood / frames.frames;
    if (!std::isfinite(ll)) throw NumericError("em: non-finite log-likelihood");
    result.log_likelihood.push_back(ll);
    spdlog::debug("gmm: iter {} avg loglik {:.6f}", it, ll);
    result.reinitialized_components +=
        MStep(acc, frames.frames, floor, global, frames, &gmm);
  }
  result.log_likelihood.push_back(AverageLogLikelihood(gmm, frames));
  return result;
}

double AverageLogLikelihood(const DiagGmm& gmm, const FeatureMatrix& frames) {
  if (frames.dim != gmm.dim) throw DataError("gmm: dimension mismatch");
  ShardAccum acc = EStep(gmm, frames, 4096, 1, false);
  return acc.log_likelihood / frames.frames;
}

std::vector<double> LgpFrame(const DiagGmm& gmm, std::span<const double> x) {
  if (static_cast<int>(x.size()) != gmm.dim) {
    throw DataError("lgp: dimension mismatch");
  }
  LgpKernel kernel(gmm);
  std::vector<double> y(gmm.n_components);
  for (int i = 0; i < gmm.n_components; ++i) y[i] = kernel.Eval(i, x.data());
  return y;
}

FeatureMatrix LgpExtract(const DiagGmm& gmm, const FeatureMatrix& feat) {
  if (feat.kind != FeatureKind::kMfcc) {
    throw DataError("lgp: input must be an MFCC matrix");
  }
  if (feat.dim != gmm.dim) {
    throw DataError("lgp: dimension mismatch (features " +
                    std::to_string(feat.dim) + ", gmm " +
                    std::to_string(gmm.dim) + ")");
  }
  LgpKernel kernel(gmm);
  FeatureMatrix out(feat.frames, gmm.n_components, FeatureKind::kLgp);
  out.frame_shift = feat.frame_shift;
  for (int t = 0; t < feat.frames; ++t) {
    const double* row = feat.data.data() + static_cast<size_t>(t) * feat.dim;
    for (int i = 0; i < gmm.n_components; ++i) out.at(t, i) = kernel.Eval(i, row);
  }
  return out;
}

NormStatsAccumulator::NormStatsAccumulator(int width)
    : width_(width), mean_(width, 0.0), m2_(width, 0.0) {}

void NormStatsAccumulator::Add(const FeatureMatrix& lgp) {
  if (lgp.dim != width_) throw DataError("norm stats: width mismatch");
  for (int t = 0; t < lgp.frames; ++t) {
    ++count_;
    const double inv = 1.0 / static_cast<double>(count_);
    for (int i = 0; i < width_; ++i) {
      double v = lgp.at(t, i);
      double delta = v - mean_[i];
      mean_[i] += delta * inv;
      m2_[i] += delta * (v - mean_[i]);
    }
  }
}

LgpNormStats NormStatsAccumulator::Finalize(double std_floor) const {
  if (count_ == 0) throw DataError("norm stats: empty stream");
  LgpNormStats s;
  s.mean = mean_;
  s.std.resize(width_);
  for (int i = 0; i < width_; ++i) {
    s.std[i] = std::max(std::sqrt(m2_[i] / static_cast<double>(count_)),
                        std_floor);
  }
  return s;
}

LgpNormStats FitNormStats(const DiagGmm& gmm,
                          std::span<const FeatureMatrix> mfcc_feats) {
  NormStatsAccumulator acc(gmm.n_components);
  for (const auto& f : mfcc_feats) acc.Add(LgpExtract(gmm, f));
  return acc.Finalize();
}

FeatureMatrix LgpNormalize(FeatureMatrix feat, const LgpNormStats& stats) {
  if (static_cast<int>(stats.mean.size()) != feat.dim ||
      stats.std.size() != stats.mean.size()) {
    throw DataError("lgp normalize: width mismatch");
  }
  for (int t = 0; t < feat.frames; ++t) {
    for (int i = 0; i < feat.dim; ++i) {
      feat.at(t, i) = (feat.at(t, i) - stats.mean[i]) / stats.std[i];
    }
  }
  return feat;
}

namespace {
constexpr char kGmmMagic[] = "GMMv1\0\0\0";

void WriteF64Array(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> ReadF64Array(std::istream& is, size_t n) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw DataError("gmm: truncated file");
  return v;
}
}  // namespace

void WriteGmm(const std::filesystem::path& path, const DiagGmm& gmm,
              uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  binio::WriteMagic(os, std::string_view(kGmmMagic, 8));
  binio::WriteU32(os, static_cast<uint32_t>(gmm.n_components));
  binio::WriteU32(os, static_cast<uint32_t>(gmm.dim));
  binio::WriteF64(os, gmm.variance_floor_factor);
  binio::WriteU64(os, config_hash);
  binio::WriteU32(os, gmm.has_norm_stats ? 1 : 0);
  WriteF64Array(os, gmm.weights);
  WriteF64Array(os, gmm.means);
  WriteF64Array(os, gmm.variances);
  if (gmm.has_norm_stats) {
    WriteF64Array(os, gmm.norm.mean);
    WriteF64Array(os, gmm.norm.std);
  } else {
    WriteF64Array(os, std::vector<double>(gmm.n_components, 0.0));
    WriteF64Array(os, std::vector<double>(gmm.n_components, 1.0));
  }
  if (!os) throw DataError("write failed: " + path.string());
}

DiagGmm ReadGmm(const std::filesystem::path& path, uint64_t* config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  binio::ExpectMagic(is, std::string_view(kGmmMagic, 8), path.string());
  DiagGmm gmm;
  gmm.n_components = static_cast<int>(binio::ReadU32(is));
  gmm.dim = static_cast<int>(binio::ReadU32(is));
  if (gmm.n_components < 1 || gmm.dim < 1) {
    throw DataError(path.string() + ": invalid GMM shape");
  }
  gmm.variance_floor_factor = binio::ReadF64(is);
  uint64_t hash = binio::ReadU64(is);
  if (config_hash) *config_hash = hash;
  gmm.has_norm_stats = binio::ReadU32(is) != 0;
  const size_t n = gmm.n_components, nd = n * gmm.dim;
  gmm.weights = ReadF64Array(is, n);
  gmm.means = ReadF64Array(is, nd);
  gmm.variances = ReadF64Array(is, nd);
  gmm.norm.mean = ReadF64Array(is, n);
  gmm.norm.std = ReadF64Array(is, n);
  if (!gmm.has_norm_stats) gmm.norm = LgpNormStats{};
  for (double v : gmm.variances) {
    if (!(v > 0.0)) throw DataError(path.string() + ": non-positive variance");
  }
  return gmm;
}

}  // namespace gmmresnext
