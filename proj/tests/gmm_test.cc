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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "gmmresnext/gmm.h"
#include "test_util.h"

using namespace gmmresnext;
using gmmresnext::testing::TempDir;

namespace {

DiagGmm RandomGmm(int n, int d, Rng& rng) {
  DiagGmm g;
  g.n_components = n;
  g.dim = d;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    g.weights.push_back(rng.Uniform(0.1, 1.0));
    total += g.weights.back();
  }
  for (double& w : g.weights) w /= total;
  for (int k = 0; k < n * d; ++k) {
    g.means.push_back(rng.Uniform(-3.0, 3.0));
    g.variances.push_back(rng.Uniform(0.2, 4.0));
  }
  return g;
}

// Full diagonal Gaussian log-density of component i.
double LogDensity(const DiagGmm& g, int i, const std::vector<double>& x) {
  double s = -0.5 * g.dim * std::log(2.0 * M_PI);
  for (int d = 0; d < g.dim; ++d) {
    const double v = g.variance(i, d), e = x[d] - g.mean(i, d);
    s -= 0.5 * std::log(v) + 0.5 * e * e / v;
  }
  return s;
}

FeatureMatrix MixtureData(int frames, int dim, int clusters, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> centers(static_cast<size_t>(clusters) * dim);
  for (double& c : centers) c = rng.Uniform(-6.0, 6.0);
  FeatureMatrix f(frames, dim);
  for (int t = 0; t < frames; ++t) {
    const int k = static_cast<int>(rng.Index(clusters));
    for (int d = 0; d < dim; ++d) {
      f.at(t, d) = centers[static_cast<size_t>(k) * dim + d] + rng.Normal();
    }
  }
  return f;
}

}  // namespace

TEST_CASE("lgp plus dropped constant equals the full log-density") {
  Rng rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    DiagGmm g = RandomGmm(3, 5, rng);
    std::vector<double> x(5);
    for (double& v : x) v = rng.Uniform(-4.0, 4.0);
    std::vector<double> y = LgpFrame(g, x);
    for (int i = 0; i < 3; ++i) {
      worst = std::max(worst, std::abs(y[i] + LgpDroppedConstant(g, i) -
                                        LogDensity(g, i, x)));
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("lgp hand examples") {
  DiagGmm g;
  g.n_components = 1;
  g.dim = 2;
  g.weights = {1.0};
  g.means = {1.0, 0.0};
  g.variances = {1.0, 1.0};
  std::vector<double> x{1.0, 0.0};
  CHECK(LgpFrame(g, x)[0] == doctest::Approx(0.5).epsilon(1e-15));
  std::vector<double> zero{0.0, 0.0};
  CHECK(LgpFrame(g, zero)[0] == 0.0);
  DiagGmm h;
  h.n_components = 1;
  h.dim = 1;
  h.weights = {1.0};
  h.means = {0.0};
  h.variances = {4.0};
  std::vector<double> two{2.0};
  CHECK(LgpFrame(h, two)[0] == -0.5);
}

TEST_CASE("lgp_extract is a framewise map") {
  Rng rng(2);
  DiagGmm g = RandomGmm(4, 3, rng);
  FeatureMatrix f(5, 3);
  for (double& v : f.data) v = rng.Uniform(-1.0, 1.0);
  FeatureMatrix y = LgpExtract(g, f);
  CHECK(y.frames == 5);
  CHECK(y.dim == 4);
  CHECK(y.kind == FeatureKind::kLgp);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> row = LgpFrame(g, f.row(t));
    for (int i = 0; i < 4; ++i) CHECK(y.at(t, i) == row[i]);
  }
  FeatureMatrix rev(5, 3);
  for (int t = 0; t < 5; ++t) {
    std::copy(f.row(4 - t).begin(), f.row(4 - t).end(), rev.row(t).begin());
  }
  FeatureMatrix yr = LgpExtract(g, rev);
  for (int t = 0; t < 5; ++t) {
    for (int i = 0; i < 4; ++i) CHECK(yr.at(t, i) == y.at(4 - t, i));
  }
  CHECK_THROWS_AS(LgpExtract(g, FeatureMatrix(2, 4)), DataError);
}

TEST_CASE("single-component EM equals the sample moments") {
  FeatureMatrix f = MixtureData(500, 4, 3, 5);
  EmOptions o;
  o.n_components = 1;
  o.n_iters = 3;
  o.seed = 1;
  DiagGmm g = EmTrain(f, o).gmm;
  REQUIRE(g.weights.size() == 1);
  CHECK(std::abs(g.weights[0] - 1.0) < 1e-12);
  for (int d = 0; d < 4; ++d) {
    double m = 0.0, v = 0.0;
    for (int t = 0; t < f.frames; ++t) m += f.at(t, d);
    m /= f.frames;
    for (int t = 0; t < f.frames; ++t) v += (f.at(t, d) - m) * (f.at(t, d) - m);
    v /= f.frames;
    CHECK(std::abs(g.mean(0, d) - m) < 1e-9);
    CHECK(std::abs(g.variance(0, d) - v) < 1e-9);
  }
}

TEST_CASE("EM log-likelihood never decreases") {
  for (int n : {4, 16, 64}) {
    FeatureMatrix f = MixtureData(40 * n, 3, n, 100 + n);
    EmOptions o;
    o.n_components = n;
    o.n_iters = 30;
    o.seed = 9;
    EmResult r = EmTrain(f, o);
    REQUIRE(r.log_likelihood.size() == 31);
    for (size_t k = 1; k < r.log_likelihood.size(); ++k) {
      CHECK(r.log_likelihood[k] >= r.log_likelihood[k - 1] - 1e-8);
    }
    CHECK(std::abs(r.log_likelihood.back() -
                   AverageLogLikelihood(r.gmm, f)) < 1e-9);
  }
}

TEST_CASE("EM recovers two separated Gaussians") {
  Rng rng(4);
  FeatureMatrix f(2000, 2);
  for (int t = 0; t < f.frames; ++t) {
    const double c = t % 2 == 0 ? -5.0 : 5.0;
    f.at(t, 0) = c + rng.Normal();
    f.at(t, 1) = -c + rng.Normal();
  }
  EmOptions o;
  o.n_components = 2;
  o.n_iters = 30;
  o.seed = 3;
  DiagGmm g = EmTrain(f, o).gmm;
  const int lo = g.mean(0, 0) < g.mean(1, 0) ? 0 : 1;
  CHECK(std::abs(g.mean(lo, 0) + 5.0) < 0.1);
  CHECK(std::abs(g.mean(lo, 1) - 5.0) < 0.1);
  CHECK(std::abs(g.mean(1 - lo, 0) - 5.0) < 0.1);
  CHECK(std::abs(g.mean(1 - lo, 1) + 5.0) < 0.1);
}

TEST_CASE("EM is deterministic and validates its inputs") {
  FeatureMatrix f = MixtureData(400, 3, 4, 8);
  EmOptions o;
  o.n_components = 4;
  o.n_iters = 5;
  o.seed = 2;
  DiagGmm a = EmTrain(f, o).gmm, b = EmTrain(f, o).gmm;
  CHECK(a.means == b.means);
  CHECK(a.variances == b.variances);
  o.n_components = 41;
  CHECK_THROWS_AS(EmTrain(f, o), DataError);
}

TEST_CASE("norm stats hand cases and two-pass agreement") {
  FeatureMatrix two(2, 1, FeatureKind::kLgp);
  two.data = {0.0, 2.0};
  NormStatsAccumulator acc(1);
  acc.Add(two);
  LgpNormStats s = acc.Finalize();
  CHECK(s.mean[0] == 1.0);
  CHECK(s.std[0] == 1.0);

  FeatureMatrix same(3, 1, FeatureKind::kLgp);
  same.data = {4.0, 4.0, 4.0};
  NormStatsAccumulator acc2(1);
  acc2.Add(same);
  CHECK(acc2.Finalize().std[0] == 1e-6);
  CHECK(acc2.Finalize().mean[0] == 4.0);
  CHECK_THROWS_AS(NormStatsAccumulator(1).Finalize(), DataError);

  Rng rng(6);
  NormStatsAccumulator acc3(3);
  std::vector<double> all;
  for (int k = 0; k < 4; ++k) {
    FeatureMatrix m(50 + k, 3, FeatureKind::kLgp);
    for (double& v : m.data) v = 1000.0 + rng.Uniform(-5.0, 5.0);
    acc3.Add(m);
    all.insert(all.end(), m.data.begin(), m.data.end());
  }
  LgpNormStats w = acc3.Finalize();
  const size_t rows = all.size() / 3;
  for (int d = 0; d < 3; ++d) {
    double m = 0.0, v = 0.0;
    for (size_t t = 0; t < rows; ++t) m += all[t * 3 + d];
    m /= rows;
    for (size_t t = 0; t < rows; ++t) v += std::pow(all[t * 3 + d] - m, 2);
    CHECK(std::abs(w.mean[d] - m) < 1e-7);
    CHECK(std::abs(w.std[d] - std::sqrt(v / rows)) < 1e-7);
  }

  FeatureMatrix at_mean(2, 3, FeatureKind::kLgp);
  for (int t = 0; t < 2; ++t) {
    for (int d = 0; d < 3; ++d) at_mean.at(t, d) = w.mean[d];
  }
  for (double v : LgpNormalize(at_mean, w).data) CHECK(v == 0.0);
}

TEST_CASE("gmm file round trip") {
  TempDir dir("gmm");
  Rng rng(1);
  DiagGmm g = RandomGmm(3, 2, rng);
  g.has_norm_stats = true;
  g.norm.mean = {1.0, 2.0, 3.0};
  g.norm.std = {0.5, 0.25, 2.0};
  WriteGmm(dir.path() / "g.bin", g, 77);
  uint64_t h = 0;
  DiagGmm r = ReadGmm(dir.path() / "g.bin", &h);
  CHECK(h == 77);
  CHECK(r.weights == g.weights);
  CHECK(r.means == g.means);
  CHECK(r.variances == g.variances);
  CHECK(r.norm.std == g.norm.std);
}
