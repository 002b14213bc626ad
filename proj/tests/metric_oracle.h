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

#ifndef GMMRESNEXT_TESTS_METRIC_ORACLE_H_
#define GMMRESNEXT_TESTS_METRIC_ORACLE_H_

#include <algorithm>
#include <limits>
#include <vector>

namespace gmmresnext::testing {

// O(n^2) threshold scan: every observed score plus +inf is a candidate and
// the error rates at each candidate are counted from scratch.
struct ScanPoint {
  double threshold, p_miss, p_fa;
};

inline std::vector<ScanPoint> ExhaustiveScan(const std::vector<double>& tgt,
                                             const std::vector<double>& non) {
  std::vector<double> cand(tgt);
  cand.insert(cand.end(), non.begin(), non.end());
  cand.push_back(std::numeric_limits<double>::infinity());
  std::sort(cand.begin(), cand.end());
  std::vector<ScanPoint> pts;
  for (double t : cand) {
    int miss = 0, fa = 0;
    for (double s : tgt) miss += s < t;
    for (double s : non) fa += s >= t;
    pts.push_back({t, static_cast<double>(miss) / tgt.size(),
                   static_cast<double>(fa) / non.size()});
  }
  return pts;
}

// Crossing of the miss and false-alarm curves, linearly interpolated between
// the last candidate with P_miss < P_fa and the next one.
inline double OracleEer(const std::vector<double>& tgt,
                        const std::vector<double>& non) {
  auto pts = ExhaustiveScan(tgt, non);
  for (size_t k = 0; k < pts.size(); ++k) {
    if (pts[k].p_miss < pts[k].p_fa) continue;
    if (k == 0) return pts[0].p_miss;
    const ScanPoint& a = pts[k - 1];
    const ScanPoint& b = pts[k];
    // Solve a.miss + w (b.miss - a.miss) = a.fa + w (b.fa - a.fa).
    const double w = (a.p_fa - a.p_miss) /
                     ((b.p_miss - a.p_miss) - (b.p_fa - a.p_fa));
    return a.p_miss + w * (b.p_miss - a.p_miss);
  }
  return 1.0;
}

inline double OracleMinDcf(const std::vector<double>& tgt,
                           const std::vector<double>& non, double p_target,
                           double c_miss, double c_fa) {
  const double wm = c_miss * p_target, wf = c_fa * (1.0 - p_target);
  double best = std::numeric_limits<double>::infinity();
  for (const ScanPoint& p : ExhaustiveScan(tgt, non)) {
    best = std::min(best, (wm * p.p_miss + wf * p.p_fa) / std::min(wm, wf));
  }
  return best;
}

}  // namespace gmmresnext::testing

#endif  // GMMRESNEXT_TESTS_METRIC_ORACLE_H_
