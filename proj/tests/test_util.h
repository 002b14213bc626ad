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

#ifndef GMMRESNEXT_TESTS_TEST_UTIL_H_
#define GMMRESNEXT_TESTS_TEST_UTIL_H_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "gmmresnext/common.h"
#include "gmmresnext/nncore.h"

namespace gmmresnext::testing {

// Directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gmmresnext_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline nn::Tensor RandomTensor(std::vector<int> shape, Rng& rng,
                               double lo = -1.0, double hi = 1.0) {
  nn::Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.Uniform(lo, hi);
  return t;
}

// Uniform values with magnitude in [margin, 1], random sign; keeps ReLU
// inputs away from the kink.
inline nn::Tensor AwayFromZero(std::vector<int> shape, Rng& rng,
                               double margin = 1e-2) {
  nn::Tensor t(std::move(shape));
  for (double& v : t.values()) {
    double m = rng.Uniform(margin, 1.0);
    v = rng.Uniform() < 0.5 ? -m : m;
  }
  return t;
}

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is numerically zero from dividing rounding noise by itself.
inline double RelativeError(double analytic, double numeric,
                            double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  size_t checked = 0;
  std::string worst;
};

// Builds the scalar loss from leaves created for `inputs`, back-propagates
// once, and compares every entry of every leaf gradient with central
// differences of step h.
using LossBuilder =
    std::function<nn::Var(nn::Graph&, const std::vector<nn::Var>&)>;

inline GradCheckReport CheckInputGradients(std::vector<nn::Tensor> inputs,
                                           const LossBuilder& build,
                                           double h = 1e-4) {
  std::vector<nn::Tensor> analytic;
  {
    nn::Graph g;
    std::vector<nn::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.Leaf(t));
    nn::Var loss = build(g, leaves);
    g.Backward(loss);
    for (const auto& v : leaves) analytic.push_back(g.grad(v));
  }
  auto eval = [&]() {
    nn::Graph g;
    std::vector<nn::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.Input(t));
    return build(g, leaves).value()[0];
  };
  GradCheckReport rep;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = eval();
      inputs[k][i] = orig - h;
      const double down = eval();
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = RelativeError(analytic[k][i], numeric);
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = "input " + std::to_string(k) + "[" + std::to_string(i) +
                    "] analytic " + std::to_string(analytic[k][i]) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  return rep;
}

// Same check for the leaves of a ParamTree (kNormStat leaves skipped).
// build() must read parameters through the tree on every call.
using ParamLossBuilder = std::function<nn::Var(nn::Graph&)>;

inline GradCheckReport CheckParamGradients(nn::ParamTree* params,
                                           const ParamLossBuilder& build,
                                           double h = 1e-4) {
  params->ZeroGrad();
  {
    nn::Graph g;
    nn::Var loss = build(g);
    g.Backward(loss);
  }
  GradCheckReport rep;
  for (auto& [name, p] : params->leaves()) {
    if (p.kind == nn::ParamKind::kNormStat) continue;
    for (size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      double up;
      {
        nn::Graph g;
        up = build(g).value()[0];
      }
      p.value[i] = orig - h;
      double down;
      {
        nn::Graph g;
        down = build(g).value()[0];
      }
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = RelativeError(p.grad[i], numeric);
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = name + "[" + std::to_string(i) + "] analytic " +
                    std::to_string(p.grad[i]) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return rep;
}

}  // namespace gmmresnext::testing

#endif  // GMMRESNEXT_TESTS_TEST_UTIL_H_
