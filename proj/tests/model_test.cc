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

#include <cmath>

#include "gmmresnext/model.h"
#include "model_oracle.h"
#include "test_util.h"

using namespace gmmresnext;
using namespace gmmresnext::nn;
using gmmresnext::testing::CheckParamGradients;
using gmmresnext::testing::ClosedFormParamCount;
using gmmresnext::testing::RandomTensor;
using gmmresnext::testing::TempDir;

namespace {

ModelConfig TinyConfig(int n = 16) {
  ModelConfig m;
  m.n_gaussians = n;
  m.stage_blocks = {1, 1, 1, 1};
  m.stage_channels = {8, 8, 8, 8};
  m.asp_bottleneck = 6;
  m.embedding_dim = 5;
  return m;
}

LayerContext Ctx(Graph& g, ParamTree& p, bool training) {
  LayerContext c;
  c.graph = &g;
  c.params = &p;
  c.training = training;
  return c;
}

Var WeightedSum(Graph& g, Var v) {
  Rng rng(41);
  return Sum(Mul(v, g.Input(RandomTensor(v.shape(), rng))));
}

}  // namespace

TEST_CASE("default architecture arithmetic") {
  ModelConfig m;
  CHECK(m.AspInputChannels() == 1024);
  m.ablate_mfa = true;
  CHECK(m.AspInputChannels() == 256);
  m.ablate_mfa = false;
  ParamTree p;
  GmmResNext(m).Register(&p, 1);
  CHECK(p.CountParameters() == ClosedFormParamCount(m));
  CHECK(p.at("embed.weight").value.shape() == std::vector<int>{256, 2048});
  // Block count at C=256 from the symbolic formula.
  CHECK(p.CountParameters("stage1.block1.") ==
        2 * 256 * 256 + 3 * 256 + 4 * 256 + 2 * 256 * 64 + 64 + 256);
}

TEST_CASE("mixed widths add projections counted by the formula") {
  ModelConfig m = TinyConfig();
  m.stage_channels = {8, 12, 12, 16};
  m.ablate_mfa = true;
  ParamTree p;
  GmmResNext(m).Register(&p, 2);
  CHECK(p.contains("stage2.proj.conv.weight"));
  CHECK_FALSE(p.contains("stage3.proj.conv.weight"));
  CHECK(p.CountParameters() == ClosedFormParamCount(m));
  m.ablate_gmm = true;
  m.mfcc_dim = 20;
  ParamTree q;
  GmmResNext(m).Register(&q, 2);
  CHECK(q.at("stem.conv.weight").value.dim(1) == 20);
  CHECK(q.CountParameters() == ClosedFormParamCount(m));
}

TEST_CASE("forward shapes preserve time and embed to E") {
  ModelConfig m = TinyConfig();
  ParamTree p;
  GmmResNext net(m);
  net.Register(&p, 3);
  Rng rng(3);
  Graph g;
  auto tr = net.ForwardTrace(Ctx(g, p, false),
                             g.Input(RandomTensor({2, 16, 11}, rng)));
  for (const Var& s : tr.stage_outputs) {
    CHECK(s.shape() == std::vector<int>{2, 8, 11});
  }
  CHECK(tr.aggregated.shape() == std::vector<int>{2, 32, 11});
  CHECK(tr.pooling.pooled.shape() == std::vector<int>{2, 64});
  CHECK(tr.embedding.shape() == std::vector<int>{2, 5});
  for (int b = 0; b < 2; ++b) {
    double tot = 0.0;
    for (int t = 0; t < 11; ++t) tot += tr.pooling.alpha.value().at(b, 0, t);
    CHECK(std::abs(tot - 1.0) < 1e-7);
  }
  CHECK_THROWS_AS(net.Forward(Ctx(g, p, false), g.Input(Tensor({1, 15, 11}))),
                  DataError);
  CHECK_THROWS_AS(net.Forward(Ctx(g, p, false), g.Input(Tensor({1, 16, 1}))),
                  DataError);
}

TEST_CASE("eval forward is pure and batch-independent") {
  ModelConfig m = TinyConfig();
  ParamTree p;
  GmmResNext net(m);
  net.Register(&p, 4);
  Rng rng(5);
  Tensor one = RandomTensor({1, 16, 9}, rng);
  Tensor two({2, 16, 9});
  for (int c = 0; c < 16; ++c)
    for (int t = 0; t < 9; ++t) two.at(0, c, t) = two.at(1, c, t) = one.at(0, c, t);
  Graph g;
  Tensor e1 = net.Forward(Ctx(g, p, false), g.Input(one)).value();
  Tensor e2 = net.Forward(Ctx(g, p, false), g.Input(two)).value();
  Tensor e3 = net.Forward(Ctx(g, p, false), g.Input(one)).value();
  for (int k = 0; k < 5; ++k) {
    CHECK(e2.at(0, k) == e1.at(0, k));
    CHECK(e2.at(1, k) == e1.at(0, k));
  }
  CHECK(e1.values() == e3.values());
}

TEST_CASE("residual block reduces to relu with zero weights and bypassed SE") {
  ParamTree p;
  Rng rng(6);
  AddDwResBlock(&p, "b", 8, 4, rng);
  for (auto& [name, leaf] : p.leaves()) {
    if (leaf.kind == ParamKind::kWeight) leaf.value.Fill(0.0);
  }
  Tensor x = RandomTensor({2, 8, 7}, rng);
  for (bool training : {true, false}) {
    Graph g;
    LayerContext c = Ctx(g, p, training);
    c.bypass_se = true;
    Tensor y = DwResBlock(c, "b", g.Input(x)).value();
    for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == std::max(x[i], 0.0));
  }
}

TEST_CASE("SE block hand cases and gradients") {
  ParamTree p;
  Rng rng(7);
  AddSeBlock(&p, "se", 8, 4, rng);
  Tensor x = RandomTensor({2, 8, 5}, rng);
  {
    ParamTree q = p;
    q.at("se.fc2.weight").value.Fill(0.0);
    q.at("se.fc2.bias").value.Fill(0.0);
    Graph g;
    Tensor y = SeBlock(Ctx(g, q, true), "se", g.Input(x)).value();
    for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == 0.5 * x[i]);
  }
  auto rep = CheckParamGradients(&p, [&](Graph& g) {
    return WeightedSum(g, SeBlock(Ctx(g, p, true), "se", g.Input(x)));
  });
  CHECK_MESSAGE(rep.max_rel_error < 1e-3, rep.worst);
}

TEST_CASE("MFA concatenation and ablation") {
  ParamTree p;
  AddBatchNorm(&p, "mfa.bn", 12);
  AddBatchNorm(&p, "last.bn", 3);
  Rng rng(8);
  Graph g;
  std::vector<Var> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(g.Input(RandomTensor({1, 3, 6}, rng)));
  Var full = MultiLayerAggregation(Ctx(g, p, false), "mfa", xs, false);
  CHECK(full.shape() == std::vector<int>{1, 12, 6});
  // Eval mode with unit running stats is a near-identity, so the channel
  // blocks appear in list order.
  for (int t = 0; t < 6; ++t) {
    CHECK(full.value().at(0, 4, t) ==
          doctest::Approx(xs[1].value().at(0, 1, t) / std::sqrt(1.0 + 1e-5)));
  }
  Var last = MultiLayerAggregation(Ctx(g, p, false), "last", xs, true);
  CHECK(last.shape() == std::vector<int>{1, 3, 6});
}

TEST_CASE("attentive pooling with zeroed attention gives plain moments") {
  ParamTree p;
  Rng rng(9);
  AddConv(&p, "asp.attn1", 4, 3, 1, true, rng);
  AddConv(&p, "asp.attn2", 1, 4, 1, true, rng);
  p.at("asp.attn2.weight").value.Fill(0.0);
  Tensor h = RandomTensor({1, 3, 10}, rng);
  Graph g;
  AspOutput o = AttentiveStatsPooling(Ctx(g, p, false), "asp", g.Input(h));
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (int t = 0; t < 10; ++t) m += h.at(0, c, t);
    m /= 10;
    for (int t = 0; t < 10; ++t) v += std::pow(h.at(0, c, t) - m, 2);
    CHECK(o.pooled.value().at(0, c) == doctest::Approx(m).epsilon(1e-12));
    CHECK(o.pooled.value().at(0, 3 + c) ==
          doctest::Approx(std::sqrt(v / 10)).epsilon(1e-9));
  }
  Tensor flat({1, 3, 10}, 0.7);
  AspOutput f = AttentiveStatsPooling(Ctx(g, p, false), "asp", g.Input(flat));
  CHECK(f.pooled.value().at(0, 4) < 1e-4);
}

TEST_CASE("dual model shapes and zero fusion") {
  ModelConfig m = TinyConfig();
  DualGmmResNext dual(m);
  ParamTree p;
  dual.Register(&p, 10);
  CHECK(p.contains("path_m.stem.conv.weight"));
  CHECK(p.contains("path_f.embed.bias"));
  CHECK(p.at("fusion.fc.weight").value.shape() == std::vector<int>{5, 10});
  CHECK(p.at("path_m.stem.conv.weight").value.values() !=
        p.at("path_f.stem.conv.weight").value.values());
  Rng rng(10);
  Graph g;
  Var xm = g.Input(RandomTensor({2, 16, 8}, rng));
  Var xf = g.Input(RandomTensor({2, 16, 8}, rng));
  CHECK(dual.Forward(Ctx(g, p, false), xm, xf, false).shape() ==
        std::vector<int>{2, 5});
  p.at("fusion.fc.weight").value.Fill(0.0);
  p.at("fusion.fc.bias").value.Fill(0.0);
  for (double v : dual.Forward(Ctx(g, p, false), xm, xf, false).value().values()) {
    CHECK(v == 0.0);
  }
}

TEST_CASE("tiny model parameter gradients") {
  ModelConfig m = TinyConfig(6);
  m.stage_channels = {4, 4, 4, 4};
  ParamTree p;
  GmmResNext net(m);
  net.Register(&p, 11);
  Rng rng(11);
  Tensor x = RandomTensor({2, 6, 6}, rng);
  auto rep = CheckParamGradients(&p, [&](Graph& g) {
    return WeightedSum(g, net.Forward(Ctx(g, p, true), g.Input(x)));
  });
  CHECK_MESSAGE(rep.max_rel_error < 1e-3, rep.worst);
}

TEST_CASE("checkpoint round trip is lossless") {
  TempDir dir("ckpt");
  ModelConfig m = TinyConfig();
  m.ablate_mfa = true;
  Checkpoint c;
  c.config = m;
  c.variant = ModelVariant::kDual;
  DualGmmResNext(m).Register(&c.params, 12);
  OptimizerSnapshot s;
  s.step = 17;
  s.m["embed.weight"] = {0.1, 1.0 / 3.0};
  s.v["embed.weight"] = {1e-300, 2.0};
  c.optimizer = s;
  WriteCheckpoint(dir.path() / "a.ckpt", c, 0x1234);
  uint64_t h = 0;
  Checkpoint r = ReadCheckpoint(dir.path() / "a.ckpt", &h);
  CHECK(h == 0x1234);
  CHECK(r.config == m);
  CHECK(r.variant == ModelVariant::kDual);
  REQUIRE(r.params.leaves().size() == c.params.leaves().size());
  for (const auto& [name, leaf] : c.params.leaves()) {
    CHECK(r.params.at(name).value.values() == leaf.value.values());
    CHECK(r.params.at(name).kind == leaf.kind);
  }
  REQUIRE(r.optimizer.has_value());
  CHECK(r.optimizer->step == 17);
  CHECK(r.optimizer->m == s.m);
  CHECK(r.optimizer->v == s.v);
  CHECK(ModelConfig::Parse(m.Serialize()) == m);
  {
    std::ofstream os(dir.path() / "bad.ckpt");
    os << "garbage";
  }
  CHECK_THROWS_AS(ReadCheckpoint(dir.path() / "bad.ckpt"), DataError);
}
