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

// A small reverse-mode differentiation engine: dense tensors, a tape that
// records operator closures in construction order, and the operator set the
// speaker-embedding network needs. Everything runs in double precision.

#ifndef GMMRESNEXT_NNCORE_H_
#define GMMRESNEXT_NNCORE_H_

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace gmmresnext::nn {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> values);
  static Tensor Scalar(double v) { return Tensor({}, v); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double& operator[](size_t i) { return data_[i]; }
  const double& operator[](size_t i) const { return data_[i]; }

  // Rank-3 (batch, channel, time) and rank-2 (row, col) accessors.
  double& at(int b, int c, int t) {
    return data_[(static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + t];
  }
  const double& at(int b, int c, int t) const {
    return data_[(static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + t];
  }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
  const double& at(int r, int c) const {
    return data_[static_cast<size_t>(r) * shape_[1] + c];
  }

  bool SameShape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string ShapeString() const;
  void Fill(double v);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

enum class ParamKind {
  kWeight,      // receives weight decay
  kBias,
  kNormAffine,  // batchnorm gamma / beta
  kNormStat,    // batchnorm running statistics; never trained
};

struct Parameter {
  Tensor value;
  Tensor grad;
  ParamKind kind = ParamKind::kWeight;
  bool trainable = true;
};

// Named parameter leaves, iterated in sorted-name order.
class ParamTree {
 public:
  Parameter& Add(const std::string& name, Tensor value, ParamKind kind);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const {
    return leaves_.count(name) > 0;
  }
  std::map<std::string, Parameter>& leaves() { return leaves_; }
  const std::map<std::string, Parameter>& leaves() const { return leaves_; }

  void ZeroGrad();
  // Applies to every leaf whose name starts with prefix.
  void SetTrainable(const std::string& prefix, bool trainable);
  // Number of scalars in non-statistic leaves under prefix.
  int64_t CountParameters(const std::string& prefix = "") const;
  // Rounds every value to the nearest float; parameters are stored at f32.
  void RoundToFloat();

 private:
  std::map<std::string, Parameter> leaves_;
};

class Graph;

// Handle to a node on a Graph tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  // Receives the gradient of the node's output and accumulates into its
  // parents through Graph::GradRef.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Constant input; no gradient is tracked.
  Var Input(Tensor value);
  // Input whose gradient is tracked and readable through grad().
  Var Leaf(Tensor value);
  // Parameter leaf; Backward adds its gradient into p.grad.
  Var Param(Parameter& p);

  const Tensor& value(Var v) const;
  // Gradient of a node after Backward; zeros when it was never reached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;

  // Reverse-mode accumulation from a scalar loss.
  void Backward(Var loss);

  // Appends an op node. The closure runs only when some parent requires
  // a gradient.
  Var Record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);
  // Gradient buffer of v, allocated on first use.
  Tensor& GradRef(Var v);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<std::unique_ptr<Node>> nodes_;
};

// ---------------------------------------------------------------------------
// Operators

// Cross-correlation over time. x: (B, Cin, T); weight: (Cout, Cin / groups, K);
// bias: (Cout). T_out = floor((T + 2 * padding - K) / stride) + 1.
Var Conv1d(Var x, Var weight, std::optional<Var> bias, int stride = 1,
           int padding = 0, int groups = 1);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization of (B, C, T) or (B, C) input. In training mode the
// batch statistics over (B, T) are used and the running statistics updated
// in place; in eval mode the running statistics are used.
Var BatchNorm(Var x, Var gamma, Var beta, Tensor* running_mean,
              Tensor* running_var, const BatchNormOptions& opts);

Var Relu(Var x);
Var Sigmoid(Var x);
Var Tanh(Var x);

// x: (B, In); weight: (Out, In); bias: (Out).
Var Linear(Var x, Var weight, std::optional<Var> bias);

Var Add(Var a, Var b);
Var Mul(Var a, Var b);
Var Scale(Var x, double factor);

// x: (B, C, T) times gate s: (B, C) broadcast over time.
Var MulChannels(Var x, Var s);
// Temporal mean: (B, C, T) -> (B, C).
Var MeanTime(Var x);
// Softmax along the last axis.
Var Softmax(Var x);
// Concatenation along axis 1 of rank-2 or rank-3 tensors.
Var Concat(const std::vector<Var>& xs);
// Attention-weighted statistics: h (B, C, T), alpha (B, 1, T) with rows
// summing to one. Output (B, 2C) = [mean, sqrt(max(var, var_floor))].
Var AttentiveStats(Var h, Var alpha, double var_floor = 1e-9);
// Row-wise x / max(||x||, eps) for (B, E).
Var L2NormalizeRows(Var x, double eps = 1e-12);

Var Sum(Var x);
Var Mean(Var x);

}  // namespace gmmresnext::nn

#endif  // GMMRESNEXT_NNCORE_H_
