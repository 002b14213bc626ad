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

#include "gmmresnext/nncore.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace gmmresnext::nn {

namespace {

size_t ShapeSize(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

[[noreturn]] void ShapeError(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": shape mismatch (" + what + ")");
}

Graph* SameGraph(const std::vector<Var>& vs) {
  Graph* g = nullptr;
  for (const Var& v : vs) {
    if (!v.valid()) throw std::invalid_argument("op on an empty Var");
    if (g && v.graph() != g) {
      throw std::invalid_argument("op mixes Vars from different graphs");
    }
    g = v.graph();
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(ShapeSize(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != ShapeSize(shape_)) {
    throw std::invalid_argument("Tensor: value count does not match shape");
  }
}

std::string Tensor::ShapeString() const {
  std::ostringstream ss;
  ss << '(';
  for (size_t i = 0; i < shape_.size(); ++i) ss << (i ? ", " : "") << shape_[i];
  ss << ')';
  return ss.str();
}

void Tensor::Fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---------------------------------------------------------------------------
// ParamTree

Parameter& ParamTree::Add(const std::string& name, Tensor value,
                          ParamKind kind) {
  if (leaves_.count(name)) {
    throw std::invalid_argument("duplicate parameter name " + name);
  }
  Parameter p;
  p.grad = Tensor(value.shape());
  p.value = std::move(value);
  p.kind = kind;
  p.trainable = kind != ParamKind::kNormStat;
  return leaves_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamTree::at(const std::string& name) {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw std::out_of_range("no parameter " + name);
  return it->second;
}

const Parameter& ParamTree::at(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw std::out_of_range("no parameter " + name);
  return it->second;
}

void ParamTree::ZeroGrad() {
  for (auto& [name, p] : leaves_) p.grad.Fill(0.0);
}

void ParamTree::SetTrainable(const std::string& prefix, bool trainable) {
  for (auto& [name, p] : leaves_) {
    if (name.compare(0, prefix.size(), prefix) == 0 &&
        p.kind != ParamKind::kNormStat) {
      p.trainable = trainable;
    }
  }
}

int64_t ParamTree::CountParameters(const std::string& prefix) const {
  int64_t n = 0;
  for (const auto& [name, p] : leaves_) {
    if (p.kind == ParamKind::kNormStat) continue;
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    n += static_cast<int64_t>(p.value.size());
  }
  return n;
}

void ParamTree::RoundToFloat() {
  for (auto& [name, p] : leaves_) {
    for (double& v : p.value.values()) v = static_cast<float>(v);
  }
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph_->value(*this); }

Graph::Node& Graph::node(Var v) {
  if (v.graph_ != this || v.id_ < 0 ||
      v.id_ >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("Var does not belong to this graph");
  }
  return *nodes_[v.id_];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.graph_ != this || v.id_ < 0 ||
      v.id_ >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("Var does not belong to this graph");
  }
  return *nodes_[v.id_];
}

Var Graph::Input(Tensor value) {
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::Leaf(Tensor value) {
  Var v = Input(std::move(value));
  nodes_.back()->requires_grad = true;
  return v;
}

Var Graph::Param(Parameter& p) {
  Var v = Input(p.value);
  nodes_.back()->requires_grad = true;
  nodes_.back()->param = &p;
  return v;
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() && !n.value.empty() ? Tensor(n.value.shape()) : n.grad;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Graph::GradRef(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Graph::Record(Tensor value, const std::vector<Var>& parents,
                  BackwardFn fn) {
  bool rg = false;
  for (const Var& p : parents) rg = rg || node(p).requires_grad;
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  n->requires_grad = rg;
  if (rg) n->backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::Backward(Var loss) {
  Node& out = node(loss);
  if (out.value.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                out.value.ShapeString());
  }
  if (!out.requires_grad) return;
  GradRef(loss).Fill(1.0);
  for (int i = loss.id_; i >= 0; --i) {
    Node& n = *nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (auto& n : nodes_) {
    if (n->param && !n->grad.empty()) {
      std::vector<double>& dst = n->param->grad.values();
      const std::vector<double>& src = n->grad.values();
      for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Operators

Var Conv1d(Var x, Var weight, std::optional<Var> bias, int stride, int padding,
           int groups) {
  std::vector<Var> parents = {x, weight};
  if (bias) parents.push_back(*bias);
  Graph* g = SameGraph(parents);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 3 || wv.rank() != 3) {
    ShapeError("conv1d", "x " + xv.ShapeString() + ", w " + wv.ShapeString());
  }
  const int B = xv.dim(0), cin = xv.dim(1), T = xv.dim(2);
  const int cout = wv.dim(0), K = wv.dim(2);
  if (groups < 1 || stride < 1 || padding < 0 || cin % groups != 0 ||
      cout % groups != 0 || wv.dim(1) != cin / groups) {
    ShapeError("conv1d", "x " + xv.ShapeString() + ", w " + wv.ShapeString() +
                             ", groups " + std::to_string(groups));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != cout)) {
    ShapeError("conv1d", "bias " + bias->value().ShapeString());
  }
  const int tout = (T + 2 * padding - K) / stride + 1;
  if (T + 2 * padding < K || tout < 1) ShapeError("conv1d", "input too short");
  const int cin_g = cin / groups, cout_g = cout / groups;

  Tensor y({B, cout, tout});
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < cout; ++co) {
      double* yr = &y.at(b, co, 0);
      if (bias) std::fill(yr, yr + tout, bias->value()[co]);
      const int grp = co / cout_g;
      for (int cl = 0; cl < cin_g; ++cl) {
        const double* xr = &xv.at(b, grp * cin_g + cl, 0);
        const double* wr = &wv.at(co, cl, 0);
        for (int k = 0; k < K; ++k) {
          const double w = wr[k];
          if (stride == 1) {
            const int lo = std::max(0, padding - k);
            const int hi = std::min(tout, T - k + padding);
            const double* xs = xr + k - padding;
            for (int t = lo; t < hi; ++t) yr[t] += w * xs[t];
          } else {
            for (int t = 0; t < tout; ++t) {
              int ti = t * stride + k - padding;
              if (ti >= 0 && ti < T) yr[t] += w * xr[ti];
            }
          }
        }
      }
    }
  }

  return g->Record(
      std::move(y), parents,
      [x, weight, bias, stride, padding, cin_g, cout_g](Graph& g,
                                                        const Tensor& gy) {
        const Tensor& xv = x.value();
        const Tensor& wv = weight.value();
        const int B = xv.dim(0), T = xv.dim(2);
        const int cout = wv.dim(0), K = wv.dim(2), tout = gy.dim(2);
        const bool gx_on = g.requires_grad(x);
        const bool gw_on = g.requires_grad(weight);
        Tensor* gx = gx_on ? &g.GradRef(x) : nullptr;
        Tensor* gw = gw_on ? &g.GradRef(weight) : nullptr;
        if (bias && g.requires_grad(*bias)) {
          Tensor& gb = g.GradRef(*bias);
          for (int b = 0; b < B; ++b)
            for (int co = 0; co < cout; ++co) {
              const double* gr = &gy.at(b, co, 0);
              double s = 0.0;
              for (int t = 0; t < tout; ++t) s += gr[t];
              gb[co] += s;
            }
        }
        for (int b = 0; b < B; ++b) {
          for (int co = 0; co < cout; ++co) {
            const double* gr = &gy.at(b, co, 0);
            const int grp = co / cout_g;
            for (int cl = 0; cl < cin_g; ++cl) {
              const int ci = grp * cin_g + cl;
              const double* xr = &xv.at(b, ci, 0);
              for (int k = 0; k < K; ++k) {
                const double w = wv.at(co, cl, k);
                double acc = 0.0;
                if (stride == 1) {
                  const int lo = std::max(0, padding - k);
                  const int hi = std::min(tout, T - k + padding);
                  const int off = k - padding;
                  if (gx_on) {
                    double* gxr = &gx->at(b, ci, 0) + off;
                    for (int t = lo; t < hi; ++t) gxr[t] += w * gr[t];
                  }
                  if (gw_on) {
                    const double* xs = xr + off;
                    for (int t = lo; t < hi; ++t) acc += gr[t] * xs[t];
                  }
                } else {
                  for (int t = 0; t < tout; ++t) {
                    int ti = t * stride + k - padding;
                    if (ti < 0 || ti >= T) continue;
                    if (gx_on) gx->at(b, ci, ti) += w * gr[t];
                    acc += gr[t] * xr[ti];
                  }
                }
                if (gw_on) gw->at(co, cl, k) += acc;
              }
            }
          }
        }
      });
}

Var BatchNorm(Var x, Var gamma, Var beta, Tensor* running_mean,
              Tensor* running_var, const BatchNormOptions& opts) {
  Graph* g = SameGraph({x, gamma, beta});
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 3) {
    ShapeError("batchnorm", "x " + xv.ShapeString());
  }
  const int B = xv.dim(0), C = xv.dim(1), T = xv.rank() == 3 ? xv.dim(2) : 1;
  if (gamma.value().size() != static_cast<size_t>(C) ||
      beta.value().size() != static_cast<size_t>(C) ||
      running_mean->size() != static_cast<size_t>(C) ||
      running_var->size() != static_cast<size_t>(C)) {
    ShapeError("batchnorm", "channels " + std::to_string(C));
  }
  const size_t M = static_cast<size_t>(B) * T;
  auto idx = [C, T](int b, int c, int t) {
    return (static_cast<size_t>(b) * C + c) * T + t;
  };

  std::vector<double> mean(C), inv_std(C);
  if (opts.training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) s += xv[idx(b, c, t)];
      double mu = s / M;
      double v = 0.0;
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
          double d = xv[idx(b, c, t)] - mu;
          v += d * d;
        }
      double var = v / M;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + opts.eps);
      double unbiased = M > 1 ? v / (M - 1) : var;
      (*running_mean)[c] =
          (1.0 - opts.momentum) * (*running_mean)[c] + opts.momentum * mu;
      (*running_var)[c] =
          (1.0 - opts.momentum) * (*running_var)[c] + opts.momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = (*running_mean)[c];
      inv_std[c] = 1.0 / std::sqrt((*running_var)[c] + opts.eps);
    }
  }

  Tensor xhat(xv.shape());
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < T; ++t) {
        size_t i = idx(b, c, t);
        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
        y[i] = gv[c] * xhat[i] + bv[c];
      }

  const bool training = opts.training;
  return g->Record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std, training, B, C, T, M,
       idx](Graph& g, const Tensor& gy) {
        std::vector<double> sum_gy(C, 0.0), sum_gy_xhat(C, 0.0);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t) {
              size_t i = idx(b, c, t);
              sum_gy[c] += gy[i];
              sum_gy_xhat[c] += gy[i] * xhat[i];
            }
        if (g.requires_grad(gamma)) {
          Tensor& gg = g.GradRef(gamma);
          for (int c = 0; c < C; ++c) gg[c] += sum_gy_xhat[c];
        }
        if (g.requires_grad(beta)) {
          Tensor& gb = g.GradRef(beta);
          for (int c = 0; c < C; ++c) gb[c] += sum_gy[c];
        }
        if (!g.requires_grad(x)) return;
        Tensor& gx = g.GradRef(x);
        const Tensor& gv = gamma.value();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const double k = gv[c] * inv_std[c];
            for (int t = 0; t < T; ++t) {
              size_t i = idx(b, c, t);
              if (training) {
                gx[i] += k * (gy[i] - sum_gy[c] / M -
                              xhat[i] * sum_gy_xhat[c] / M);
              } else {
                gx[i] += k * gy[i];
              }
            }
          }
      });
}

Var Relu(Var x) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return g->Record(std::move(y), {x}, [x](Graph& g, const Tensor& gy) {
    const Tensor& xv = x.value();
    Tensor& gx = g.GradRef(x);
    for (size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += gy[i];
    }
  });
}

Var Sigmoid(Var x) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  Tensor yc = y;
  return g->Record(std::move(y), {x},
                   [x, yc = std::move(yc)](Graph& g, const Tensor& gy) {
                     Tensor& gx = g.GradRef(x);
                     for (size_t i = 0; i < yc.size(); ++i) {
                       gx[i] += gy[i] * yc[i] * (1.0 - yc[i]);
                     }
                   });
}

Var Tanh(Var x) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) y[i] = std::tanh(xv[i]);
  Tensor yc = y;
  return g->Record(std::move(y), {x},
                   [x, yc = std::move(yc)](Graph& g, const Tensor& gy) {
                     Tensor& gx = g.GradRef(x);
                     for (size_t i = 0; i < yc.size(); ++i) {
                       gx[i] += gy[i] * (1.0 - yc[i] * yc[i]);
                     }
                   });
}

Var Linear(Var x, Var weight, std::optional<Var> bias) {
  std::vector<Var> parents = {x, weight};
  if (bias) parents.push_back(*bias);
  Graph* g = SameGraph(parents);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    ShapeError("linear", "x " + xv.ShapeString() + ", w " + wv.ShapeString());
  }
  const int B = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  if (bias && bias->value().size() != static_cast<size_t>(out)) {
    ShapeError("linear", "bias " + bias->value().ShapeString());
  }
  Tensor y({B, out});
  for (int b = 0; b < B; ++b) {
    const double* xr = &xv.at(b, 0);
    for (int o = 0; o < out; ++o) {
      const double* wr = &wv.at(o, 0);
      double acc = bias ? bias->value()[o] : 0.0;
      for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y.at(b, o) = acc;
    }
  }
  return g->Record(std::move(y), parents,
                   [x, weight, bias](Graph& g, const Tensor& gy) {
                     const Tensor& xv = x.value();
                     const Tensor& wv = weight.value();
                     const int B = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
                     if (g.requires_grad(x)) {
                       Tensor& gx = g.GradRef(x);
                       for (int b = 0; b < B; ++b)
                         for (int o = 0; o < out; ++o) {
                           const double go = gy.at(b, o);
                           const double* wr = &wv.at(o, 0);
                           double* gxr = &gx.at(b, 0);
                           for (int i = 0; i < in; ++i) gxr[i] += go * wr[i];
                         }
                     }
                     if (g.requires_grad(weight)) {
                       Tensor& gw = g.GradRef(weight);
                       for (int b = 0; b < B; ++b)
                         for (int o = 0; o < out; ++o) {
                           const double go = gy.at(b, o);
                           const double* xr = &xv.at(b, 0);
                           double* gwr = &gw.at(o, 0);
                           for (int i = 0; i < in; ++i) gwr[i] += go * xr[i];
                         }
                     }
                     if (bias && g.requires_grad(*bias)) {
                       Tensor& gb = g.GradRef(*bias);
                       for (int b = 0; b < B; ++b)
                         for (int o = 0; o < out; ++o) gb[o] += gy.at(b, o);
                     }
                   });
}

Var Add(Var a, Var b) {
  Graph* g = SameGraph({a, b});
  if (!a.value().SameShape(b.value())) {
    ShapeError("add", a.value().ShapeString() + " vs " +
                          b.value().ShapeString());
  }
  Tensor y = a.value();
  for (size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return g->Record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& gy) {
    for (Var v : {a, b}) {
      if (!g.requires_grad(v)) continue;
      Tensor& gv = g.GradRef(v);
      for (size_t i = 0; i < gy.size(); ++i) gv[i] += gy[i];
    }
  });
}

Var Mul(Var a, Var b) {
  Graph* g = SameGraph({a, b});
  if (!a.value().SameShape(b.value())) {
    ShapeError("mul", a.value().ShapeString() + " vs " +
                          b.value().ShapeString());
  }
  Tensor y = a.value();
  for (size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return g->Record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& gy) {
    if (g.requires_grad(a)) {
      Tensor& ga = g.GradRef(a);
      const Tensor& bv = b.value();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.GradRef(b);
      const Tensor& av = a.value();
      for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

Var Scale(Var x, double factor) {
  Graph* g = SameGraph({x});
  Tensor y = x.value();
  for (double& v : y.values()) v *= factor;
  return g->Record(std::move(y), {x}, [x, factor](Graph& g, const Tensor& gy) {
    Tensor& gx = g.GradRef(x);
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
  });
}

Var MulChannels(Var x, Var s) {
  Graph* g = SameGraph({x, s});
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (xv.rank() != 3 || sv.rank() != 2 || sv.dim(0) != xv.dim(0) ||
      sv.dim(1) != xv.dim(1)) {
    ShapeError("mul_channels", xv.ShapeString() + " vs " + sv.ShapeString());
  }
  const int B = xv.dim(0), C = xv.dim(1), T = xv.dim(2);
  Tensor y(xv.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double k = sv.at(b, c);
      for (int t = 0; t < T; ++t) y.at(b, c, t) = xv.at(b, c, t) * k;
    }
  return g->Record(std::move(y), {x, s}, [x, s](Graph& g, const Tensor& gy) {
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    const int B = xv.dim(0), C = xv.dim(1), T = xv.dim(2);
    const bool gx_on = g.requires_grad(x), gs_on = g.requires_grad(s);
    Tensor* gx = gx_on ? &g.GradRef(x) : nullptr;
    Tensor* gs = gs_on ? &g.GradRef(s) : nullptr;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        const double k = sv.at(b, c);
        for (int t = 0; t < T; ++t) {
          if (gx_on) gx->at(b, c, t) += gy.at(b, c, t) * k;
          acc += gy.at(b, c, t) * xv.at(b, c, t);
        }
        if (gs_on) gs->at(b, c) += acc;
      }
  });
}

Var MeanTime(Var x) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  if (xv.rank() != 3) ShapeError("mean_time", xv.ShapeString());
  const int B = xv.dim(0), C = xv.dim(1), T = xv.dim(2);
  Tensor y({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int t = 0; t < T; ++t) s += xv.at(b, c, t);
      y.at(b, c) = s / T;
    }
  return g->Record(std::move(y), {x}, [x](Graph& g, const Tensor& gy) {
    const Tensor& xv = x.value();
    const int B = xv.dim(0), C = xv.dim(1), T = xv.dim(2);
    Tensor& gx = g.GradRef(x);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double v = gy.at(b, c) / T;
        for (int t = 0; t < T; ++t) gx.at(b, c, t) += v;
      }
  });
}

Var Softmax(Var x) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  if (xv.rank() < 1) ShapeError("softmax", "scalar input");
  const int n = xv.shape().back();
  const size_t rows = xv.size() / n;
  Tensor y(xv.shape());
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double* yr = y.data() + r * n;
    double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      s += yr[i];
    }
    for (int i = 0; i < n; ++i) yr[i] /= s;
  }
  Tensor yc = y;
  return g->Record(std::move(y), {x},
                   [x, yc = std::move(yc), n, rows](Graph& g,
                                                    const Tensor& gy) {
                     Tensor& gx = g.GradRef(x);
                     for (size_t r = 0; r < rows; ++r) {
                       const double* yr = yc.data() + r * n;
                       const double* gr = gy.data() + r * n;
                       double dot = 0.0;
                       for (int i = 0; i < n; ++i) dot += gr[i] * yr[i];
                       double* gxr = gx.data() + r * n;
                       for (int i = 0; i < n; ++i) gxr[i] += yr[i] * (gr[i] - dot);
                     }
                   });
}

Var Concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  Graph* g = SameGraph(xs);
  const Tensor& first = xs.front().value();
  const int rank = first.rank();
  if (rank != 2 && rank != 3) ShapeError("concat", first.ShapeString());
  const int B = first.dim(0), T = rank == 3 ? first.dim(2) : 1;
  int C = 0;
  std::vector<int> offsets;
  for (const Var& v : xs) {
    const Tensor& t = v.value();
    if (t.rank() != rank || t.dim(0) != B || (rank == 3 && t.dim(2) != T)) {
      ShapeError("concat", first.ShapeString() + " vs " + t.ShapeString());
    }
    offsets.push_back(C);
    C += t.dim(1);
  }
  std::vector<int> shape = rank == 3 ? std::vector<int>{B, C, T}
                                     : std::vector<int>{B, C};
  Tensor y(shape);
  for (size_t k = 0; k < xs.size(); ++k) {
    const Tensor& t = xs[k].value();
    const int ck = t.dim(1);
    for (int b = 0; b < B; ++b) {
      const double* src = t.data() + static_cast<size_t>(b) * ck * T;
      double* dst = y.data() + (static_cast<size_t>(b) * C + offsets[k]) * T;
      std::copy(src, src + static_cast<size_t>(ck) * T, dst);
    }
  }
  return g->Record(std::move(y), xs,
                   [xs, offsets, B, C, T](Graph& g, const Tensor& gy) {
                     for (size_t k = 0; k < xs.size(); ++k) {
                       if (!g.requires_grad(xs[k])) continue;
                       Tensor& gx = g.GradRef(xs[k]);
                       const int ck = gx.dim(1);
                       for (int b = 0; b < B; ++b) {
                         const double* src =
                             gy.data() +
                             (static_cast<size_t>(b) * C + offsets[k]) * T;
                         double* dst =
                             gx.data() + static_cast<size_t>(b) * ck * T;
                         for (size_t i = 0; i < static_cast<size_t>(ck) * T; ++i)
                           dst[i] += src[i];
                       }
                     }
                   });
}

Var AttentiveStats(Var h, Var alpha, double var_floor) {
  Graph* g = SameGraph({h, alpha});
  const Tensor& hv = h.value();
  const Tensor& av = alpha.value();
  if (hv.rank() != 3 || av.rank() != 3 || av.dim(0) != hv.dim(0) ||
      av.dim(1) != 1 || av.dim(2) != hv.dim(2)) {
    ShapeError("attentive_stats", hv.ShapeString() + " vs " + av.ShapeString());
  }
  const int B = hv.dim(0), C = hv.dim(1), T = hv.dim(2);
  Tensor y({B, 2 * C});
  Tensor mu({B, C}), sigma({B, C});
  std::vector<char> above(static_cast<size_t>(B) * C);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double m = 0.0, m2 = 0.0;
      for (int t = 0; t < T; ++t) {
        const double a = av.at(b, 0, t), v = hv.at(b, c, t);
        m += a * v;
        m2 += a * v * v;
      }
      double var = m2 - m * m;
      above[static_cast<size_t>(b) * C + c] = var > var_floor;
      double s = std::sqrt(std::max(var, var_floor));
      mu.at(b, c) = m;
      sigma.at(b, c) = s;
      y.at(b, c) = m;
      y.at(b, C + c) = s;
    }
  return g->Record(
      std::move(y), {h, alpha},
      [h, alpha, mu = std::move(mu), sigma = std::move(sigma),
       above = std::move(above), B, C, T](Graph& g, const Tensor& gy) {
        const Tensor& hv = h.value();
        const Tensor& av = alpha.value();
        const bool gh_on = g.requires_grad(h), ga_on = g.requires_grad(alpha);
        Tensor* gh = gh_on ? &g.GradRef(h) : nullptr;
        Tensor* ga = ga_on ? &g.GradRef(alpha) : nullptr;
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const double m = mu.at(b, c);
            const double d_var = above[static_cast<size_t>(b) * C + c]
                                     ? gy.at(b, C + c) / (2.0 * sigma.at(b, c))
                                     : 0.0;
            const double d_mu = gy.at(b, c) - 2.0 * m * d_var;
            for (int t = 0; t < T; ++t) {
              const double a = av.at(b, 0, t), v = hv.at(b, c, t);
              if (gh_on) gh->at(b, c, t) += a * (d_mu + 2.0 * d_var * v);
              if (ga_on) ga->at(b, 0, t) += d_mu * v + d_var * v * v;
            }
          }
      });
}

Var L2NormalizeRows(Var x, double eps) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2) ShapeError("l2_normalize", xv.ShapeString());
  const int B = xv.dim(0), E = xv.dim(1);
  Tensor y(xv.shape());
  std::vector<double> norm(B);
  for (int b = 0; b < B; ++b) {
    double s = 0.0;
    for (int e = 0; e < E; ++e) s += xv.at(b, e) * xv.at(b, e);
    norm[b] = std::max(std::sqrt(s), eps);
    for (int e = 0; e < E; ++e) y.at(b, e) = xv.at(b, e) / norm[b];
  }
  Tensor yc = y;
  return g->Record(std::move(y), {x},
                   [x, yc = std::move(yc), norm, B, E](Graph& g,
                                                       const Tensor& gy) {
                     Tensor& gx = g.GradRef(x);
                     for (int b = 0; b < B; ++b) {
                       double dot = 0.0;
                       for (int e = 0; e < E; ++e) dot += yc.at(b, e) * gy.at(b, e);
                       for (int e = 0; e < E; ++e) {
                         gx.at(b, e) += (gy.at(b, e) - yc.at(b, e) * dot) / norm[b];
                       }
                     }
                   });
}

Var Sum(Var x) {
  Graph* g = SameGraph({x});
  const Tensor& xv = x.value();
  double s = std::accumulate(xv.values().begin(), xv.values().end(), 0.0);
  return g->Record(Tensor::Scalar(s), {x}, [x](Graph& g, const Tensor& gy) {
    Tensor& gx = g.GradRef(x);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0];
  });
}

Var Mean(Var x) {
  const size_t n = x.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return Scale(Sum(x), 1.0 / static_cast<double>(n));
}

}  // namespace gmmresnext::nn
